"""Gradients, finite-difference verification and Adam.

Parameters are plain ``dict[str, torch.Tensor]``; reverse-mode gradients come
from ``torch.autograd`` while the finite-difference checker below only ever
evaluates the loss, so the two routes stay independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np
import torch

Params = Dict[str, torch.Tensor]
LossFn = Callable[[Params], torch.Tensor]


class GradientCheckError(RuntimeError):
    pass


def gradients(loss_fn: LossFn, params: Params) -> Params:
    """Exact reverse-mode gradient of a scalar loss w.r.t. every parameter.

    Parameters the loss does not touch get an exact zero gradient.
    """
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    loss = loss_fn(leaves)
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise ValueError("loss_fn must return a scalar tensor")
    names = list(leaves)
    grads = torch.autograd.grad(loss.reshape(()), [leaves[k] for k in names], allow_unused=True)
    return {
        k: (torch.zeros_like(leaves[k]) if g is None else g.detach())
        for k, g in zip(names, grads)
    }


def finite_diff_check(
    loss_fn: LossFn,
    params: Params,
    epsilon: float = 1e-5,
    coords_per_param: int = 100,
    seed: int = 0,
    return_details: bool = False,
):
    """Max relative error between autograd and central differences.

    Up to ``coords_per_param`` coordinates are sampled per tensor (all of them
    when the tensor is smaller). Relative error per coordinate is
    ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    for k, v in params.items():
        if v.dtype != torch.float64:
            raise ValueError(f"finite_diff_check needs float64 params; {k} is {v.dtype}")

    analytic = gradients(loss_fn, params)
    rng = np.random.default_rng(seed)
    work = {k: v.detach().clone() for k, v in params.items()}
    worst = 0.0
    details = {}

    def evaluate() -> float:
        with torch.no_grad():
            val = float(loss_fn(work))
        if not math.isfinite(val):
            raise GradientCheckError("non-finite loss at perturbed point")
        return val

    for name in sorted(work):
        flat = work[name].view(-1)
        n = flat.numel()
        idx = np.arange(n) if n <= coords_per_param else rng.choice(n, coords_per_param, replace=False)
        g_ad = analytic[name].reshape(-1)
        err_here = 0.0
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + epsilon
            f_plus = evaluate()
            flat[i] = orig - epsilon
            f_minus = evaluate()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2 * epsilon)
            ad = g_ad[i].item()
            rel = abs(ad - fd) / max(1e-8, abs(ad) + abs(fd))
            err_here = max(err_here, rel)
        details[name] = err_here
        worst = max(worst, err_here)
    return (worst, details) if return_details else worst


# --------------------------------------------------------------------------
# Adam


@dataclass(frozen=True)
class AdamHParams:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.0
    warmup_fraction: float = 0.08

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")
        if not 0 <= self.warmup_fraction <= 1:
            raise ValueError("warmup_fraction must lie in [0, 1]")


@dataclass
class AdamState:
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Params) -> "AdamState":
        return cls(
            m={k: torch.zeros_like(p) for k, p in params.items()},
            v={k: torch.zeros_like(p) for k, p in params.items()},
            t=0,
        )


def lr_at(step: int, hp: AdamHParams, total_steps: Optional[int]) -> float:
    """Linear warmup over ``warmup_fraction * total_steps`` then linear decay to 0.

    ``step`` is zero-based; ``total_steps=None`` means a constant rate.
    """
    if total_steps is None:
        return hp.lr
    warm = int(hp.warmup_fraction * total_steps)
    if step < warm:
        return hp.lr * (step + 1) / warm
    return hp.lr * (total_steps - step) / (total_steps - warm)


def adam_update(state: AdamState, params: Params, grads: Params, hp: AdamHParams,
                total_steps: Optional[int] = None):
    """One bias-corrected Adam step; returns ``(new_state, new_params)``.

    Inputs are not modified.
    """
    if set(params) != set(grads):
        raise ValueError("params and grads have different names")
    if not state.m:
        state = AdamState.zeros_like(params)
    if total_steps is not None and state.t >= total_steps:
        raise ValueError(f"optimizer already at step {state.t} of {total_steps}")

    lr = lr_at(state.t, hp, total_steps)
    t = state.t + 1
    c1 = 1.0 - hp.beta1 ** t
    c2 = 1.0 - hp.beta2 ** t
    new_m, new_v, new_p = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ValueError(f"shape mismatch for {k}: param {tuple(p.shape)}, grad {tuple(g.shape)}")
        m = hp.beta1 * state.m[k] + (1 - hp.beta1) * g
        v = hp.beta2 * state.v[k] + (1 - hp.beta2) * g * g
        step = lr * (m / c1) / (torch.sqrt(v / c2) + hp.eps)
        p_new = p - step
        if hp.weight_decay:
            p_new = p_new - lr * hp.weight_decay * p
        new_m[k], new_v[k], new_p[k] = m, v, p_new
    return AdamState(new_m, new_v, t), new_p
