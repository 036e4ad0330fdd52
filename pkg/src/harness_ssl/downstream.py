"""Frozen-encoder evaluation: layer-averaged features, a small conv +
attention-pooling classifier, and scoring utilities."""

from __future__ import annotations

import csv
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .audio import FeatureSequence, Waveform
from .diffcore import AdamHParams, AdamState, adam_update, gradients
from .encoder import EncoderConfig, Params, forward

PREDICTION_FIELDS = ("utt_id", "true", "pred", "correct")


class ProbeError(ValueError):
    pass


# --------------------------------------------------------------------------
# features


@torch.no_grad()
def extract_frozen(model: Tuple[Params, EncoderConfig], wave: Union[Waveform, np.ndarray],
                   include_cnn_output: bool = False) -> FeatureSequence:
    """Per-frame mean of the Transformer layer outputs (T x emb_d), eval mode.

    ``include_cnn_output`` adds the pre-Transformer projection to the average.
    """
    params, cfg = model
    out = forward(params, cfg, wave, train_mode=False)
    layers = out.layer_outputs if include_cnn_output else out.layer_outputs[1:]
    avg = torch.stack(layers).mean(dim=0)
    rate = (wave.sample_rate if isinstance(wave, Waveform) else 16000) / cfg.cnn.total_stride
    return FeatureSequence(avg.to(torch.float64).numpy(), rate, "layer_average")


# --------------------------------------------------------------------------
# probe


@dataclass(frozen=True)
class ProbeConfig:
    n_classes: int
    conv_layers: int = 3
    kernel: int = 5
    hidden: int = 80
    dropout: float = 0.4
    batch: int = 4
    steps: int = 10000
    adam: AdamHParams = field(default_factory=lambda: AdamHParams(
        lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, warmup_fraction=0.0))

    def __post_init__(self):
        if self.n_classes < 2:
            raise ProbeError("n_classes must be >= 2")
        if self.hidden < 1 or self.conv_layers < 1 or self.batch < 1 or self.steps < 1:
            raise ProbeError("hidden, conv_layers, batch and steps must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ProbeError("kernel must be odd for same-padding")
        if not 0.0 <= self.dropout < 1.0:
            raise ProbeError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ProbeConfig":
        d = dict(d)
        if "adam" in d:
            d["adam"] = AdamHParams(**d["adam"])
        return cls(**d)


@dataclass
class ProbeParams:
    tensors: "OrderedDict[str, torch.Tensor]"
    config: ProbeConfig
    in_dim: int
    classes: List[str]


def probe_shapes(cfg: ProbeConfig, in_dim: int) -> "OrderedDict[str, Tuple[int, ...]]":
    shapes = OrderedDict()
    c_in = in_dim
    for i in range(cfg.conv_layers):
        shapes[f"conv.{i}.weight"] = (cfg.hidden, c_in, cfg.kernel)
        shapes[f"conv.{i}.bias"] = (cfg.hidden,)
        c_in = cfg.hidden
    shapes["pool.query"] = (cfg.hidden,)
    shapes["ff.weight"] = (cfg.hidden, cfg.hidden)
    shapes["ff.bias"] = (cfg.hidden,)
    shapes["out.weight"] = (cfg.n_classes, cfg.hidden)
    shapes["out.bias"] = (cfg.n_classes,)
    return shapes


def init_probe(cfg: ProbeConfig, in_dim: int, seed: int = 0) -> "OrderedDict[str, torch.Tensor]":
    g = torch.Generator().manual_seed(seed)
    out = OrderedDict()
    for name, shape in probe_shapes(cfg, in_dim).items():
        if name.endswith("bias"):
            out[name] = torch.zeros(shape, dtype=torch.float32)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            out[name] = (torch.rand(shape, generator=g) * 2 - 1) * bound
    return out


def _pad(feats: Sequence[np.ndarray]) -> Tuple[torch.Tensor, torch.Tensor]:
    """Stack variable-length T x D sequences into B x T x D plus a B x T validity mask."""
    T = max(f.shape[0] for f in feats)
    x = torch.zeros(len(feats), T, feats[0].shape[1], dtype=torch.float32)
    valid = torch.zeros(len(feats), T, dtype=torch.bool)
    for b, f in enumerate(feats):
        x[b, : f.shape[0]] = torch.from_numpy(np.asarray(f, dtype=np.float32))
        valid[b, : f.shape[0]] = True
    return x, valid


def probe_forward(p: Dict[str, torch.Tensor], cfg: ProbeConfig, x: torch.Tensor, valid: torch.Tensor,
                  train_mode: bool = False, rng: Optional[torch.Generator] = None,
                  return_pool: bool = False):
    """B x T x D features -> B x n_classes logits.

    Padded frames are zeroed after every conv so they never leak into the
    same-padding windows of real frames, and get zero pooling weight.
    """
    keep = valid.unsqueeze(1).to(x.dtype)
    h = x.transpose(1, 2) * keep
    for i in range(cfg.conv_layers):
        h = F.relu(F.conv1d(h, p[f"conv.{i}.weight"], p[f"conv.{i}.bias"], padding=cfg.kernel // 2))
        if train_mode and cfg.dropout > 0:
            h = h * (torch.rand(h.shape, generator=rng) >= cfg.dropout) / (1.0 - cfg.dropout)
        h = h * keep
    h = h.transpose(1, 2)  # B x T x H
    scores = (h @ p["pool.query"]).masked_fill(~valid, float("-inf"))
    alpha = torch.softmax(scores, dim=1)
    pooled = (alpha.unsqueeze(-1) * h).sum(dim=1)
    z = F.relu(F.linear(pooled, p["ff.weight"], p["ff.bias"]))
    logits = F.linear(z, p["out.weight"], p["out.bias"])
    return (logits, alpha) if return_pool else logits


def _prepare(examples: Sequence[Tuple[FeatureSequence, str]], classes: Optional[List[str]] = None):
    if not examples:
        raise ProbeError("empty example set")
    dims = {f.dim for f, _ in examples}
    if len(dims) != 1:
        raise ProbeError(f"feature dims differ across examples: {sorted(dims)}")
    if classes is None:
        classes = sorted({str(y) for _, y in examples})
    index = {c: i for i, c in enumerate(classes)}
    unknown = {str(y) for _, y in examples} - set(index)
    if unknown:
        raise ProbeError(f"labels not seen in training: {sorted(unknown)}")
    feats = [f.frames for f, _ in examples]
    ys = torch.tensor([index[str(y)] for _, y in examples], dtype=torch.long)
    return feats, ys, classes, dims.pop()


def probe_train(examples: Sequence[Tuple[FeatureSequence, str]], cfg: ProbeConfig,
                seed: int = 0) -> ProbeParams:
    """Cross-entropy training for ``cfg.steps`` minibatches of ``cfg.batch``."""
    feats, ys, classes, dim = _prepare(examples)
    if len(classes) != cfg.n_classes:
        raise ProbeError(f"probe configured for {cfg.n_classes} classes, data has {len(classes)}: {classes}")
    counts = torch.bincount(ys, minlength=cfg.n_classes)
    if (counts == 0).any():
        raise ProbeError("every class needs at least one example")
    params = init_probe(cfg, dim, seed)
    rng = np.random.default_rng(seed)
    drop_rng = torch.Generator().manual_seed(seed)
    state = AdamState.zeros_like(params)
    bsz = min(cfg.batch, len(feats))
    for _ in range(cfg.steps):
        idx = rng.choice(len(feats), size=bsz, replace=False)
        x, valid = _pad([feats[i] for i in idx])
        y = ys[idx]

        def loss_fn(p):
            return F.cross_entropy(probe_forward(p, cfg, x, valid, True, drop_rng), y)

        grads = gradients(loss_fn, params)
        state, params = adam_update(state, params, grads, cfg.adam)
    return ProbeParams(OrderedDict(params), cfg, dim, classes)


@torch.no_grad()
def probe_predict(p: ProbeParams, feats: Sequence[FeatureSequence], batch: int = 64) -> List[str]:
    if not feats:
        raise ProbeError("empty evaluation set")
    for f in feats:
        if f.dim != p.in_dim:
            raise ProbeError(f"feature dim {f.dim} does not match probe input {p.in_dim}")
    out = []
    for lo in range(0, len(feats), batch):
        x, valid = _pad([f.frames for f in feats[lo:lo + batch]])
        logits = probe_forward(p.tensors, p.config, x, valid)
        out.extend(p.classes[i] for i in logits.argmax(dim=1).tolist())
    return out


def probe_eval(p: ProbeParams, examples: Sequence[Tuple[FeatureSequence, str]]) -> float:
    """Fraction of examples whose argmax class matches the label (dropout off)."""
    if not examples:
        raise ProbeError("empty evaluation set")
    preds = probe_predict(p, [f for f, _ in examples])
    return sum(pr == str(y) for pr, (_, y) in zip(preds, examples)) / len(examples)


def write_predictions(path, utt_ids: Sequence[str], truth: Sequence[str], preds: Sequence[str]) -> None:
    rows = sorted(zip(utt_ids, truth, preds))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_FIELDS)
        for u, t, p in rows:
            w.writerow([u, t, p, int(t == p)])


def save_probe(p: ProbeParams, path) -> str:
    from . import container

    meta = {"kind": "probe", "config": p.config.to_dict(), "in_dim": p.in_dim, "classes": p.classes}
    return container.write(path, meta, p.tensors)


def load_probe(path) -> ProbeParams:
    from . import container

    meta, arrays = container.read(path)
    if meta.get("kind") != "probe":
        raise container.FormatError(f"{path}: not a probe (kind={meta.get('kind')!r})")
    tensors = OrderedDict((k, torch.from_numpy(v)) for k, v in arrays.items())
    return ProbeParams(tensors, ProbeConfig.from_dict(meta["config"]), meta["in_dim"], meta["classes"])


# --------------------------------------------------------------------------
# metrics


def _tokens(x: Union[str, Sequence[str]]) -> List[str]:
    return x.split() if isinstance(x, str) else list(x)


def edit_distance(ref: Sequence[str], hyp: Sequence[str]) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(reference: Union[str, Sequence[str]], hypothesis: Union[str, Sequence[str]]) -> float:
    """(substitutions + deletions + insertions) / reference length, over whitespace tokens."""
    ref, hyp = _tokens(reference), _tokens(hypothesis)
    if not ref:
        raise ValueError("reference must contain at least one token")
    return edit_distance(ref, hyp) / len(ref)
