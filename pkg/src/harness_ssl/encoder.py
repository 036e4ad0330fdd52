"""CNN + Transformer encoder with a masked-prediction head.

The model is functional: parameters are a flat ``dict`` of tensors whose names
and shapes are fully determined by :class:`EncoderConfig` (see
:func:`param_shapes`). This keeps blocked-averaging initialisation,
checkpointing and gradient checking simple name-based operations.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .audio import FeatureSequence, Waveform

Params = Dict[str, torch.Tensor]

HEAD_MODES = ("cosine", "plain_linear")
CNN_NORMS = ("group_first", "none")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CnnSpec:
    strides: Tuple[int, ...] = (5, 2, 2, 2, 2, 2, 2)
    kernels: Tuple[int, ...] = (10, 3, 3, 3, 3, 2, 2)
    channels: int = 512
    norm: str = "group_first"

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        if len(self.strides) != len(self.kernels) or not self.strides:
            raise ConfigError("strides and kernels must be non-empty and of equal length")
        if min(self.strides) < 1 or min(self.kernels) < 1:
            raise ConfigError("strides and kernels must be >= 1")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if self.norm not in CNN_NORMS:
            raise ConfigError(f"unknown CNN norm {self.norm!r}")

    @property
    def total_stride(self) -> int:
        return math.prod(self.strides)

    @property
    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for k, s in zip(self.kernels, self.strides):
            rf += (k - 1) * jump
            jump *= s
        return rf


@dataclass(frozen=True)
class EncoderConfig:
    depth: int
    emb_d: int
    d_ffn: int
    h_attn: int
    num_clusters: int = 1000
    proj_dim: int = 768
    cnn: CnnSpec = field(default_factory=CnnSpec)
    pos_conv_kernel: int = 128
    pos_conv_groups: int = 16
    dropout: float = 0.1
    head_mode: str = "cosine"
    temperature: float = 0.1

    def __post_init__(self):
        if isinstance(self.cnn, dict):
            object.__setattr__(self, "cnn", CnnSpec(**self.cnn))
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.h_attn < 1 or self.emb_d % self.h_attn:
            raise ConfigError(
                f"emb_d {self.emb_d} is not divisible by h_attn {self.h_attn}"
            )
        if self.num_clusters < 2:
            raise ConfigError("num_clusters must be >= 2")
        if self.proj_dim < 1 or self.d_ffn < 1:
            raise ConfigError("proj_dim and d_ffn must be >= 1")
        if self.pos_conv_kernel < 1 or self.emb_d % self.pos_conv_groups:
            raise ConfigError(
                f"emb_d {self.emb_d} is not divisible by pos_conv_groups {self.pos_conv_groups}"
            )
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"unknown head_mode {self.head_mode!r}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cnn"]["strides"] = list(self.cnn.strides)
        d["cnn"]["kernels"] = list(self.cnn.kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        if "cnn" in d:
            d["cnn"] = CnnSpec(**d["cnn"])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad encoder config: {e}") from e

    def replace(self, **changes) -> "EncoderConfig":
        return replace(self, **changes)


# Reference architectures plus the head- and width-reduction variants.
PRESETS: Dict[str, EncoderConfig] = {
    "H-L": EncoderConfig(depth=24, emb_d=1024, d_ffn=4096, h_attn=16),
    "H-S": EncoderConfig(depth=4, emb_d=1024, d_ffn=2048, h_attn=16),
    "H-S*": EncoderConfig(depth=4, emb_d=1024, d_ffn=2048, h_attn=4),
    "H-ST": EncoderConfig(depth=4, emb_d=512, d_ffn=2048, h_attn=16),
    "H-ST-256": EncoderConfig(depth=4, emb_d=256, d_ffn=2048, h_attn=16),
}

# Parameter counts (millions) as published, for side-by-side reporting only.
PUBLISHED_PARAMS_M = {"H-L": 316, "H-S": 65, "H-S*": 48, "H-ST": 28}
# Structural compression relative to H-L as published.
PUBLISHED_DELTA_S = {"H-S": 0.794, "H-ST": 0.937}


def toy_config(num_clusters: int = 8, depth: int = 2, emb_d: int = 16, h_attn: int = 2,
               channels: int = 16, **kw) -> EncoderConfig:
    """Desk-scale model keeping the default CNN geometry (20 ms frames)."""
    defaults = dict(
        d_ffn=2 * emb_d, proj_dim=emb_d, pos_conv_kernel=16, pos_conv_groups=min(4, emb_d),
        dropout=0.0,
    )
    defaults.update(kw)
    return EncoderConfig(
        depth=depth, emb_d=emb_d, h_attn=h_attn, num_clusters=num_clusters,
        cnn=CnnSpec(channels=channels), **defaults,
    )


# --------------------------------------------------------------------------
# geometry and parameter accounting


def cnn_output_length(num_samples: int, spec: CnnSpec = CnnSpec()) -> int:
    length = num_samples
    for k, s in zip(spec.kernels, spec.strides):
        if length < k:
            raise ValueError(
                f"input of {num_samples} samples is too short for one output frame "
                f"(receptive field {spec.receptive_field})"
            )
        length = (length - k) // s + 1
    return length


def layer_param_names(j: int) -> List[str]:
    p = f"layers.{j}."
    names = [p + "ln1.weight", p + "ln1.bias"]
    for proj in "qkvo":
        names.append(p + f"attn.{proj}.weight")
        if proj != "k":
            names.append(p + f"attn.{proj}.bias")
    names += [p + "ln2.weight", p + "ln2.bias",
              p + "ffn.in.weight", p + "ffn.in.bias",
              p + "ffn.out.weight", p + "ffn.out.bias"]
    return names


def param_shapes(cfg: EncoderConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    C, E, Fd, P, K = cfg.cnn.channels, cfg.emb_d, cfg.d_ffn, cfg.proj_dim, cfg.num_clusters
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    c_in = 1
    for i, k in enumerate(cfg.cnn.kernels):
        shapes[f"cnn.{i}.weight"] = (C, c_in, k)
        if i == 0 and cfg.cnn.norm == "group_first":
            shapes["cnn.0.norm.weight"] = (C,)
            shapes["cnn.0.norm.bias"] = (C,)
        c_in = C
    shapes["feat_ln.weight"] = (C,)
    shapes["feat_ln.bias"] = (C,)
    shapes["feat_proj.weight"] = (E, C)
    shapes["feat_proj.bias"] = (E,)
    shapes["mask_emb"] = (E,)
    shapes["pos_conv.weight"] = (E, E // cfg.pos_conv_groups, cfg.pos_conv_kernel)
    shapes["pos_conv.bias"] = (E,)
    for j in range(cfg.depth):
        p = f"layers.{j}."
        shapes[p + "ln1.weight"] = (E,)
        shapes[p + "ln1.bias"] = (E,)
        for proj in "qkvo":
            shapes[p + f"attn.{proj}.weight"] = (E, E)
            # no key bias: softmax over keys cancels it, so its gradient is identically 0
            if proj != "k":
                shapes[p + f"attn.{proj}.bias"] = (E,)
        shapes[p + "ln2.weight"] = (E,)
        shapes[p + "ln2.bias"] = (E,)
        shapes[p + "ffn.in.weight"] = (Fd, E)
        shapes[p + "ffn.in.bias"] = (Fd,)
        shapes[p + "ffn.out.weight"] = (E, Fd)
        shapes[p + "ffn.out.bias"] = (E,)
    shapes["final_ln.weight"] = (E,)
    shapes["final_ln.bias"] = (E,)
    shapes["final_proj.weight"] = (P, E)
    shapes["final_proj.bias"] = (P,)
    if cfg.head_mode == "cosine":
        shapes["label_emb"] = (K, P)
    else:
        shapes["head.weight"] = (K, P)
        shapes["head.bias"] = (K,)
    return shapes


def count_params(cfg: EncoderConfig) -> int:
    """Closed-form scalar count; agrees with :func:`param_shapes` by construction tests."""
    C, E, Fd, P, K = cfg.cnn.channels, cfg.emb_d, cfg.d_ffn, cfg.proj_dim, cfg.num_clusters
    ks = cfg.cnn.kernels
    cnn = ks[0] * C + sum(C * C * k for k in ks[1:])
    if cfg.cnn.norm == "group_first":
        cnn += 2 * C
    front = 2 * C + (C * E + E) + E + (E * (E // cfg.pos_conv_groups) * cfg.pos_conv_kernel + E)
    layer = 4 * E * E + 3 * E + (2 * E * Fd + Fd + E) + 4 * E
    head = K * P if cfg.head_mode == "cosine" else K * P + K
    return cnn + front + cfg.depth * layer + 2 * E + (E * P + P) + head


def param_breakdown(cfg: EncoderConfig) -> Dict[str, int]:
    groups: Dict[str, int] = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("cnn."):
            key = "cnn"
        elif name.startswith("layers."):
            key = "transformer_layers"
        elif name.startswith("pos_conv"):
            key = "pos_conv"
        elif name in ("label_emb", "head.weight", "head.bias", "final_proj.weight", "final_proj.bias"):
            key = "prediction_head"
        else:
            key = "other"
        groups[key] = groups.get(key, 0) + math.prod(shape)
    return groups


def init_params(cfg: EncoderConfig, seed: int = 0, dtype=torch.float32) -> Params:
    """Glorot-uniform matrices, unit norm scales, zero biases."""
    gen = torch.Generator().manual_seed(int(seed))
    params: Params = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        if is_norm_param(name) and name.endswith(".weight"):
            t = torch.ones(shape, dtype=dtype)
        elif name.endswith(".bias"):
            t = torch.zeros(shape, dtype=dtype)
        else:
            a = init_bound(shape)
            t = ((torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1) * a).to(dtype)
        params[name] = t
    return params


def init_bound(shape: Sequence[int]) -> float:
    if len(shape) == 1:
        fan_in, fan_out = 1, shape[0]
    elif len(shape) == 2:
        fan_out, fan_in = shape
    else:
        rf = math.prod(shape[2:])
        fan_out, fan_in = shape[0] * rf, shape[1] * rf
    return math.sqrt(6.0 / (fan_in + fan_out))


def is_norm_param(name: str) -> bool:
    parts = name.split(".")
    return len(parts) >= 2 and parts[-2] in ("ln1", "ln2", "feat_ln", "final_ln", "norm")


# --------------------------------------------------------------------------
# forward


@dataclass
class EncoderOutput:
    layer_outputs: List[torch.Tensor]  # depth + 1 tensors, each [B,] T x emb_d
    logits: torch.Tensor  # [B,] T x K

    def features(self, layer: int, frame_rate: float = 50.0, index: int = 0) -> FeatureSequence:
        x = self.layer_outputs[layer]
        if x.dim() == 3:
            x = x[index]
        return FeatureSequence(x.detach().cpu().numpy(), frame_rate, f"encoder_layer({layer})")


def _dropout(x: torch.Tensor, p: float, train_mode: bool, rng: Optional[torch.Generator]) -> torch.Tensor:
    if not train_mode or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=rng, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def _attention(x: torch.Tensor, params: Params, prefix: str, heads: int) -> torch.Tensor:
    B, T, E = x.shape
    dh = E // heads

    def proj(n):
        y = F.linear(x, params[prefix + f"attn.{n}.weight"], params.get(prefix + f"attn.{n}.bias"))
        return y.view(B, T, heads, dh).transpose(1, 2)

    q, k, v = proj("q"), proj("k"), proj("v")
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    ctx = torch.softmax(scores, dim=-1) @ v
    ctx = ctx.transpose(1, 2).reshape(B, T, E)
    return F.linear(ctx, params[prefix + "attn.o.weight"], params[prefix + "attn.o.bias"])


def cnn_features(params: Params, cfg: EncoderConfig, waves: torch.Tensor) -> torch.Tensor:
    """Raw audio (B x N) -> frame features (B x T x channels)."""
    x = waves.unsqueeze(1)
    for i, s in enumerate(cfg.cnn.strides):
        x = F.conv1d(x, params[f"cnn.{i}.weight"], stride=s)
        if i == 0 and cfg.cnn.norm == "group_first":
            x = F.group_norm(x, cfg.cnn.channels, params["cnn.0.norm.weight"], params["cnn.0.norm.bias"])
        x = F.gelu(x)
    return x.transpose(1, 2)


def forward_batch(
    params: Params,
    cfg: EncoderConfig,
    waves: torch.Tensor,
    mask: Optional[torch.Tensor] = None,
    train_mode: bool = False,
    rng: Optional[torch.Generator] = None,
) -> EncoderOutput:
    """Equal-length batch forward. ``mask`` is a B x T boolean tensor."""
    dtype = params["feat_proj.weight"].dtype
    waves = waves.to(dtype)
    if waves.dim() != 2 or waves.shape[1] == 0:
        raise ValueError("waves must be a non-empty B x N tensor")
    cnn_output_length(waves.shape[1], cfg.cnn)
    p_drop = cfg.dropout

    x = cnn_features(params, cfg, waves)
    x = F.layer_norm(x, (cfg.cnn.channels,), params["feat_ln.weight"], params["feat_ln.bias"])
    x = F.linear(x, params["feat_proj.weight"], params["feat_proj.bias"])
    x = _dropout(x, p_drop, train_mode, rng)
    if mask is not None:
        if mask.shape != x.shape[:2]:
            raise ValueError(f"mask shape {tuple(mask.shape)} does not match frames {tuple(x.shape[:2])}")
        x = torch.where(mask.unsqueeze(-1), params["mask_emb"].expand_as(x), x)
    outputs = [x]

    k = cfg.pos_conv_kernel
    pos = F.conv1d(x.transpose(1, 2), params["pos_conv.weight"], params["pos_conv.bias"],
                   padding=k // 2, groups=cfg.pos_conv_groups)
    if k % 2 == 0:
        pos = pos[..., :-1]
    x = x + F.gelu(pos).transpose(1, 2)

    E = cfg.emb_d
    for j in range(cfg.depth):
        p = f"layers.{j}."
        h = F.layer_norm(x, (E,), params[p + "ln1.weight"], params[p + "ln1.bias"])
        x = x + _dropout(_attention(h, params, p, cfg.h_attn), p_drop, train_mode, rng)
        h = F.layer_norm(x, (E,), params[p + "ln2.weight"], params[p + "ln2.bias"])
        h = F.gelu(F.linear(h, params[p + "ffn.in.weight"], params[p + "ffn.in.bias"]))
        h = F.linear(h, params[p + "ffn.out.weight"], params[p + "ffn.out.bias"])
        x = x + _dropout(h, p_drop, train_mode, rng)
        outputs.append(x)
    outputs[-1] = F.layer_norm(x, (E,), params["final_ln.weight"], params["final_ln.bias"])

    proj = F.linear(outputs[-1], params["final_proj.weight"], params["final_proj.bias"])
    if cfg.head_mode == "cosine":
        u = proj / proj.norm(dim=-1, keepdim=True).clamp_min(1e-8)
        lab = params["label_emb"]
        lab = lab / lab.norm(dim=-1, keepdim=True).clamp_min(1e-8)
        logits = (u @ lab.T) / cfg.temperature
    else:
        logits = F.linear(proj, params["head.weight"], params["head.bias"])
    return EncoderOutput(outputs, logits)


def _as_tensor(wave) -> torch.Tensor:
    if isinstance(wave, Waveform):
        return torch.from_numpy(wave.samples)
    if isinstance(wave, np.ndarray):
        return torch.from_numpy(wave)
    return wave


def forward(
    params: Params,
    cfg: EncoderConfig,
    wave: Union[Waveform, np.ndarray, torch.Tensor],
    mask=None,
    train_mode: bool = False,
    rng: Optional[torch.Generator] = None,
) -> EncoderOutput:
    """Single-utterance forward; ``mask`` is an iterable of frame indices."""
    x = _as_tensor(wave)
    if x.numel() == 0:
        raise ValueError("empty waveform")
    T = cnn_output_length(x.shape[-1], cfg.cnn)
    m = None
    if mask is not None:
        idx = sorted(int(i) for i in mask)
        if idx and (idx[0] < 0 or idx[-1] >= T):
            raise ValueError(f"mask index out of range for {T} frames")
        m = torch.zeros(1, T, dtype=torch.bool)
        m[0, idx] = True
    out = forward_batch(params, cfg, x.reshape(1, -1), m, train_mode, rng)
    return EncoderOutput([o[0] for o in out.layer_outputs], out.logits[0])


def params_to(params: Params, dtype) -> Params:
    return OrderedDict((k, v.to(dtype)) for k, v in params.items())


def validate_params(params: Params, cfg: EncoderConfig) -> None:
    """Raise ConfigError naming the first tensor that disagrees with ``cfg``."""
    expected = param_shapes(cfg)
    for name, shape in expected.items():
        if name not in params:
            raise ConfigError(f"tensor {name!r} missing for this config")
        if tuple(params[name].shape) != shape:
            raise ConfigError(
                f"tensor {name!r} has shape {tuple(params[name].shape)}, config implies {shape}"
            )
    extra = set(params) - set(expected)
    if extra:
        raise ConfigError(f"unexpected tensor {sorted(extra)[0]!r} for this config")


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: Params, cfg: EncoderConfig, path, extra: Optional[dict] = None) -> str:
    """Write params + config; returns the file's content hash."""
    from . import container

    validate_params(params, cfg)
    meta = {"kind": "checkpoint", "config": cfg.to_dict()}
    if extra:
        meta["extra"] = extra
    return container.write(path, meta, params)


def load_checkpoint(path) -> Tuple[Params, EncoderConfig]:
    from . import container

    meta, arrays = container.read(path)
    if meta.get("kind") != "checkpoint":
        raise container.FormatError(f"{path}: not a checkpoint (kind={meta.get('kind')!r})")
    cfg = EncoderConfig.from_dict(meta["config"])
    params = OrderedDict((k, torch.from_numpy(v)) for k, v in arrays.items())
    try:
        validate_params(params, cfg)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from e
    return params, cfg
