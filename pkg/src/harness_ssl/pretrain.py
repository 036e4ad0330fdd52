"""Span masking, the masked-prediction objective and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .diffcore import AdamHParams, AdamState, adam_update, gradients, lr_at
from .encoder import EncoderConfig, Params, cnn_output_length, forward_batch, save_checkpoint

log = logging.getLogger(__name__)

REPORT_FIELDS = ("step", "loss", "masked_acc", "unmasked_acc", "lr")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class MaskSpec:
    p_mask: float = 0.80
    span_len: int = 10

    def __post_init__(self):
        if not 0 <= self.p_mask <= 1:
            raise ValueError("p_mask must lie in [0, 1]")
        if self.span_len < 1:
            raise ValueError("span_len must be >= 1")


@dataclass(frozen=True)
class LossWeights:
    w_masked: float = 1.0
    w_unmasked: float = 0.1

    def __post_init__(self):
        if self.w_masked < 0 or self.w_unmasked < 0:
            raise ValueError("loss weights must be non-negative")
        if self.w_masked == 0 and self.w_unmasked == 0:
            raise ValueError("loss weights must not both be zero")


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_utterances: int = 8
    mask: MaskSpec = field(default_factory=MaskSpec)
    weights: LossWeights = field(default_factory=LossWeights)
    adam: AdamHParams = field(default_factory=AdamHParams)
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_utterances < 1 or self.log_every < 1:
            raise ValueError("batch_utterances and log_every must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        if "mask" in d:
            d["mask"] = MaskSpec(**d["mask"])
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        if "adam" in d:
            d["adam"] = AdamHParams(**d["adam"])
        return cls(**d)


# --------------------------------------------------------------------------
# masking


def num_spans(T: int, spec: MaskSpec, u: float) -> int:
    return int(math.floor(spec.p_mask * T / spec.span_len + u))


def sample_mask(T: int, spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices of masked frames.

    ``floor(p_mask * T / span_len + u)`` span starts are drawn without
    replacement from ``[0, T - span_len]``; overlapping spans are merged.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    n = num_spans(T, spec, rng.random())
    if n <= 0:
        return np.zeros(0, dtype=np.int64)
    if T < spec.span_len:
        return np.arange(T, dtype=np.int64)
    positions = T - spec.span_len + 1
    starts = rng.choice(positions, size=min(n, positions), replace=False)
    covered = np.zeros(T, dtype=bool)
    for s in starts:
        covered[s:s + spec.span_len] = True
    return np.flatnonzero(covered)


def expected_mask_fraction(T: int, spec: MaskSpec) -> float:
    """Overlap approximation ``1 - (1 - l/(T-l+1))**n`` with ``n = floor(p*T/l)``."""
    n = int(math.floor(spec.p_mask * T / spec.span_len))
    return 1.0 - (1.0 - spec.span_len / (T - spec.span_len + 1)) ** n


def _as_bool_mask(mask, T: int) -> torch.Tensor:
    if isinstance(mask, torch.Tensor) and mask.dtype == torch.bool:
        if mask.shape != (T,):
            raise ValueError(f"mask has shape {tuple(mask.shape)}, expected ({T},)")
        return mask
    m = torch.zeros(T, dtype=torch.bool)
    idx = torch.as_tensor(sorted(int(i) for i in mask), dtype=torch.long)
    if idx.numel() and (idx[0] < 0 or idx[-1] >= T):
        raise ValueError(f"mask index out of range for {T} frames")
    m[idx] = True
    return m


def _as_labels(labels) -> torch.Tensor:
    if hasattr(labels, "labels"):
        labels = labels.labels
    return torch.as_tensor(np.asarray(labels), dtype=torch.long)


# --------------------------------------------------------------------------
# objective


def masked_prediction_loss(logits: torch.Tensor, labels, mask, w: LossWeights = LossWeights()) -> dict:
    """Weighted mean cross-entropy over masked and unmasked frames.

    A region with no frames contributes zero. Returns a dict with the scalar
    ``loss`` tensor and argmax accuracies ``masked_acc`` / ``unmasked_acc``
    (NaN for an empty region).
    """
    if logits.dim() != 2 or logits.shape[0] == 0:
        raise ValueError("logits must be a non-empty T x K tensor")
    T, K = logits.shape
    y = _as_labels(labels)
    if y.shape != (T,):
        raise ValueError(f"{y.shape[0]} labels for {T} frames")
    if int(y.max()) >= K or int(y.min()) < 0:
        raise ValueError(f"label out of range [0, {K})")
    m = _as_bool_mask(mask, T)
    ce = F.cross_entropy(logits, y, reduction="none")
    correct = logits.argmax(dim=-1) == y

    loss = logits.new_zeros(())
    out = {}
    for region, sel, weight in (("masked", m, w.w_masked), ("unmasked", ~m, w.w_unmasked)):
        n = int(sel.sum())
        if n:
            if weight:
                loss = loss + weight * ce[sel].mean()
            out[f"{region}_acc"] = float(correct[sel].float().mean())
        else:
            out[f"{region}_acc"] = float("nan")
        out[f"n_{region}"] = n
        out[f"{region}_correct"] = int(correct[sel].sum())
    out["loss"] = loss
    return out


def batch_loss(logits: torch.Tensor, labels: torch.Tensor, masks: torch.Tensor, w: LossWeights) -> dict:
    """Per-utterance losses averaged over the batch; accuracies pooled over frames."""
    per = [masked_prediction_loss(logits[b], labels[b], masks[b], w) for b in range(logits.shape[0])]
    total = torch.stack([p["loss"] for p in per]).mean()
    stats = {"loss": total}
    for region in ("masked", "unmasked"):
        n = sum(p[f"n_{region}"] for p in per)
        c = sum(p[f"{region}_correct"] for p in per)
        stats[f"{region}_acc"] = c / n if n else float("nan")
        stats[f"n_{region}"] = n
        stats[f"{region}_correct"] = c
    return stats


# --------------------------------------------------------------------------
# training


@dataclass
class TrainReport:
    rows: List[dict] = field(default_factory=list)
    adam_state: Optional[AdamState] = None

    @property
    def steps_taken(self) -> int:
        return self.adam_state.t if self.adam_state else 0

    @property
    def final(self) -> dict:
        return self.rows[-1] if self.rows else {}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, lineterminator="\n")
            writer.writeheader()
            for r in self.rows:
                writer.writerow({k: _fmt(r[k]) for k in REPORT_FIELDS})


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else v


def read_report_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def check_labels(cfg: EncoderConfig, labels: Mapping, data: Sequence) -> None:
    for utt in data:
        if utt.utt_id not in labels:
            raise TrainingError(f"no labels for utterance {utt.utt_id!r}")
        y = np.asarray(_as_labels(labels[utt.utt_id]))
        T = cnn_output_length(len(utt.wave), cfg.cnn)
        if y.shape[0] != T:
            raise TrainingError(
                f"utterance {utt.utt_id!r}: {y.shape[0]} labels but {T} encoder frames"
            )
        if y.size and (y.max() >= cfg.num_clusters or y.min() < 0):
            raise TrainingError(
                f"utterance {utt.utt_id!r}: label outside [0, {cfg.num_clusters})"
            )


def make_batch(utts: Sequence, labels: Mapping, cfg: EncoderConfig):
    """Crop a batch (sorted by id) to its shortest member; prefix frames keep their labels."""
    utts = sorted(utts, key=lambda u: u.utt_id)
    n = min(len(u.wave) for u in utts)
    T = cnn_output_length(n, cfg.cnn)
    waves = torch.from_numpy(np.stack([u.wave.samples[:n] for u in utts]).astype(np.float32))
    ys = torch.stack([_as_labels(labels[u.utt_id])[:T] for u in utts])
    return utts, waves, ys, T


def train(model: Tuple[Params, EncoderConfig], labels: Mapping, data: Sequence, tc: TrainConfig,
          checkpoint_dir=None) -> Tuple[Params, TrainReport]:
    """Masked-prediction training; reproducible for a fixed ``tc.seed``."""
    params, cfg = model
    if not data:
        raise TrainingError("empty training set")
    check_labels(cfg, labels, data)
    data = sorted(data, key=lambda u: u.utt_id)
    params = {k: v.to(torch.float32).clone() for k, v in params.items()}
    rng = np.random.default_rng(tc.seed)
    drop_rng = torch.Generator().manual_seed(tc.seed)
    state = AdamState.zeros_like(params)
    report = TrainReport()
    bsz = min(tc.batch_utterances, len(data))
    acc = _Accumulator()

    for step in range(tc.steps):
        chosen = [data[i] for i in rng.choice(len(data), size=bsz, replace=False)]
        utts, waves, ys, T = make_batch(chosen, labels, cfg)
        masks = torch.zeros(len(utts), T, dtype=torch.bool)
        for b in range(len(utts)):
            masks[b, sample_mask(T, tc.mask, rng)] = True
        stats = {}

        def loss_fn(p):
            out = forward_batch(p, cfg, waves, masks, train_mode=True, rng=drop_rng)
            res = batch_loss(out.logits, ys, masks, tc.weights)
            stats.update(res)
            return res["loss"]

        grads = gradients(loss_fn, params)
        loss_val = float(stats["loss"].detach())
        if not math.isfinite(loss_val):
            raise TrainingError(f"non-finite loss at step {step + 1}")
        lr = lr_at(step, tc.adam, tc.steps)
        state, params = adam_update(state, params, grads, tc.adam, tc.steps)
        acc.add(loss_val, stats)

        done = step + 1
        if done % tc.log_every == 0 or done == tc.steps:
            row = acc.row(done, lr)
            report.rows.append(row)
            log.info("step %d loss %.4f masked_acc %.3f lr %.2e", done, row["loss"], row["masked_acc"], lr)
            acc = _Accumulator()
        if checkpoint_dir and tc.checkpoint_every and done % tc.checkpoint_every == 0:
            save_checkpoint(params, cfg, Path(checkpoint_dir) / f"step{done}.ckpt")

    report.adam_state = state
    return params, report


class _Accumulator:
    def __init__(self):
        self.loss = 0.0
        self.n = 0
        self.counts = {"masked": [0, 0], "unmasked": [0, 0]}

    def add(self, loss: float, stats: dict) -> None:
        self.loss += loss
        self.n += 1
        for r in self.counts:
            self.counts[r][0] += stats[f"{r}_correct"]
            self.counts[r][1] += stats[f"n_{r}"]

    def row(self, step: int, lr: float) -> dict:
        def ratio(r):
            c, n = self.counts[r]
            return c / n if n else float("nan")

        return {"step": step, "loss": self.loss / self.n, "masked_acc": ratio("masked"),
                "unmasked_acc": ratio("unmasked"), "lr": lr}


@torch.no_grad()
def evaluate(model: Tuple[Params, EncoderConfig], labels: Mapping, data: Sequence,
             mask: MaskSpec = MaskSpec(), weights: LossWeights = LossWeights(),
             seed: int = 0, batch_utterances: int = 16) -> dict:
    """Eval-mode loss and accuracies over ``data`` with freshly sampled masks."""
    params, cfg = model
    rng = np.random.default_rng(seed)
    data = sorted(data, key=lambda u: u.utt_id)
    acc = _Accumulator()
    for lo in range(0, len(data), batch_utterances):
        chunk = data[lo:lo + batch_utterances]
        # equal-length groups keep every frame
        by_len: Dict[int, list] = {}
        for u in chunk:
            by_len.setdefault(len(u.wave), []).append(u)
        for n in sorted(by_len):
            utts, waves, ys, T = make_batch(by_len[n], labels, cfg)
            masks = torch.zeros(len(utts), T, dtype=torch.bool)
            for b in range(len(utts)):
                masks[b, sample_mask(T, mask, rng)] = True
            out = forward_batch(params, cfg, waves, masks)
            res = batch_loss(out.logits, ys, masks, weights)
            acc.add(float(res["loss"]), res)
    row = acc.row(0, 0.0)
    return {"loss": row["loss"], "masked_acc": row["masked_acc"], "unmasked_acc": row["unmasked_acc"]}
