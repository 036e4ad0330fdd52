"""Continuous frames -> discrete pseudo-labels.

PCA (optional supervision compression), k-means with k-means++ seeding, and
nearest-centroid assignment, plus the per-iteration dispatch of which
features are clustered.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import container
from .audio import FeatureSequence, MfccConfig, mfcc_features
from .encoder import CnnSpec, EncoderConfig, Params, cnn_output_length, forward_batch

log = logging.getLogger(__name__)

_CHUNK_ELEMS = 1 << 22


class QuantizerError(ValueError):
    pass


@dataclass
class PcaTransform:
    mean: np.ndarray          # (D,)
    components: np.ndarray    # (D', D), orthonormal rows
    explained_variance: np.ndarray  # (D',), non-increasing

    @property
    def in_dim(self) -> int:
        return self.components.shape[1]

    @property
    def out_dim(self) -> int:
        return self.components.shape[0]

    def project(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise QuantizerError(f"PCA expects dim {self.in_dim}, got {x.shape[-1]}")
        return (x - self.mean) @ self.components.T

    def reconstruct(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) @ self.components + self.mean


def fit_pca(samples: np.ndarray, d_prime: int) -> PcaTransform:
    """Top-``d_prime`` principal directions via SVD of the centred data.

    Component signs are fixed so each row's first non-negligible entry is
    positive. Requesting more components than the data rank warns and pads
    the explained variance with zeros.
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2:
        raise QuantizerError("samples must be an N x D matrix")
    N, D = X.shape
    if not 1 <= d_prime <= D:
        raise QuantizerError(f"d_prime must lie in [1, {D}], got {d_prime}")
    if N <= d_prime:
        raise QuantizerError(f"need more than d_prime={d_prime} samples, got {N}")
    if not np.all(np.isfinite(X)):
        raise QuantizerError("samples contain non-finite values")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    comps = vt[:d_prime].copy()
    for row in comps:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            row *= -1
    var = s[:d_prime] ** 2 / (N - 1)
    tol = s[0] * max(N, D) * np.finfo(float).eps if s.size else 0.0
    rank = int(np.sum(s > tol))
    if d_prime > rank:
        warnings.warn(f"PCA: requested {d_prime} components but data rank is {rank}")
        var[rank:] = 0.0
    return PcaTransform(mean, comps, var)


def apply_pca(t: PcaTransform, f: FeatureSequence) -> FeatureSequence:
    if f.dim != t.in_dim:
        raise QuantizerError(f"feature dim {f.dim} does not match PCA input dim {t.in_dim}")
    return FeatureSequence(t.project(f.frames), f.frame_rate, "pca")


# --------------------------------------------------------------------------
# k-means


def squared_distances(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Exact ``||x - c||^2`` for all pairs (chunked), so ties stay exact."""
    N, D = X.shape
    out = np.empty((N, C.shape[0]))
    step = max(1, _CHUNK_ELEMS // max(1, C.shape[0] * D))
    for lo in range(0, N, step):
        diff = X[lo:lo + step, None, :] - C[None, :, :]
        out[lo:lo + step] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _nearest(X: np.ndarray, C: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    d = squared_distances(X, C)
    lab = np.argmin(d, axis=1)  # first minimum -> smallest index on ties
    return lab, d[np.arange(X.shape[0]), lab]


@dataclass
class Codebook:
    centroids: np.ndarray
    pca: Optional[PcaTransform] = None
    inertia_history: List[float] = field(default_factory=list)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.K < 2:
            raise QuantizerError("a codebook needs at least 2 centroids")

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    @property
    def input_dim(self) -> int:
        return self.pca.in_dim if self.pca is not None else self.dim


@dataclass
class PseudoLabelSequence:
    labels: np.ndarray
    source_iteration: int = 0

    def __len__(self) -> int:
        return len(self.labels)


def kmeans_plusplus(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    N = X.shape[0]
    centers = [X[rng.integers(N)]]
    d2 = squared_distances(X, centers[0][None])[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(N)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, N - 1)
        centers.append(X[idx])
        d2 = np.minimum(d2, squared_distances(X, X[idx][None])[:, 0])
    return np.array(centers)


def kmeans_fit(points: np.ndarray, K: int, max_iters: int = 100, rel_tol: float = 1e-4,
               seed: int = 0, minibatch: Optional[int] = None) -> Codebook:
    """k-means++ seeding followed by Lloyd (or mini-batch) iterations.

    ``inertia_history[0]`` is the inertia of the seeding; each Lloyd entry is
    the inertia after one assign/update round. Empty clusters are moved to
    the point currently farthest from its centroid.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise QuantizerError("points must be an N x D matrix")
    N = X.shape[0]
    if N < K:
        raise QuantizerError(f"need at least K={K} points, got {N}")
    if not np.all(np.isfinite(X)):
        raise QuantizerError("points contain non-finite values")
    rng = np.random.default_rng(seed)
    C = kmeans_plusplus(X, K, rng)
    if minibatch:
        return _minibatch(X, C, max_iters, minibatch, rng)

    lab, d = _nearest(X, C)
    history = [float(d.sum())]
    for _ in range(max_iters):
        newC = C.copy()
        counts = np.bincount(lab, minlength=K)
        sums = np.zeros_like(C)
        np.add.at(sums, lab, X)
        filled = counts > 0
        newC[filled] = sums[filled] / counts[filled, None]
        empty = np.flatnonzero(~filled)
        if empty.size:
            far = np.argsort(-d, kind="stable")[: empty.size]
            newC[empty] = X[far]
        new_lab, new_d = _nearest(X, newC)
        inertia = float(new_d.sum())
        prev = history[-1]
        if inertia > prev:
            # rounding-level uptick: keep the previous solution
            break
        C, lab, d = newC, new_lab, new_d
        history.append(inertia)
        if prev == 0 or (prev - inertia) / prev < rel_tol:
            break
    return Codebook(C, None, history)


def _minibatch(X, C, iters, batch, rng) -> Codebook:
    """Sculley-style updates; history is tracked on one fixed evaluation batch."""
    N, K = X.shape[0], C.shape[0]
    batch = min(batch, N)
    eval_idx = rng.choice(N, batch, replace=False)
    counts = np.zeros(K)
    history = [float(_nearest(X[eval_idx], C)[1].sum())]
    for _ in range(iters):
        M = X[rng.choice(N, batch, replace=False)]
        lab, _ = _nearest(M, C)
        for j, x in zip(lab, M):
            counts[j] += 1
            C[j] += (x - C[j]) / counts[j]
        history.append(float(_nearest(X[eval_idx], C)[1].sum()))
    return Codebook(C, None, history)


def assign(cb: Codebook, f, source_iteration: int = 0) -> PseudoLabelSequence:
    """Nearest centroid per frame (PCA applied first when the codebook has one)."""
    x = f.frames if isinstance(f, FeatureSequence) else np.asarray(f)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cb.input_dim:
        raise QuantizerError(f"feature dim {x.shape[-1]} does not match codebook input dim {cb.input_dim}")
    if cb.pca is not None:
        x = cb.pca.project(x)
    if x.shape[0] == 0:
        return PseudoLabelSequence(np.zeros(0, dtype=np.int64), source_iteration)
    lab, _ = _nearest(x, cb.centroids)
    return PseudoLabelSequence(lab.astype(np.int64), source_iteration)


# --------------------------------------------------------------------------
# persistence


def save_codebook(cb: Codebook, path) -> str:
    tensors = {"centroids": cb.centroids}
    if cb.pca is not None:
        tensors["pca.mean"] = cb.pca.mean
        tensors["pca.components"] = cb.pca.components
        tensors["pca.explained_variance"] = cb.pca.explained_variance
    meta = {"kind": "codebook", "K": cb.K, "inertia_history": cb.inertia_history}
    return container.write(path, meta, tensors)


def load_codebook(path) -> Codebook:
    meta, t = container.read(path)
    if meta.get("kind") != "codebook":
        raise container.FormatError(f"{path}: not a codebook")
    pca = None
    if "pca.components" in t:
        pca = PcaTransform(t["pca.mean"], t["pca.components"], t["pca.explained_variance"])
    return Codebook(t["centroids"], pca, list(meta["inertia_history"]))


def save_labels(seq: PseudoLabelSequence, utt_id: str, path) -> str:
    meta = {"kind": "labels", "utt_id": utt_id, "source_iteration": seq.source_iteration}
    return container.write(path, meta, {"labels": seq.labels.astype(np.int64)})


def load_labels(path) -> Tuple[str, PseudoLabelSequence]:
    meta, t = container.read(path)
    if meta.get("kind") != "labels":
        raise container.FormatError(f"{path}: not a label file")
    return meta["utt_id"], PseudoLabelSequence(t["labels"], meta["source_iteration"])


# --------------------------------------------------------------------------
# iteration-specific targets


@dataclass(frozen=True)
class TargetOptions:
    K: int = 1000
    use_pca: bool = False
    d_prime: int = 512
    sample_fraction: float = 0.3
    layer: int = 9  # 1-based Transformer layer used at i == 2
    seed: int = 0
    max_iters: int = 100
    rel_tol: float = 1e-4
    minibatch: Optional[int] = None
    mfcc: MfccConfig = field(default_factory=MfccConfig)

    def __post_init__(self):
        if not 0 < self.sample_fraction <= 1:
            raise QuantizerError("sample_fraction must lie in (0, 1]")


def mfcc_frames_for_encoder(wave, cnn: CnnSpec, cfg: MfccConfig = MfccConfig()) -> FeatureSequence:
    """MFCC(+deltas) resampled onto the encoder frame grid.

    Encoder frame ``t`` is matched to the MFCC frame whose window centre is
    nearest; with default settings that is exactly frame ``2t`` (identical
    400-sample windows).
    """
    feats = mfcc_features(wave, cfg)
    T = cnn_output_length(len(wave), cnn)
    win = cfg.window_samples(wave.sample_rate)
    hop = cfg.hop_samples(wave.sample_rate)
    centre = np.arange(T) * cnn.total_stride + cnn.receptive_field / 2.0
    j = np.floor((centre - win / 2.0) / hop + 0.5).astype(int)
    j = np.clip(j, 0, feats.num_frames - 1)
    return FeatureSequence(feats.frames[j], wave.sample_rate / cnn.total_stride, "mfcc")


@torch.no_grad()
def encoder_frames(model: Tuple[Params, EncoderConfig], utts: Sequence, layer: int,
                   batch: int = 16) -> Dict[str, np.ndarray]:
    """Eval-mode layer outputs per utterance (equal-length utterances batched)."""
    params, cfg = model
    groups: Dict[int, list] = {}
    for u in utts:
        groups.setdefault(len(u.wave), []).append(u)
    out = {}
    for n in sorted(groups):
        members = sorted(groups[n], key=lambda u: u.utt_id)
        for lo in range(0, len(members), batch):
            chunk = members[lo:lo + batch]
            waves = torch.from_numpy(np.stack([u.wave.samples for u in chunk]))
            res = forward_batch(params, cfg, waves)
            h = res.layer_outputs[layer].to(torch.float64).numpy()
            for u, x in zip(chunk, h):
                out[u.utt_id] = x
    return out


def _feature_source(i: int, prev_model, opts: TargetOptions) -> Tuple[str, Optional[int]]:
    if i < 1:
        raise QuantizerError("iteration index must be >= 1")
    if i == 1:
        return "mfcc", None
    if prev_model is None:
        raise QuantizerError(f"iteration {i} needs the previous model")
    depth = prev_model[1].depth
    if i == 2:
        if opts.layer > depth:
            raise QuantizerError(
                f"layer {opts.layer} requested but the teacher has depth {depth}; "
                f"needs depth >= {opts.layer}"
            )
        return "layer", opts.layer
    return "layer", depth


def targets_for_iteration(i: int, prev_model: Optional[Tuple[Params, EncoderConfig]], data: Sequence,
                          opts: TargetOptions = TargetOptions(),
                          cnn: CnnSpec = CnnSpec()) -> Tuple[Codebook, Dict[str, PseudoLabelSequence]]:
    """Fit a codebook on a seeded frame sample and label every utterance.

    Features: MFCC at i == 1, Transformer layer ``opts.layer`` of the previous
    model at i == 2, its last layer from i == 3 on. ``cnn`` fixes the label
    frame grid (the student's front-end).
    """
    kind, layer = _feature_source(i, prev_model, opts)
    data = sorted(data, key=lambda u: u.utt_id)
    if kind == "mfcc":
        feats = {u.utt_id: mfcc_frames_for_encoder(u.wave, cnn, opts.mfcc).frames for u in data}
    else:
        t_cnn = prev_model[1].cnn
        if (t_cnn.strides, t_cnn.kernels) != (cnn.strides, cnn.kernels):
            # frame grids differ; labels would be misaligned
            raise QuantizerError("teacher and student CNN front-ends differ in strides or kernels")
        feats = encoder_frames(prev_model, data, layer)

    rng = np.random.default_rng(opts.seed)
    all_frames = np.concatenate([feats[u.utt_id] for u in data], axis=0)
    n_sample = max(opts.K, int(round(opts.sample_fraction * all_frames.shape[0])))
    n_sample = min(n_sample, all_frames.shape[0])
    pick = np.sort(rng.choice(all_frames.shape[0], n_sample, replace=False))
    sample = all_frames[pick]

    pca = None
    if opts.use_pca:
        pca = fit_pca(sample, opts.d_prime)
        sample = pca.project(sample)
    cb = kmeans_fit(sample, opts.K, opts.max_iters, opts.rel_tol, seed=opts.seed, minibatch=opts.minibatch)
    cb.pca = pca
    labels = {u.utt_id: assign(cb, feats[u.utt_id], source_iteration=i - 1) for u in data}
    log.info("iteration %d targets: %s features, %d sampled frames, K=%d, inertia %.4g",
             i, kind if layer is None else f"layer {layer}", n_sample, opts.K, cb.inertia_history[-1])
    return cb, labels
