"""Independent reference computations used by the tests.

Nothing here imports the package; each oracle re-derives its value from
first principles so a shared bug cannot make both sides agree.
"""

import math

import numpy as np

DEFAULT_STRIDES = (5, 2, 2, 2, 2, 2, 2)
DEFAULT_KERNELS = (10, 3, 3, 3, 3, 2, 2)


def conv_stack_length(n, kernels=DEFAULT_KERNELS, strides=DEFAULT_STRIDES):
    """Output length by literally sliding each window."""
    for k, s in zip(kernels, strides):
        starts = range(0, n - k + 1, s)
        n = len(starts)
        if n == 0:
            return 0
    return n


def encoder_scalar_audit(depth, emb, ffn, clusters, proj, channels=512, pos_kernel=128,
                         pos_groups=16, n_cnn=7, kernels=DEFAULT_KERNELS, cosine=True):
    """Hand-listed shape products for the encoder layout (attention key has no bias)."""
    total = 0
    c_in = 1
    for i in range(n_cnn):
        total += channels * c_in * kernels[i]
        c_in = channels
    total += 2 * channels            # group norm on conv 0
    total += 2 * channels            # feature layer norm
    total += channels * emb + emb    # feature projection
    total += emb                     # mask embedding
    total += emb * (emb // pos_groups) * pos_kernel + emb
    per_layer = (
        2 * emb                      # ln1
        + emb * emb + emb            # q
        + emb * emb                  # k (no bias)
        + emb * emb + emb            # v
        + emb * emb + emb            # o
        + 2 * emb                    # ln2
        + emb * ffn + ffn            # ffn in
        + ffn * emb + emb            # ffn out
    )
    total += depth * per_layer
    total += 2 * emb                 # final layer norm
    total += emb * proj + proj       # final projection
    total += clusters * proj if cosine else clusters * proj + clusters
    return total


def mel_frames(n, window=400, hop=160):
    return (n - window) // hop + 1


def edit_table(ref, hyp):
    """Full Levenshtein DP table (rows: ref prefix, cols: hyp prefix)."""
    d = [[0] * (len(hyp) + 1) for _ in range(len(ref) + 1)]
    for i in range(len(ref) + 1):
        d[i][0] = i
    for j in range(len(hyp) + 1):
        d[0][j] = j
    for i in range(1, len(ref) + 1):
        for j in range(1, len(hyp) + 1):
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]))
    return d


def brute_nearest(X, C):
    """Nearest centroid by an explicit scan; ties go to the first index."""
    out = []
    for x in X:
        best, best_d = 0, None
        for k, c in enumerate(C):
            d = float(sum((a - b) ** 2 for a, b in zip(x, c)))
            if best_d is None or d < best_d:
                best, best_d = k, d
        out.append(best)
    return np.array(out)


def pca_by_eigh(X):
    """Covariance eigen-decomposition, eigenvalues descending."""
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    return np.clip(vals[order], 0, None), vecs[:, order].T


def expected_overlap_fraction(T, p, span):
    n = math.floor(p * T / span)
    return 1 - (1 - span / (T - span + 1)) ** n


def softmax_ce(logits, label):
    m = max(logits)
    z = sum(math.exp(v - m) for v in logits)
    return -(logits[label] - m - math.log(z))


def central_difference(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = eps
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * eps)
    return g
