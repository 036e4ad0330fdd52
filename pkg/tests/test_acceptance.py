"""Acceptance criteria 1-12. Each test records one PASS/FAIL line that is
printed in the pytest terminal summary."""

import contextlib
import math
import shutil
import time

import numpy as np
import pytest
import torch

from conftest import CRITERIA
from harness_ssl import container
from harness_ssl.audio import FeatureSequence
from harness_ssl.corpus import synth_tone_corpus
from harness_ssl.diffcore import AdamHParams, finite_diff_check
from harness_ssl.distill import (
    DistillError,
    IterationSpec,
    Schedule,
    blocked_average_init,
    compare_supervision,
    compress_config,
    run_iteration,
    run_schedule,
)
from harness_ssl.downstream import ProbeConfig, probe_eval, probe_train, wer
from harness_ssl.encoder import (
    PRESETS,
    PUBLISHED_DELTA_S,
    PUBLISHED_PARAMS_M,
    CnnSpec,
    ConfigError,
    cnn_features,
    cnn_output_length,
    count_params,
    forward_batch,
    init_params,
    layer_param_names,
    load_checkpoint,
    params_to,
    save_checkpoint,
    toy_config,
)
from harness_ssl.pretrain import (
    LossWeights,
    MaskSpec,
    TrainConfig,
    batch_loss,
    expected_mask_fraction,
    masked_prediction_loss,
    read_report_csv,
    sample_mask,
)
from harness_ssl.quantizer import Codebook, TargetOptions, assign, fit_pca, kmeans_fit
from oracles import conv_stack_length, expected_overlap_fraction, softmax_ce


@contextlib.contextmanager
def criterion(n, title, budget_s=None):
    """Record and print one PASS/FAIL line; the wall-time budget is part of the check."""
    notes = []
    start = time.perf_counter()
    try:
        yield notes
        elapsed = time.perf_counter() - start
        if budget_s is not None:
            assert elapsed < budget_s, f"took {elapsed:.1f}s, budget {budget_s}s"
    except BaseException as e:
        line = f"criterion {n:>2} FAIL  {title}: {type(e).__name__}: {e}".splitlines()[0]
        CRITERIA[n] = line
        print(line)
        raise
    detail = "; ".join(notes)
    line = f"criterion {n:>2} PASS  {title} ({time.perf_counter() - start:.1f}s){': ' + detail if detail else ''}"
    CRITERIA[n] = line
    print(line)


def test_01_gradient_correctness():
    with criterion(1, "finite-difference gradient check of the full loss", 60) as notes:
        cfg = toy_config(num_clusters=8, depth=2, emb_d=16, h_attn=2)
        params = params_to(init_params(cfg, seed=0), torch.float64)
        rng = np.random.default_rng(0)
        n = 8000
        wave = torch.from_numpy(rng.uniform(-0.5, 0.5, (1, n)))
        T = cnn_output_length(n, cfg.cnn)
        mask = torch.zeros(1, T, dtype=torch.bool)
        mask[0, sample_mask(T, MaskSpec(), rng)] = True
        labels = torch.from_numpy(rng.integers(0, 8, (1, T)))

        def loss_fn(p):
            out = forward_batch(p, cfg, wave, mask)
            return batch_loss(out.logits, labels, mask, LossWeights())["loss"]

        err = finite_diff_check(loss_fn, params, epsilon=1e-5, coords_per_param=100)
        notes.append(f"max relative error {err:.2e}")
        assert err < 1e-4


def test_02_cnn_geometry():
    with criterion(2, "CNN output length", 5) as notes:
        assert cnn_output_length(16000, CnnSpec()) == 49
        assert conv_stack_length(16000) == 49
        cfg = toy_config(channels=4)
        assert (cfg.cnn.strides, cfg.cnn.kernels) == (CnnSpec().strides, CnnSpec().kernels)
        params = init_params(cfg, seed=0)
        lengths = np.random.default_rng(0).integers(400, 48000, 50)
        with torch.no_grad():
            for n in lengths:
                executed = cnn_features(params, cfg, torch.zeros(1, int(n))).shape[1]
                assert executed == cnn_output_length(int(n)) == conv_stack_length(int(n)), n
        notes.append("49 frames per second; 50 random lengths agree")


def test_03_parameter_accounting():
    with criterion(3, "parameter accounting", 1) as notes:
        n = count_params(PRESETS["H-L"])
        notes.append(f"H-L {n / 1e6:.2f}M vs published {PUBLISHED_PARAMS_M['H-L']}M")
        for name in ("H-S", "H-ST"):
            if name in PRESETS:
                k = count_params(PRESETS[name])
                ds = 1 - k / n
                pub = PUBLISHED_PARAMS_M.get(name)
                notes.append(f"{name} {k / 1e6:.2f}M (published {pub}M), delta_s {ds:.3f} "
                             f"(published {PUBLISHED_DELTA_S.get(name)})")
        assert abs(n - 316e6) / 316e6 <= 0.03


def _blobs(rng, n=2000, sigma=0.05):
    centers = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], float)
    y = rng.integers(0, 4, n)
    return centers[y] + sigma * rng.standard_normal((n, 2)), y


def test_04_kmeans():
    with criterion(4, "k-means oracle", 30) as notes:
        X, y = _blobs(np.random.default_rng(0))
        pred = assign(kmeans_fit(X, 4, seed=0), X).labels
        purity = sum(np.bincount(y[pred == c]).max() for c in range(4) if np.any(pred == c)) / len(y)
        notes.append(f"purity {purity:.4f}")
        assert purity > 0.99
        for seed in range(100):
            r = np.random.default_rng(seed)
            D = int(r.integers(1, 6))
            pts = r.standard_normal((int(r.integers(20, 300)), D)) * r.uniform(0.1, 5)
            h = kmeans_fit(pts, int(r.integers(2, 9)), seed=seed).inertia_history
            assert all(b <= a for a, b in zip(h, h[1:])), seed
        notes.append("inertia non-increasing on 100 datasets")


def test_05_pca():
    with criterion(5, "PCA oracle", 30) as notes:
        worst = 0.0
        for seed in range(20):
            r = np.random.default_rng(seed)
            N, D = int(r.integers(30, 200)), int(r.integers(2, 12))
            X = r.standard_normal((N, D)) @ r.standard_normal((D, D)) + r.standard_normal(D)
            full = fit_pca(X, D)
            for d in range(1, D + 1):
                t = fit_pca(X, d)
                mse = np.mean(np.sum((X - t.reconstruct(t.project(X))) ** 2, axis=1))
                # explained_variance uses the unbiased estimator; per-sample error is the 1/N version
                discarded = full.explained_variance[d:].sum() * (N - 1) / N
                worst = max(worst, abs(mse - discarded))
            assert np.max(np.abs(full.reconstruct(full.project(X)) - X)) < 1e-6
        notes.append(f"max |mse - discarded variance| {worst:.1e}")
        assert worst < 1e-6
        for seed in range(10):
            r = np.random.default_rng(100 + seed)
            D = int(r.integers(2, 10))
            X = r.standard_normal((300, D))
            C = r.standard_normal((int(r.integers(2, 20)), D))
            t = fit_pca(X, D)
            raw = assign(Codebook(C), X).labels
            rotated = assign(Codebook(t.project(C), t), X).labels
            np.testing.assert_array_equal(raw, rotated)
        notes.append("full-rank PCA labels identical on 10 codebooks")


def test_06_mask_statistics():
    with criterion(6, "mask statistics", 20) as notes:
        for T, p, span in ((1000, 0.8, 10), (500, 0.65, 10), (200, 0.8, 5)):
            spec = MaskSpec(p, span)
            fracs = [sample_mask(T, spec, np.random.default_rng(s)).size / T for s in range(1000)]
            expected = expected_overlap_fraction(T, p, span)
            assert expected_mask_fraction(T, spec) == pytest.approx(expected, abs=1e-12)
            notes.append(f"T={T} p={p} span={span}: {np.mean(fracs):.4f} vs {expected:.4f}")
            assert abs(np.mean(fracs) - expected) <= 0.05


def test_07_blocked_averaging(small_corpus):
    with criterion(7, "blocked averaging", 10) as notes:
        cfg = toy_config(depth=4, emb_d=8, h_attn=2, channels=4)
        params = init_params(cfg, seed=0)
        same = blocked_average_init((params, cfg), cfg)
        assert all(torch.equal(same[k], params[k]) for k in params)

        deep = cfg.replace(depth=24)
        p24 = init_params(deep, seed=0)
        for j in range(24):
            for name in layer_param_names(j):
                p24[name] = torch.full_like(p24[name], float(j))
        out = blocked_average_init((p24, deep), deep.replace(depth=4))
        for j in range(4):
            for name in layer_param_names(j):
                assert torch.all(out[name] == 6 * j + 2.5), name
        notes.append("24->4 layers give 6j+2.5 exactly")

        with pytest.raises(ConfigError):
            blocked_average_init((params, cfg), cfg.replace(depth=2, d_ffn=4))
        wide = toy_config(depth=2, emb_d=16, h_attn=2, channels=4)
        spec = IterationSpec(3, wide, "blocked_average", TargetOptions(K=8, layer=1),
                             TrainConfig(steps=1000))
        start = time.perf_counter()
        with pytest.raises(DistillError, match="random initialisation"):
            run_iteration(spec, (params, cfg), small_corpus)
        notes.append(f"width mismatch rejected in {time.perf_counter() - start:.3f}s")


def test_08_loss_values():
    with criterion(8, "loss values", 1) as notes:
        for K in (2, 8, 100):
            w = LossWeights(1.0, 0.1)
            out = masked_prediction_loss(torch.zeros(20, K, dtype=torch.float64), np.arange(20) % K,
                                         [0, 3, 7], w)
            assert abs(out["loss"].item() - (w.w_masked + w.w_unmasked) * math.log(K)) <= 1e-9
        logits = torch.tensor([[2.0, 0.0], [0.0, 2.0]], dtype=torch.float64)
        val = masked_prediction_loss(logits, [0, 1], [0], LossWeights(1.0, 1.0))["loss"].item()
        oracle = softmax_ce([2.0, 0.0], 0) + softmax_ce([0.0, 2.0], 1)
        notes.append(f"T=2 example {val:.6f}")
        assert abs(val - oracle) <= 1e-6 and abs(val - 0.2538) <= 1e-4


# --------------------------------------------------------------------------
# toy schedule shared by criteria 9 and 10

TOY = toy_config(num_clusters=8, depth=4, emb_d=32, h_attn=4, channels=16, pos_conv_kernel=32)
TOY_ADAM = AdamHParams(lr=3e-3)


def _toy_schedule():
    student, _ = compress_config(TOY, depth=2)
    return Schedule([
        IterationSpec(1, TOY, targets=TargetOptions(K=8),
                      train=TrainConfig(steps=1000, adam=TOY_ADAM, log_every=50)),
        IterationSpec(2, TOY, targets=TargetOptions(K=8, layer=3),
                      train=TrainConfig(steps=1000, adam=TOY_ADAM, log_every=50)),
        IterationSpec(3, student, "blocked_average", TargetOptions(K=8, use_pca=True, d_prime=16),
                      train=TrainConfig(steps=600, adam=TOY_ADAM, log_every=50)),
    ])


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    workdir = tmp_path_factory.mktemp("toy_schedule")
    corpus = synth_tone_corpus(125, 6, 0.4, seed=0)
    start = time.perf_counter()
    reports = run_schedule(_toy_schedule(), corpus, workdir)
    first = {i: (workdir / f"iter{i}" / "model.ckpt").read_bytes() for i in (1, 2, 3)}
    shutil.rmtree(workdir / "iter2")
    resumed = run_schedule(_toy_schedule(), corpus, workdir)
    elapsed = time.perf_counter() - start
    second = {i: (workdir / f"iter{i}" / "model.ckpt").read_bytes() for i in (1, 2, 3)}
    return dict(workdir=workdir, corpus=corpus, reports=reports, resumed=resumed,
                first=first, second=second, elapsed=elapsed)


@pytest.mark.slow
def test_09_end_to_end_schedule(toy_run):
    with criterion(9, "end-to-end toy schedule") as notes:
        audio = sum(u.wave.duration for u in toy_run["corpus"])
        reps = toy_run["reports"]
        notes.append(f"{audio / 60:.1f} min audio, {toy_run['elapsed']:.0f}s including resume")
        notes.append("masked_acc " + ", ".join(f"i={r.index} {r.masked_acc:.3f}" for r in reps))
        assert audio == pytest.approx(300, rel=0.1)
        assert toy_run["elapsed"] < 15 * 60
        assert reps[0].masked_acc > 0.9
        assert reps[2].delta_s > 0
        assert [r.skipped for r in toy_run["resumed"]] == [True, False, False]
        for i in (1, 2, 3):
            assert toy_run["first"][i] == toy_run["second"][i], f"iteration {i} checkpoint differs"
        notes.append("checkpoints bitwise identical after resume")


@pytest.mark.slow
def test_10_pca_supervision_curves(toy_run):
    with criterion(10, "PCA vs raw supervision curves") as notes:
        workdir = toy_run["workdir"]
        spec = _toy_schedule().iterations[2]
        teacher = load_checkpoint(workdir / "iter2" / "model.ckpt")
        raw, pca, rows = compare_supervision(spec, teacher, toy_run["corpus"], workdir,
                                             toy_run["resumed"][1].checkpoint_hash)
        csv_rows = read_report_csv(workdir / "supervision_curves.csv")
        raw_grid = [r["step"] for r in read_report_csv(workdir / "iter3_raw" / "train.csv")]
        pca_grid = [r["step"] for r in read_report_csv(workdir / "iter3_pca" / "train.csv")]
        assert raw_grid == pca_grid == [r["step"] for r in csv_rows] and len(csv_rows) == len(rows) > 1
        for name in ("supervision_loss.png", "supervision_masked_acc.png"):
            assert (workdir / name).stat().st_size > 0
        notes.append(f"{len(rows)} shared steps; final loss raw {raw.final_loss:.3f}, PCA {pca.final_loss:.3f}")


def _separable(n, rng, dim=32):
    out = []
    for i in range(n):
        y = i % 2
        x = rng.normal(size=(int(rng.integers(20, 80)), dim))
        x[:, :4] += 1.5 if y else -1.5
        out.append((FeatureSequence(x, 50.0, "layer_average"), "ab"[y]))
    return out


@pytest.mark.slow
def test_11_probe_and_metrics():
    with criterion(11, "probe and WER", 300) as notes:
        data = _separable(40, np.random.default_rng(0))
        cfg = ProbeConfig(n_classes=2)
        assert (cfg.batch, cfg.steps) == (4, 10000)
        acc = probe_eval(probe_train(data, cfg, seed=0), data)
        notes.append(f"train accuracy {acc:.3f} after {cfg.steps} steps")
        assert acc == 1.0
        assert wer("a b c", "a b c") == 0.0
        assert wer("a b c", "a x c") == pytest.approx(1 / 3, abs=1e-15)
        assert wer("a", "b c") == 2.0


def test_12_persistence(tmp_path):
    with criterion(12, "checkpoint persistence", 60) as notes:
        rng = np.random.default_rng(0)
        blobs = []
        for i in range(200):
            heads = int(rng.choice([1, 2, 4]))
            cfg = toy_config(num_clusters=int(rng.integers(2, 12)), depth=int(rng.integers(1, 4)),
                             emb_d=4 * heads * int(rng.integers(1, 3)), h_attn=heads, channels=4)
            params = init_params(cfg, seed=i)
            path = tmp_path / f"{i}.ckpt"
            h1 = save_checkpoint(params, cfg, path)
            p2, cfg2 = load_checkpoint(path)
            assert cfg2 == cfg and list(p2) == list(params)
            assert all(p2[k].dtype == params[k].dtype and torch.equal(p2[k], params[k]) for k in params)
            assert save_checkpoint(p2, cfg2, tmp_path / "again.ckpt") == h1
            assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()
            if i % 20 == 0:
                blobs.append(path.read_bytes())
        notes.append("200 round trips bitwise identical")
        trials = 0
        target = tmp_path / "fuzz.ckpt"
        for blob in blobs:
            for _ in range(150):
                bad = bytearray(blob)
                kind = rng.integers(3)
                if kind == 0:
                    pos = int(rng.integers(len(bad)))
                    bad[pos] ^= int(rng.integers(1, 256))
                elif kind == 1:
                    for pos in rng.choice(len(bad), int(rng.integers(2, 9)), replace=False):
                        bad[pos] = int(rng.integers(256)) ^ 0x5A if bad[pos] != 0x5A else 0
                else:
                    bad = bad[: int(rng.integers(len(bad)))]
                if bytes(bad) == blob:
                    continue
                target.write_bytes(bytes(bad))
                with pytest.raises(container.ChecksumError):
                    load_checkpoint(target)
                trials += 1
        notes.append(f"{trials} corrupted files all raised a checksum error")
