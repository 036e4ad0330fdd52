import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from harness_ssl.diffcore import AdamHParams, finite_diff_check, gradients
from harness_ssl.encoder import cnn_output_length, forward_batch, init_params, params_to, toy_config
from harness_ssl.pretrain import (
    LossWeights,
    MaskSpec,
    TrainConfig,
    TrainingError,
    batch_loss,
    evaluate,
    expected_mask_fraction,
    masked_prediction_loss,
    read_report_csv,
    sample_mask,
    train,
)
from harness_ssl.quantizer import TargetOptions, targets_for_iteration
from oracles import expected_overlap_fraction, softmax_ce


class TestMask:
    def test_p_zero(self, rng):
        for _ in range(20):
            assert sample_mask(100, MaskSpec(0.0, 10), rng).size == 0

    def test_p_one_span_one(self, rng):
        for T in (1, 7, 50):
            assert sample_mask(T, MaskSpec(1.0, 1), rng).tolist() == list(range(T))

    def test_short_sequence(self, rng):
        m = sample_mask(4, MaskSpec(1.0, 10), rng)
        assert m.tolist() == [0, 1, 2, 3]

    def test_rejects_empty(self, rng):
        with pytest.raises(ValueError):
            sample_mask(0, MaskSpec(), rng)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            MaskSpec(1.5, 10)
        with pytest.raises(ValueError):
            MaskSpec(0.5, 0)

    @given(st.integers(1, 400), st.floats(0, 1), st.integers(1, 20), st.integers(0, 1000))
    @settings(max_examples=100, deadline=None)
    def test_spans_and_bounds(self, T, p, span, seed):
        rng = np.random.default_rng(seed)
        u_rng = np.random.default_rng(seed)
        m = sample_mask(T, MaskSpec(p, span), rng)
        n = math.floor(p * T / span + u_rng.random())
        assert np.all(np.diff(m) > 0) and (m.size == 0 or (m[0] >= 0 and m[-1] < T))
        assert m.size <= min(T, n * span)

    def test_monte_carlo_fraction(self):
        spec = MaskSpec(0.8, 10)
        rng = np.random.default_rng(0)
        frac = np.mean([sample_mask(1000, spec, rng).size / 1000 for _ in range(1000)])
        assert expected_mask_fraction(1000, spec) == pytest.approx(expected_overlap_fraction(1000, 0.8, 10))
        assert abs(frac - expected_overlap_fraction(1000, 0.8, 10)) < 0.05


class TestLoss:
    def test_uniform_logits(self):
        K = 7
        out = masked_prediction_loss(torch.zeros(10, K, dtype=torch.float64), np.arange(10) % K, [1, 4],
                                     LossWeights(1.0, 0.3))
        assert out["loss"].item() == pytest.approx(1.3 * math.log(K), abs=1e-9)

    def test_hand_example(self):
        logits = torch.tensor([[2.0, 0.0], [0.0, 2.0]], dtype=torch.float64)
        out = masked_prediction_loss(logits, [0, 1], [0], LossWeights(1.0, 1.0))
        expected = softmax_ce([2.0, 0.0], 0) + softmax_ce([0.0, 2.0], 1)
        assert expected == pytest.approx(2 * math.log(1 + math.exp(-2)), abs=1e-12)
        assert out["loss"].item() == pytest.approx(expected, abs=1e-6)
        assert out["loss"].item() == pytest.approx(0.2538, abs=1e-4)
        assert out["masked_acc"] == 1.0 and out["unmasked_acc"] == 1.0

    def test_empty_region_contributes_zero(self):
        logits = torch.randn(5, 3, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        all_masked = masked_prediction_loss(logits, [0, 1, 2, 0, 1], range(5), LossWeights(1.0, 0.5))
        ce = torch.nn.functional.cross_entropy(logits, torch.tensor([0, 1, 2, 0, 1]))
        assert all_masked["loss"].item() == pytest.approx(ce.item(), abs=1e-12)
        assert math.isnan(all_masked["unmasked_acc"])

    def test_zero_unmasked_weight(self):
        logits = torch.randn(6, 4, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
        mask = [0, 2]
        a = masked_prediction_loss(logits, [0, 1, 2, 3, 0, 1], mask, LossWeights(1.0, 0.0))["loss"]
        changed = logits.clone()
        changed[[1, 3, 4, 5]] += torch.randn(4, 4, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
        b = masked_prediction_loss(changed, [0, 1, 2, 3, 0, 1], mask, LossWeights(1.0, 0.0))["loss"]
        assert a.item() == b.item()
        g = gradients(lambda p: masked_prediction_loss(p["z"], [0, 1, 2, 3, 0, 1], mask,
                                                       LossWeights(1.0, 0.0))["loss"], {"z": logits})["z"]
        assert torch.all(g[[1, 3, 4, 5]] == 0)

    def test_errors(self):
        with pytest.raises(ValueError):
            masked_prediction_loss(torch.zeros(0, 3), [], [])
        with pytest.raises(ValueError, match="out of range"):
            masked_prediction_loss(torch.zeros(2, 3), [0, 3], [0])
        with pytest.raises(ValueError):
            LossWeights(0.0, 0.0)

    def test_batch_order_invariant(self):
        g = torch.Generator().manual_seed(0)
        logits = torch.randn(3, 6, 4, generator=g, dtype=torch.float64)
        labels = torch.randint(0, 4, (3, 6), generator=g)
        masks = torch.rand(3, 6, generator=g) > 0.5
        a = batch_loss(logits, labels, masks, LossWeights())["loss"]
        perm = [2, 0, 1]
        b = batch_loss(logits[perm], labels[perm], masks[perm], LossWeights())["loss"]
        assert a.item() == pytest.approx(b.item(), abs=1e-12)


def test_full_loss_gradient_check_short_audio():
    cfg = toy_config(num_clusters=8, depth=2, emb_d=16, h_attn=2)
    params = params_to(init_params(cfg, seed=1), torch.float64)
    n = 1600
    wave = torch.from_numpy(np.random.default_rng(0).uniform(-0.5, 0.5, (1, n)))
    T = cnn_output_length(n, cfg.cnn)
    mask = torch.zeros(1, T, dtype=torch.bool)
    mask[0, 1] = True
    labels = torch.tensor([[i % 8 for i in range(T)]])

    def loss_fn(p):
        out = forward_batch(p, cfg, wave, mask)
        return batch_loss(out.logits, labels, mask, LossWeights())["loss"]

    assert finite_diff_check(loss_fn, params, epsilon=1e-5, coords_per_param=20) < 1e-4


@pytest.fixture(scope="module")
def labelled(small_corpus):
    _, labels = targets_for_iteration(1, None, small_corpus, TargetOptions(K=8))
    return labels


class TestTrain:
    def test_deterministic_and_one_step(self, small_corpus, labelled):
        cfg = toy_config(num_clusters=8, dropout=0.1)
        tc = TrainConfig(steps=3, batch_utterances=4, log_every=1)
        p1, r1 = train((init_params(cfg), cfg), labelled, small_corpus, tc)
        p2, r2 = train((init_params(cfg), cfg), labelled, small_corpus, tc)
        assert r1.rows == r2.rows and all(torch.equal(p1[k], p2[k]) for k in p1)
        _, r3 = train((init_params(cfg), cfg), labelled, small_corpus, TrainConfig(steps=1))
        assert r3.steps_taken == 1 and len(r3.rows) == 1

    def test_label_length_mismatch_names_utterance(self, small_corpus, labelled):
        cfg = toy_config(num_clusters=8)
        bad = dict(labelled)
        u = small_corpus[3].utt_id
        bad[u] = labelled[u].labels[:-1]
        with pytest.raises(TrainingError, match=u):
            train((init_params(cfg), cfg), bad, small_corpus, TrainConfig(steps=1))

    def test_label_outside_k(self, small_corpus, labelled):
        cfg = toy_config(num_clusters=4)
        with pytest.raises(TrainingError, match="outside"):
            train((init_params(cfg), cfg), labelled, small_corpus, TrainConfig(steps=1))

    def test_non_finite_aborts(self, small_corpus, labelled):
        cfg = toy_config(num_clusters=8)
        params = init_params(cfg)
        params["feat_proj.weight"][0, 0] = float("nan")
        with pytest.raises(TrainingError, match="step 1"):
            train((params, cfg), labelled, small_corpus, TrainConfig(steps=2))

    def test_report_csv(self, tmp_path, small_corpus, labelled):
        cfg = toy_config(num_clusters=8)
        _, rep = train((init_params(cfg), cfg), labelled, small_corpus, TrainConfig(steps=4, log_every=2))
        rep.write_csv(tmp_path / "r.csv")
        assert (tmp_path / "r.csv").read_text().splitlines()[0] == "step,loss,masked_acc,unmasked_acc,lr"
        rows = read_report_csv(tmp_path / "r.csv")
        assert [r["step"] for r in rows] == [2, 4]

    def test_checkpoints_written(self, tmp_path, small_corpus, labelled):
        cfg = toy_config(num_clusters=8)
        train((init_params(cfg), cfg), labelled, small_corpus, TrainConfig(steps=4, checkpoint_every=2),
              checkpoint_dir=tmp_path)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["step2.ckpt", "step4.ckpt"]

    def test_tiny_model_memorises(self, small_corpus, labelled):
        # budget tuned once: 8 utterances, fixed full batch, 1500 of the allowed 2000 steps
        cfg = toy_config(num_clusters=8, depth=2, emb_d=16, h_attn=2)
        tc = TrainConfig(steps=1500, batch_utterances=8, adam=AdamHParams(lr=3e-3), log_every=250)
        params, rep = train((init_params(cfg), cfg), labelled, small_corpus, tc)
        assert rep.final["masked_acc"] > 0.9
        ev = evaluate((params, cfg), labelled, small_corpus)
        assert ev["masked_acc"] > 0.8
