import logging

import numpy as np
import pytest

from oracles import pearson_scalar, quantize_scalar, ranking_loss_scalar
from vitq.model import SiteGroup, model_forward, site_groups
from vitq.search import (
    CalibrationError, LayerCalibration, SearchConfig, alternating_search, bias_correct, build_calibration,
    calibrate_model, calibrate_percentile, candidate_deltas, search_interval, site_objective,
)

FC = SiteGroup("layers.0.fc1", "linear", weight="layers.0.w1", bias="layers.0.b1", layer=0)
QK = SiteGroup("layers.0.qk", "qk", layer=0, ranking=True)


def random_linear(rng, n=16, tokens=5, d_in=8, d_out=6, bias=True):
    x = rng.standard_normal((n, tokens, d_in))
    w = rng.standard_normal((d_in, d_out)) / np.sqrt(d_in)
    b = rng.standard_normal(d_out) if bias else None
    return LayerCalibration(FC, x, w, b)


def grid(rng, shape, step, top):
    """Integers in [-top, top] times ``step`` with +top present."""
    k = rng.integers(-top, top + 1, shape)
    k.flat[0] = top
    return k * step


class TestConfig:
    @pytest.mark.parametrize("over", [{"alpha": 0.0}, {"alpha": 2.0}, {"candidates": 0},
                                      {"max_iter": 0}, {"gamma": -1.0}, {"convergence_tol": 0.0}])
    def test_invalid(self, over):
        with pytest.raises(ValueError):
            SearchConfig(**over)

    def test_defaults(self):
        c = SearchConfig()
        assert (c.alpha, c.beta, c.candidates, c.max_iter, c.gamma, c.theta) == (0.5, 1.2, 100, 20, 0.1, 0.2)


class TestCandidates:
    def test_window(self):
        c = candidate_deltas(2.0, SearchConfig())
        assert len(c) == 100
        assert c[0] == pytest.approx(1.0) and c[-1] == pytest.approx(2.4)
        assert np.allclose(np.diff(c), 1.4 / 99)

    def test_single(self):
        assert candidate_deltas(2.0, SearchConfig(candidates=1)) == [1.0]

    def test_single_search(self, rng):
        cal = random_linear(rng)
        step = search_interval(cal, "w", 0.1, 3.0, 8, SearchConfig(candidates=1))
        assert step.delta == pytest.approx(1.5)

    def test_bad_side(self, rng):
        with pytest.raises(ValueError):
            search_interval(random_linear(rng), "z", 0.1, 1.0, 8, SearchConfig(candidates=2))


class TestObjective:
    def test_gamma_zero_is_mean_pearson(self, rng):
        cal = LayerCalibration(QK, rng.standard_normal((3, 4, 6)), rng.standard_normal((3, 4, 6)), heads=2)
        out = cal.quantized_output(0.3, 0.3, 4)
        want = np.mean([pearson_scalar(a.ravel(), b.ravel()) for a, b in zip(cal.reference, out)])
        assert site_objective(cal, 0.3, 0.3, 4, SearchConfig(gamma=0.0)) == pytest.approx(want, abs=1e-9)

    def test_brute_force_two_samples(self, rng):
        n, r, d, h = 2, 4, 6, 2
        x, w = rng.standard_normal((n, r, d)), rng.standard_normal((n, r, d))
        cal = LayerCalibration(QK, x, w, heads=h)
        cfg = SearchConfig(gamma=0.1, theta=0.2)
        dx, dw, bits = 0.21, 0.17, 4
        xq = [[[quantize_scalar(np.float32(v), dx, bits) * dx for v in row] for row in s] for s in x]
        wq = [[[quantize_scalar(np.float32(v), dw, bits) * dw for v in row] for row in s] for s in w]
        dh = d // h
        pear, rank = [], []
        for s in range(n):
            ref, got = [], []
            for k in range(h):
                cols = range(k * dh, (k + 1) * dh)
                a = [[sum(float(np.float32(x[s][i][c])) * float(np.float32(w[s][j][c])) for c in cols)
                      for j in range(r)] for i in range(r)]
                ah = [[sum(xq[s][i][c] * wq[s][j][c] for c in cols) for j in range(r)] for i in range(r)]
                ref.append(a)
                got.append(ah)
            pear.append(pearson_scalar(np.ravel(ref), np.ravel(got)))
            rank.append(ranking_loss_scalar([row for m in ref for row in m], [row for m in got for row in m], 0.2))
        want = np.mean(pear) - 0.1 * np.mean(rank)
        assert site_objective(cal, dx, dw, bits, cfg) == pytest.approx(want, abs=1e-6)

    def test_lossless_is_one(self, rng):
        x = grid(rng, (6, 5, 8), 0.5, 7)
        w = grid(rng, (8, 6), 0.25, 7)
        cal = LayerCalibration(FC, x, w)
        assert site_objective(cal, 0.5, 0.25, 4, SearchConfig()) == pytest.approx(1.0, abs=1e-12)

    def test_lossless_ranking_group(self, rng):
        x = grid(rng, (3, 5, 4), 0.5, 7)
        w = grid(rng, (3, 5, 4), 0.5, 7)
        cal = LayerCalibration(QK, x, w, heads=2)
        assert site_objective(cal, 0.5, 0.5, 4, SearchConfig(theta=0.0)) == pytest.approx(1.0, abs=1e-12)

    def test_empty(self):
        with pytest.raises(CalibrationError):
            LayerCalibration(FC, np.zeros((0, 3, 4)), np.zeros((4, 2)))


class TestSearchInterval:
    def test_constructed_fixed_point(self, rng):
        # weights on a 0.25 grid spanning [-6, 6] steps; max-init gives 6/7 of that,
        # and 7/6 of max-init is the second of four candidates
        star = 0.25
        w = grid(rng, (8, 6), star, 6)
        w.flat[1] = -6 * star
        w[:7, 0] = np.arange(-3, 4) * star  # every level present
        x = grid(rng, (10, 5, 8), 0.5, 7)
        cal = LayerCalibration(FC, x, w)
        d0 = 6 * star / 7
        cfg = SearchConfig(alpha=1.0, beta=1.5, candidates=4)
        step = search_interval(cal, "w", 0.5, d0, 4, cfg)
        assert step.delta == pytest.approx(star, rel=1e-12)
        assert step.objective == pytest.approx(1.0, abs=1e-9)
        assert step.objectives.index(max(step.objectives)) == 1

    def test_exhaustive(self, rng):
        cal = random_linear(rng)
        cfg = SearchConfig(candidates=25)
        dx, dw = cal.init_deltas(4)
        step = search_interval(cal, "x", dw, dx, 4, cfg)
        scan = [site_objective(cal, d, dw, 4, cfg) for d in candidate_deltas(dx, cfg)]
        best = int(np.argmax(scan))
        assert step.delta == candidate_deltas(dx, cfg)[best]
        assert step.objective == scan[best]


class TestAlternating:
    def test_lossless_converges_at_once(self, rng):
        cal = LayerCalibration(FC, grid(rng, (6, 5, 8), 0.5, 7), grid(rng, (8, 6), 0.25, 7))
        res = alternating_search(cal, 4, SearchConfig())
        assert res.iterations == 1 and res.converged
        assert res.objective == pytest.approx(1.0, abs=1e-12)
        assert (res.delta_x, res.delta_w) == (0.5, 0.25)

    @pytest.mark.parametrize("seed", range(5))
    def test_monotone_trace(self, seed):
        rng = np.random.default_rng(seed)
        cal = random_linear(rng)
        cfg = SearchConfig(candidates=30)
        res = alternating_search(cal, 4, cfg)
        assert np.all(np.diff(res.trace) >= 0)
        assert res.objective >= res.init_objective
        assert 1 <= res.iterations <= cfg.max_iter
        assert len(res.trace) == 1 + 2 * res.iterations

    def test_max_iter_respected(self, rng):
        res = alternating_search(random_linear(rng), 3, SearchConfig(max_iter=1, convergence_tol=1.0))
        assert res.iterations == 1


class TestBiasCorrection:
    def test_random_layer_fixed_point(self, rng):
        cal = random_linear(rng)
        dx, dw = cal.init_deltas(4)
        bc = bias_correct(cal, dx, dw, 4)
        assert bc.applied
        assert np.max(np.abs(bc.error_after)) < 1e-6
        assert np.max(np.abs(bc.error_before)) > 1e-4

    def test_lossless_unchanged(self, rng):
        b = rng.standard_normal(6).round(2)
        cal = LayerCalibration(FC, grid(rng, (6, 5, 8), 0.5, 7), grid(rng, (8, 6), 0.25, 7), b)
        bc = bias_correct(cal, 0.5, 0.25, 4)
        np.testing.assert_array_equal(bc.bias, cal.bias)
        np.testing.assert_array_equal(bc.error_before, 0.0)

    def test_constructed_offset(self, rng):
        # a constant-one input column meets a weight row of 0.1, which rounds
        # to 0.2 on a 0.2 grid: every output unit is too large by exactly 0.1
        x = rng.integers(-3, 4, (10, 5, 4)).astype(float)
        x[..., 0] = 1.0
        w = rng.integers(-5, 6, (4, 3)) * 0.2
        w[0] = 0.1
        b = np.array([1.0, -1.0, 0.5])
        cal = LayerCalibration(FC, x, w, b)
        bc = bias_correct(cal, 1.0, 0.2, 8)
        np.testing.assert_allclose(bc.error_before, 0.1, atol=1e-6)
        np.testing.assert_allclose(bc.bias, b - 0.1, atol=1e-6)
        assert np.max(np.abs(bc.error_after)) < 1e-6

    def test_no_bias_warns(self, rng, caplog):
        cal = random_linear(rng, bias=False)
        with caplog.at_level(logging.WARNING):
            bc = bias_correct(cal, 0.1, 0.1, 8)
        assert not bc.applied and bc.bias is None
        assert "no bias" in caplog.text


class TestCalibrateModel:
    def test_16_bit_agreement(self, small_model, small_images):
        qm = calibrate_model(small_model, small_images, SearchConfig(candidates=10), bits=16)
        fp = model_forward(small_images, small_model).argmax(-1)
        q = model_forward(small_images, qm.model, qm.hooks).argmax(-1)
        assert np.mean(fp == q) >= 0.99

    def test_records(self, small_model, small_images):
        cfg = SearchConfig(candidates=10)
        qm = calibrate_model(small_model, small_images, cfg, bits=6)
        qm.hooks.validate(small_model.config, complete=True)
        for g in site_groups(small_model.config):
            rec = qm.groups[g.name]
            assert rec["objective"] >= rec["init_objective"]
            assert rec["iterations"] <= cfg.max_iter
            if g.bias is not None:
                assert rec["bias_error_after"] < 1e-6
                assert rec["bias_error_after"] <= rec["bias_error_before"]
            else:
                assert rec["bias_error_after"] is None

    def test_single_sample(self, small_model, small_images):
        qm = calibrate_model(small_model, small_images[:1], SearchConfig(candidates=10), bits=8)
        assert all(r["iterations"] <= 20 for r in qm.groups.values())

    def test_deterministic(self, small_model, small_images):
        cfg = SearchConfig(candidates=10)
        a = calibrate_model(small_model, small_images, cfg, bits=5)
        b = calibrate_model(small_model, small_images, cfg, bits=5)
        assert a.hooks.params == b.hooks.params
        assert a.model.equals(b.model)

    def test_mixed_bits(self, small_model, small_images):
        bits = {"base": 8, "layers.0.msa": 4, "layers.0.mlp": 6, "layers.1.msa": 8, "layers.1.mlp": 5}
        qm = calibrate_model(small_model, small_images, SearchConfig(candidates=5, max_iter=2), bits=bits)
        assert qm.hooks["layers.0.qk.x"].bits == 4
        assert qm.hooks["layers.0.fc2.w"].bits == 6
        assert qm.hooks["head.w"].bits == 8 and qm.hooks["embed.x"].bits == 8

    def test_empty(self, small_model):
        with pytest.raises(CalibrationError):
            calibrate_model(small_model, np.zeros((0, 8, 8, 3)))

    def test_build_calibration_operands(self, small_model, small_images):
        cap = {}
        model_forward(small_images, small_model, capture=cap)
        g = site_groups(small_model.config)[1]  # layers.0.q
        cal = build_calibration(g, small_model, cap)
        assert cal.has_ranking
        np.testing.assert_allclose(cal.scores, cap["layers.0.scores"], rtol=1e-5, atol=1e-5)


class TestPercentileModel:
    def test_percentile_100_is_max_init(self, small_model, small_images):
        qm = calibrate_percentile(small_model, small_images, percentile=100, bits=8)
        cap = {}
        model_forward(small_images, small_model, capture=cap)
        np.testing.assert_allclose(qm.hooks["embed.x"].delta, np.abs(cap["embed.x"]).max() / 127, rtol=1e-6)
        assert qm.model is small_model
        assert all(r["iterations"] == 0 for r in qm.groups.values())
