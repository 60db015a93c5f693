import numpy as np
import pytest
from hypothesis import given, strategies as st

from dsbridge.core import NoiseLevel
from dsbridge.datasets import GaussianMixture
from dsbridge.denoiser import (NULL, SOURCE, TARGET, ConditionalDenoiser, DsmDraw, Mlp,
                               TrainConfig, TrainingDivergedError, domain_token,
                               draw_dsm_batch, dsm_loss, train)
from dsbridge.predictors import tweedie

from oracles import GaussianNoiseOracle, numeric_gradient


def _randomized(model, rng, scale=0.3):
    model.params += scale * rng.standard_normal(model.params.shape)
    return model


SEPARATED_VAR = 0.05


@pytest.fixture(scope="module")
def separated():
    p0 = GaussianMixture.gaussian([-2.0, 0.0], SEPARATED_VAR)
    p1 = GaussianMixture.gaussian([2.0, 0.0], SEPARATED_VAR)
    rng = np.random.default_rng(0)
    d0, d1 = p0.sample(2048, rng), p1.sample(2048, rng)
    model, hist = train(d0, d1, TrainConfig(steps=5000, seed=0), return_history=True)
    return p0, p1, model, hist


class TestForward:
    def test_zero_init_output(self, rng):
        m = Mlp(dim=2, hidden=(16, 16), seed=3)
        y = rng.standard_normal((20, 2))
        for c in (SOURCE, TARGET, NULL):
            assert np.all(m.forward(y, 0.3, c) == 0.0)

    def test_deterministic(self, rng):
        m = _randomized(Mlp(dim=2, hidden=(8,)), rng)
        y = rng.standard_normal((5, 2))
        np.testing.assert_array_equal(m.forward(y, 0.4, "target"), m.forward(y, 0.4, "target"))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            Mlp(dim=2).forward(np.zeros((3, 3)), 0.5, 0)

    def test_parameter_count(self):
        m = Mlp(dim=2, hidden=(8,), n_freq=4, emb_dim=4)
        n_in = 2 + 1 + 8 + 4
        assert m.params.size == 3 * 4 + n_in * 8 + 8 + 8 * 2 + 2

    def test_one_minus_precision_path(self, rng):
        m = _randomized(Mlp(dim=2, hidden=(8,)), rng)
        y = rng.standard_normal((4, 2))
        lvl = NoiseLevel.from_alpha_bar(0.25)
        np.testing.assert_allclose(m.forward(y, lvl.alpha_bar, 1, lvl.one_minus),
                                   m.forward(y, 0.25, 1), rtol=1e-12)

    def test_tokens(self):
        assert domain_token("source") == SOURCE and domain_token("null") == NULL
        with pytest.raises(ValueError):
            domain_token("other")
        with pytest.raises(ValueError):
            domain_token(np.array([0, 3]))

    def test_trained_beats_zero_predictor(self):
        rng = np.random.default_rng(0)
        data = rng.standard_normal((2000, 2))
        model = train(data, data, TrainConfig(steps=1500, seed=0, hidden=(32, 32)))
        x0 = rng.standard_normal((5000, 2))
        eps = rng.standard_normal((5000, 2))
        y = np.sqrt(0.5) * x0 + np.sqrt(0.5) * eps
        mse = ((model.forward(y, 0.5, SOURCE) - eps) ** 2).sum(1).mean()
        assert mse < ((0 - eps) ** 2).sum(1).mean()


class TestDsmLoss:
    def test_oracle_hook_gives_zero(self, rng):
        class Perfect:
            def __init__(self, eps):
                self.eps = eps

            def forward(self, y, alpha_bar, c):
                return self.eps

        draw = draw_dsm_batch(rng.standard_normal((50, 2)), rng.standard_normal((50, 2)) + 3,
                              64, TrainConfig(), rng)
        assert dsm_loss(Perfect(draw.eps), draw, with_grad=False) == 0.0

    def test_zero_model_loss_is_dimension(self):
        # E||eps||^2 = d for the zero predictor
        rng = np.random.default_rng(7)
        d = 2
        data = rng.standard_normal((10_000, d))
        draw = draw_dsm_batch(data, data, 10_000, TrainConfig(), rng)
        loss = dsm_loss(Mlp(dim=d, hidden=(8,)), draw, with_grad=False)
        assert abs(loss - d) / d < 0.05

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        model = _randomized(Mlp(dim=2, hidden=(8,), seed=1), rng)
        draw = draw_dsm_batch(rng.standard_normal((40, 2)), rng.standard_normal((40, 2)),
                              32, TrainConfig(), rng)
        _, grad = model.loss_and_grad(draw.y, draw.alpha_bar, draw.c, draw.eps)
        idx = rng.choice(model.params.size, 10, replace=False)
        fd = numeric_gradient(
            lambda p: model.loss_and_grad(draw.y, draw.alpha_bar, draw.c, draw.eps, flat=p)[0],
            model.params, idx)
        rel = np.abs(fd - grad[idx]) / np.maximum(np.maximum(abs(fd), abs(grad[idx])), 1e-8)
        assert rel.max() <= 1e-4

    @given(st.integers(0, 2**16), st.sampled_from([(4,), (8, 8), (16, 4)]))
    def test_gradient_property(self, seed, hidden):
        rng = np.random.default_rng(seed)
        model = _randomized(Mlp(dim=2, hidden=hidden, seed=seed), rng)
        y = rng.standard_normal((16, 2))
        ab = rng.uniform(0.05, 0.95, 16)
        c = rng.integers(0, 3, 16)
        eps = rng.standard_normal((16, 2))
        _, grad = model.loss_and_grad(y, ab, c, eps)
        idx = rng.choice(model.params.size, 10, replace=False)
        fd = numeric_gradient(lambda p: model.loss_and_grad(y, ab, c, eps, flat=p)[0],
                              model.params, idx)
        err = np.abs(fd - grad[idx])
        scale = np.maximum(np.maximum(abs(fd), abs(grad[idx])), 1e-6)
        assert np.all(err / scale <= 1e-4)

    def test_exact_posterior_beats_zero(self):
        # the true E[eps | y] attains the minimum of the objective
        rng = np.random.default_rng(4)
        laws = {SOURCE: ([-2.0, 0.0], 0.3 * np.eye(2)), TARGET: ([2.0, 0.0], 0.3 * np.eye(2)),
                NULL: ([0.0, 0.0], np.diag([4.3, 0.3]))}
        oracle = GaussianNoiseOracle(laws)
        cfg = TrainConfig(cond_dropout=0.0)
        a = rng.multivariate_normal(*laws[SOURCE], 4000)
        b = rng.multivariate_normal(*laws[TARGET], 4000)
        draw = draw_dsm_batch(a, b, 4000, cfg, rng)
        best = dsm_loss(oracle, draw, with_grad=False)

        class Scaled:
            def __init__(self, k):
                self.k = k

            def forward(self, y, alpha_bar, c):
                return self.k * oracle.forward(y, alpha_bar, c)

        assert best < 2.0
        for k in (0.9, 1.1):
            assert best < dsm_loss(Scaled(k), draw, with_grad=False)

    def test_dropout_rate(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((10, 2))
        draw = draw_dsm_batch(x, x, 20_000, TrainConfig(cond_dropout=0.25), rng)
        assert abs((draw.c == NULL).mean() - 0.25) < 0.01
        assert isinstance(draw, DsmDraw)
        np.testing.assert_allclose(draw.alpha_bar + draw.one_minus, 1.0, atol=1e-15)


class TestTrain:
    def test_zero_steps_unchanged(self, rng):
        data = rng.standard_normal((30, 2))
        init = Mlp(dim=2, hidden=(8,), seed=5)
        before = init.params.copy()
        out, hist = train(data, data, TrainConfig(steps=0, hidden=(8,)), model=init,
                          return_history=True)
        np.testing.assert_array_equal(out.params, before)
        assert len(hist) == 0

    def test_seed_determinism(self, rng):
        data = rng.standard_normal((100, 2))
        cfg = TrainConfig(steps=50, seed=9, hidden=(16,))
        a, b = train(data, data + 2, cfg), train(data, data + 2, cfg)
        np.testing.assert_array_equal(a.params, b.params)
        c = train(data, data + 2, TrainConfig(steps=50, seed=10, hidden=(16,)))
        assert not np.array_equal(a.params, c.params)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(cond_dropout=1.0)
        with pytest.raises(ValueError):
            TrainConfig(alpha_bar_range=(0.0, 0.5))
        with pytest.raises(ValueError):
            TrainConfig(steps=-1)

    def test_divergence_reports_step(self, rng):
        data = rng.standard_normal((50, 2))
        with pytest.raises(TrainingDivergedError) as info, np.errstate(all="ignore"):
            train(data, data, TrainConfig(steps=5, lr=1e300, hidden=(8,)))
        assert 1 <= info.value.step <= 5

    def test_separated_gaussians_halve_the_loss(self, separated):
        p0, p1, model, _ = separated
        rng = np.random.default_rng(1)
        h0, h1 = p0.sample(4096, rng), p1.sample(4096, rng)
        draw = draw_dsm_batch(h0, h1, 8192, TrainConfig(cond_dropout=0.0), rng)
        baseline = 2.0
        assert dsm_loss(model, draw, with_grad=False) <= 0.5 * baseline
        for c in (SOURCE, TARGET):
            keep = draw.c == c
            sub = DsmDraw(draw.y[keep], draw.alpha_bar[keep], draw.one_minus[keep],
                          draw.c[keep], draw.eps[keep])
            assert dsm_loss(model, sub, with_grad=False) < baseline

    def test_loss_near_bayes_risk(self, separated):
        # per-dimension risk of E[eps | y] is s ab / (s ab + 1 - ab), averaged
        # over log-SNR uniform on the training range
        p0, p1, model, _ = separated
        s = SEPARATED_VAR
        lo, hi = np.log(0.02 / 0.98), np.log(0.999 / 0.001)
        lam = np.linspace(lo, hi, 100_001)
        ab = 1 / (1 + np.exp(-lam))
        risk = 2 * np.mean(s * ab / (s * ab + 1 - ab))
        rng = np.random.default_rng(3)
        draw = draw_dsm_batch(p0.sample(8192, rng), p1.sample(8192, rng), 16384,
                              TrainConfig(cond_dropout=0.0), rng)
        loss = dsm_loss(model, draw, with_grad=False)
        assert risk - 0.05 < loss < risk + 0.1

    def test_smoothed_loss_decreases(self, separated):
        hist = separated[3]
        assert hist[-100:].mean() <= hist[:100].mean()
        assert np.all(np.isfinite(hist))

    def test_conditioning_separation(self, separated):
        p0, p1, model, _ = separated
        rng = np.random.default_rng(2)
        level = NoiseLevel.from_alpha_bar(0.3)
        y = np.sqrt(level.alpha_bar) * rng.standard_normal((200, 2))
        x_src = tweedie(y, model.forward(y, level.alpha_bar, SOURCE), level)
        x_tgt = tweedie(y, model.forward(y, level.alpha_bar, TARGET), level)
        assert np.all((x_tgt - x_src) @ (p1.mean - p0.mean) > 0)
        d = lambda x, m: ((x - m) ** 2).sum(1)
        assert np.all(d(x_src, p0.mean) < d(x_tgt, p0.mean))
        assert np.all(d(x_tgt, p1.mean) < d(x_src, p1.mean))


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        m = _randomized(Mlp(dim=3, hidden=(5, 7), n_freq=2, emb_dim=3), rng)
        m.save(tmp_path / "m.ckpt")
        back = Mlp.load(tmp_path / "m.ckpt")
        assert back.architecture() == m.architecture()
        np.testing.assert_array_equal(back.params, m.params)

    def test_rejects_foreign_file(self, tmp_path):
        (tmp_path / "x").write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            Mlp.load(tmp_path / "x")

    def test_wrong_param_count(self):
        with pytest.raises(ValueError):
            Mlp(dim=2, hidden=(4,), params=np.zeros(3))


class TestEstimator:
    def test_fit_and_score(self, rng):
        X = np.vstack([rng.standard_normal((100, 2)) - 2, rng.standard_normal((100, 2)) + 2])
        y = np.repeat([0, 1], 100)
        est = ConditionalDenoiser(hidden=(16,), steps=200, seed=1).fit(X, y)
        assert est.n_features_in_ == 2 and len(est.loss_history_) == 200
        assert est.score(X, y) > -2.0
        assert est.predict_noise(X[:3], 0.5, "target").shape == (3, 2)

    def test_requires_both_domains(self, rng):
        with pytest.raises(ValueError):
            ConditionalDenoiser(steps=1).fit(rng.standard_normal((5, 2)), np.zeros(5))
