import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dsbridge.bridge import (NonFiniteStateError, Trajectory, final_denoise, init_state,
                             noise_coefficient, solve, time_grid, velocity)
from dsbridge.core import BridgeConfig, SbParams, sb_sigma
from dsbridge.coupling import CouplingPlan
from dsbridge.datasets import GaussianMixture
from dsbridge.predictors import (EmpiricalBayesPredictor, GaussianPredictor, PredictorSet,
                                 VPPredictor)


def _pair_plan(a=(1.0, -1.0), b=(3.0, 2.0)):
    return CouplingPlan(np.array([a]), np.array([b]), np.array([[1.0]]))


class _Constant(PredictorSet):
    """Predictor returning fixed triples; counts calls like the real ones."""

    backend = "constant"

    def __init__(self, tau, x0, x1, eps):
        super().__init__(tau)
        self.vals = (np.asarray(x0, float), np.asarray(x1, float), np.asarray(eps, float))

    def _predict(self, x_t, t):
        return tuple(np.broadcast_to(v, x_t.shape).copy() for v in self.vals)


class TestVelocity:
    def test_midpoint_drops_noise(self, rng):
        preds = _Constant(4.0, [1.0, 0.0], [0.0, 2.0], [100.0, 100.0])
        v = velocity(preds, rng.standard_normal((3, 2)), 0.5, 4.0)
        np.testing.assert_array_equal(v, [[-1.0, 2.0]] * 3)

    def test_tau_zero(self, rng):
        preds = _Constant(0.0, [1.0, 0.0], [0.0, 2.0], [5.0, -5.0])
        for t in (0.01, 0.3, 0.99):
            np.testing.assert_array_equal(velocity(preds, np.zeros((1, 2)), t, 0.0),
                                          [[-1.0, 2.0]])

    def test_single_pair_midpoint(self, rng):
        preds = EmpiricalBayesPredictor(_pair_plan(), 2.0)
        v = velocity(preds, 3 * rng.standard_normal((5, 2)), 0.5, 2.0)
        np.testing.assert_allclose(v, [[2.0, 3.0]] * 5, atol=1e-14)

    def test_coefficient_formula(self):
        assert noise_coefficient(0.2, 6.25) == pytest.approx(0.3 * 2.5 / np.sqrt(0.16))
        assert noise_coefficient(0.8, 6.25) == pytest.approx(-noise_coefficient(0.2, 6.25))

    def test_outside_clamp_rejected(self):
        preds = _Constant(1.0, [0.0], [0.0], [0.0])
        for t in (0.0, 1e-4, 1.0):
            with pytest.raises(ValueError):
                velocity(preds, np.zeros((1, 1)), t, 1.0)

    @given(st.integers(0, 2**16), st.floats(0.01, 0.99), st.floats(0.1, 8.0))
    def test_single_pair_velocity_is_bridge_derivative(self, seed, t, tau):
        # for one pair the velocity is d/dt of the conditional bridge path
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal(2), rng.standard_normal(2)
        x = rng.standard_normal((4, 2))
        eps = (x - (1 - t) * a - t * b) / sb_sigma(t, tau)
        dsigma = (1 - 2 * t) * np.sqrt(tau) / (2 * np.sqrt(t * (1 - t)))
        ref = b - a + dsigma * eps
        got = velocity(EmpiricalBayesPredictor(_pair_plan(a, b), tau), x, t, tau)
        np.testing.assert_allclose(got, ref, atol=1e-9)


class TestInitState:
    def test_t0_zero_is_identity(self, rng):
        x = rng.standard_normal((10, 2))
        np.testing.assert_array_equal(init_state(x, 0.0, 6.25), x)

    def test_paper_defaults_coefficients(self, rng):
        # sqrt(0.2 * 0.8 * 6.25) = 1
        x = rng.standard_normal((10, 2))
        out = init_state(x, 0.2, 2.5 ** 2, seed=3)
        eps = out - 0.8 * x
        assert sb_sigma(0.2, 6.25) == pytest.approx(1.0, abs=1e-15)
        ref = init_state(np.zeros_like(x), 0.2, 6.25, seed=3)
        np.testing.assert_allclose(eps, ref, atol=1e-14)

    def test_noise_variance(self):
        x = np.zeros((100_000, 1)) + 3.0
        out = init_state(x, 0.3, 2.0, seed=1)
        var = (out - 0.7 * x).var()
        assert abs(var / (0.3 * 0.7 * 2.0) - 1) < 0.02

    def test_per_sample_streams(self, rng):
        x = rng.standard_normal((6, 2))
        full = init_state(x, 0.2, 6.25, seed=4)
        part = init_state(x[3:], 0.2, 6.25, seed=4, indices=np.arange(3, 6))
        np.testing.assert_array_equal(full[3:], part)
        assert not np.array_equal(full, init_state(x, 0.2, 6.25, seed=5))

    def test_invalid_t0(self, rng):
        with pytest.raises(ValueError):
            init_state(np.zeros((1, 2)), 1.0, 1.0)


class TestSolve:
    def test_single_step_single_pair(self):
        a, b = np.array([1.0, -1.0]), np.array([3.0, 2.0])
        tau, tc = 2.0, 1e-3
        cfg = BridgeConfig(sb=SbParams(tau=tau, t0=0.0, t_clamp=tc), nfe=1, final_denoise=False)
        out = solve(a[None], cfg, EmpiricalBayesPredictor(_pair_plan(a, b), tau)).final
        # x0 = a, eps_hat = t (a - b) / sigma, so the noise term is (1/2 - t)(a - b) / (1 - t)
        np.testing.assert_allclose(out[0], b + (0.5 - tc) / (1 - tc) * (a - b), atol=1e-12)

    def test_rectified_flow_moments(self):
        # tau = 0, product coupling, N(0, I) target: the flow is the Gaussian PF-ODE
        p0 = GaussianMixture.gaussian([2.0, 0.0], 0.5)
        p1 = GaussianMixture.gaussian([0.0, 0.0], 1.0)
        x = p0.sample(8000, np.random.default_rng(0))
        cfg = BridgeConfig(sb=SbParams(tau=0.0, t0=0.0), nfe=512, final_denoise=False)
        out = solve(x, cfg, GaussianPredictor(p0, p1, 0.0)).final
        assert np.abs(out.mean(0)).max() < 0.05
        np.testing.assert_allclose(np.cov(out.T), np.eye(2), atol=0.05)

    def test_deterministic_replay(self, rng):
        p0 = GaussianMixture.gaussian([1.0, 0.0], 0.3)
        p1 = GaussianMixture.gaussian([-1.0, 1.0], 0.6)
        x = rng.standard_normal((20, 2))
        cfg = BridgeConfig(sb=SbParams(tau=2.0), nfe=6, seed=7)
        a = solve(x, cfg, GaussianPredictor(p0, p1, 2.0), keep_states=True)
        b = solve(x, cfg, GaussianPredictor(p0, p1, 2.0), keep_states=True)
        np.testing.assert_array_equal(a.final, b.final)
        for s, r in zip(a.states, b.states):
            np.testing.assert_array_equal(s, r)
        assert a.times == b.times

    @pytest.mark.parametrize("nfe", [1, 2, 5, 8])
    @pytest.mark.parametrize("denoise", [True, False])
    def test_nfe_accounting(self, rng, nfe, denoise):
        if denoise and nfe == 1:
            with pytest.raises(ValueError):
                BridgeConfig(nfe=nfe, final_denoise=denoise)
            return
        preds = _Constant(6.25, [0.0, 0.0], [1.0, 1.0], [0.0, 0.0])
        cfg = BridgeConfig(sb=SbParams(tau=6.25), nfe=nfe, final_denoise=denoise)
        traj = solve(rng.standard_normal((5, 2)), cfg, preds, keep_states=True)
        assert traj.nfe_used == nfe == preds.n_evals
        assert len(traj.times) == len(traj.states) == cfg.n_steps + 1
        assert cfg.n_steps == nfe - int(denoise)

    def test_grid(self):
        np.testing.assert_allclose(time_grid(0.2, 4), [0.2, 0.4, 0.6, 0.8])
        traj = solve(np.zeros((1, 1)), BridgeConfig(sb=SbParams(tau=1.0), nfe=5),
                     _Constant(1.0, [0.0], [0.0], [0.0]), keep_states=True)
        assert np.all(np.diff(traj.times) > 0) and traj.times[0] == 0.2 and traj.times[-1] == 1

    def test_unit_velocity_covers_unit_time(self):
        # constant velocity 1 integrates to 1 - t0 over the grid
        cfg = BridgeConfig(sb=SbParams(tau=0.0, t0=0.2), nfe=7, final_denoise=False)
        out = solve(np.zeros((1, 1)), cfg, _Constant(0.0, [0.0], [1.0], [0.0])).final
        assert out[0, 0] == pytest.approx(0.8, abs=1e-14)

    def test_final_denoise_at_last_grid_time(self):
        seen = []

        class Spy(_Constant):
            def _predict(self, x_t, t):
                seen.append(t)
                return super()._predict(x_t, t)

        cfg = BridgeConfig(sb=SbParams(tau=1.0, t0=0.2), nfe=5)
        solve(np.zeros((1, 2)), cfg, Spy(1.0, [0, 0], [0, 0], [0, 0]))
        np.testing.assert_allclose(seen, [0.2, 0.4, 0.6, 0.8, 0.8])

    def test_tau_mismatch(self):
        with pytest.raises(ValueError, match="tau"):
            solve(np.zeros((1, 2)), BridgeConfig(sb=SbParams(tau=1.0)),
                  _Constant(2.0, [0, 0], [0, 0], [0, 0]))

    def test_non_finite_state(self):
        cfg = BridgeConfig(sb=SbParams(tau=1.0), nfe=4, final_denoise=False)
        with pytest.raises(NonFiniteStateError) as info, np.errstate(all="ignore"):
            solve(np.zeros((1, 2)), cfg, _Constant(1.0, [0, 0], [np.inf, 0], [0, 0]))
        assert info.value.step == 1

    def test_time_reversal_on_mirrored_gaussians(self):
        p0 = GaussianMixture.gaussian([-2.0, 0.0], np.diag([0.5, 0.2]))
        p1 = GaussianMixture.gaussian([2.0, 0.0], np.diag([0.2, 0.5]))
        x = p0.sample(200, np.random.default_rng(0))
        errs = []
        for M in (64, 256):
            cfg = BridgeConfig(sb=SbParams(tau=1.0, t0=0.0), nfe=M, final_denoise=False)
            y = solve(x, cfg, GaussianPredictor(p0, p1, 1.0)).final
            back = solve(y, cfg, GaussianPredictor(p1, p0, 1.0)).final
            errs.append(np.sqrt(((back - x) ** 2).sum(1).mean()))
        assert errs[1] < errs[0] / 3 and errs[1] <= 1e-2


class TestFinalDenoise:
    def test_single_pair(self, rng):
        preds = EmpiricalBayesPredictor(_pair_plan(), 1.0)
        out = final_denoise(rng.standard_normal((4, 2)), 0.9, preds)
        np.testing.assert_allclose(out, [[3.0, 2.0]] * 4)

    def test_zero_noise_level_is_identity(self, rng, blob_model):
        x = rng.standard_normal((6, 2))
        np.testing.assert_array_equal(final_denoise(x, 0.9, VPPredictor(blob_model, 0.0)), x)
        p = GaussianMixture.gaussian([0.0, 0.0], 1.0)
        out = final_denoise(x, 1 - 1e-12, GaussianPredictor(p, p, 1.0))
        np.testing.assert_allclose(out, x, atol=1e-6)

    def test_contracts_toward_target_mode(self):
        p0 = GaussianMixture.gaussian([-2.0, 0.0], 0.3)
        p1 = GaussianMixture.gaussian([2.0, 1.0], 0.3)
        rng = np.random.default_rng(8)
        t, tau = 0.9, 6.25
        x = (1 - t) * p0.sample(100, rng) + t * p1.sample(100, rng)
        x += sb_sigma(t, tau) * rng.standard_normal(x.shape)
        out = final_denoise(x, t, GaussianPredictor(p0, p1, tau))
        d_in = np.linalg.norm(x - p1.mean, axis=1)
        d_out = np.linalg.norm(out - p1.mean, axis=1)
        assert np.all(d_out < d_in)


class TestTrajectoryCsv:
    def test_rows_and_header(self, tmp_path, rng):
        cfg = BridgeConfig(sb=SbParams(tau=1.0), nfe=4)
        traj = solve(rng.standard_normal((3, 2)), cfg, _Constant(1.0, [0, 0], [1, 1], [0, 0]),
                     keep_states=True)
        traj.to_csv(tmp_path / "t.csv")
        rows = list(csv.reader(open(tmp_path / "t.csv")))
        assert rows[0] == ["step", "t", "sample", "x0", "x1"]
        # 3 Euler states + the held state at t = 1 + the denoised output
        assert len(rows) == 1 + 3 * (cfg.n_steps + 1) + 3
        assert rows[-1][:3] == [str(cfg.n_steps + 1), "1.0", "2"]
        np.testing.assert_array_equal(np.array(rows[-3:])[:, 3:].astype(float), traj.final)

    def test_final_only(self, tmp_path):
        Trajectory(times=[0.2], final=np.ones((2, 1))).to_csv(tmp_path / "t.csv")
        rows = list(csv.reader(open(tmp_path / "t.csv")))
        assert rows[1:] == [["0", "1.0", "0", "1.0"], ["0", "1.0", "1", "1.0"]]
