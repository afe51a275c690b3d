import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose

from beamforming_sca import initial_point, sca_iterate
from config import get_default_config
from fa_opt import (
    FixedBlock, LineSearchParams, backtracking_search, benchmark_optimize, benchmark_step, bfgs_update,
    fa_gradient, fa_objective, fa_smoothed_objective, position_margins, project, projected_bfgs,
    projected_bfgs_maximize,
)
from scenario import build_scenario, sample_positions
from semantics import secrecy_margins


def random_block(scenario, seed=0, power=10.0):
    rng = np.random.default_rng(seed)
    n, K = scenario.tx.n, scenario.config.K
    w = rng.standard_normal((n, K)) + 1j * rng.standard_normal((n, K))
    w *= np.sqrt(power / np.sum(np.abs(w) ** 2))
    R_x = w @ w.conj().T + 0.1 * power / n * np.eye(n)
    return FixedBlock.from_beams(w, R_x, np.linspace(0.6, 1.0, K))


# ─── objective and gradient ───────────────────────────────────────────

class TestObjective:
    def test_matches_channel_margins(self, small_scenario, small_channels):
        fixed = random_block(small_scenario)
        cfg = small_scenario.config
        expected = secrecy_margins(small_channels.users, small_channels.targets, fixed.W, fixed.R_x,
                                   fixed.rho, cfg.iota, cfg.sigma_c2)
        assert_allclose(position_margins(small_scenario.tx.u, fixed, small_scenario), expected, rtol=1e-9)

    def test_hard_min_clamped(self, small_scenario):
        fixed = random_block(small_scenario)
        u = small_scenario.tx.u
        value = fa_objective(u, fixed, small_scenario)
        assert value == pytest.approx(max(position_margins(u, fixed, small_scenario).min(), 0.0))

    def test_soft_min_below_hard_min(self, small_scenario):
        fixed = random_block(small_scenario, 1)
        u = small_scenario.tx.u
        hard = position_margins(u, fixed, small_scenario).min()
        assert fa_smoothed_objective(u, fixed, small_scenario) <= hard + 1e-12

    def test_user_permutation_invariance(self, small_scenario):
        fixed = random_block(small_scenario, 2)
        order = np.array([1, 0])
        placement = dataclasses.replace(small_scenario.placement, users=small_scenario.placement.users[order])
        swapped = dataclasses.replace(small_scenario, placement=placement)
        fixed_swapped = FixedBlock(fixed.W[order], fixed.R_x, fixed.rho[order])
        u = small_scenario.tx.u
        a = position_margins(u, fixed, small_scenario)
        b = position_margins(u, fixed_swapped, swapped)
        assert_allclose(a[order], b, rtol=1e-12)
        assert fa_objective(u, fixed, small_scenario) == pytest.approx(fa_objective(u, fixed_swapped, swapped))


class TestGradient:
    @pytest.mark.parametrize("block_seed", range(4))
    def test_matches_finite_differences(self, small_scenario, block_seed):
        fixed = random_block(small_scenario, block_seed)
        rng = np.random.default_rng(4 + block_seed)
        free = ~small_scenario.tx.fixed_mask()
        step = 1e-8
        for _ in range(5):
            u = sample_positions(small_scenario.tx, rng)
            grad = fa_gradient(u, fixed, small_scenario)
            fd = np.zeros_like(u)
            for j in np.flatnonzero(free):
                plus, minus = u.copy(), u.copy()
                plus[j] += step
                minus[j] -= step
                fd[j] = (fa_smoothed_objective(plus, fixed, small_scenario)
                         - fa_smoothed_objective(minus, fixed, small_scenario)) / (2 * step)
            assert np.linalg.norm(grad - fd) <= 1e-5 * np.linalg.norm(fd)

    def test_centroid_gradient_zero(self, small_scenario):
        fixed = random_block(small_scenario)
        grad = fa_gradient(small_scenario.tx.u, fixed, small_scenario)
        n = small_scenario.tx.n
        assert grad[0] == 0.0 and grad[n] == 0.0


# ─── projection and BFGS pieces ───────────────────────────────────────

class TestProject:
    def test_clamps_to_box(self, small_config):
        s = build_scenario(small_config.with_overrides(n_tx=2, n_tz=1, K=1, L=1, C_i=0.05 ** 2, tx_pitch=0.05), 0)
        lower, upper = s.tx.bounds()
        u = s.tx.u.copy()
        u[1] = upper[1] + 0.01
        u[3] = lower[3] - 0.01
        clipped = project(u, s.tx)
        assert clipped[1] == pytest.approx(upper[1])
        assert clipped[3] == pytest.approx(lower[3])
        assert s.tx.contains(clipped)

    def test_idempotent(self, small_scenario):
        rng = np.random.default_rng(0)
        u = small_scenario.tx.u + rng.normal(0.0, 0.1, small_scenario.tx.u.size)
        once = project(u, small_scenario.tx)
        assert_allclose(project(once, small_scenario.tx), once)

    def test_centroid_snaps_to_nominal(self, small_scenario):
        n = small_scenario.tx.n
        u = small_scenario.tx.u + 1.0
        clipped = project(u, small_scenario.tx)
        assert_allclose(clipped[[0, n]], small_scenario.tx.nominal[0])

    @given(arrays(np.float64, 18, elements=st.floats(-1.0, 1.0)))
    def test_any_point_lands_in_box(self, offset):
        tx = build_scenario(get_default_config(), 0).tx
        clipped = project(tx.u + offset, tx)
        assert tx.contains(clipped)
        assert_allclose(project(clipped, tx), clipped)


class TestBfgsUpdate:
    def test_one_dimensional_secant(self):
        assert bfgs_update(np.eye(1), [1.0], [0.5])[0, 0] == pytest.approx(2.0)

    def test_secant_and_symmetry(self):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((4, 4))
        H = A @ A.T + np.eye(4)
        s = rng.standard_normal(4)
        y = s + 0.1 * rng.standard_normal(4)
        updated = bfgs_update(H, s, y)
        assert_allclose(updated, updated.T)
        assert_allclose(updated @ y, s, atol=1e-10)
        assert np.linalg.eigvalsh(updated).min() > 0

    def test_skipped_on_bad_curvature(self):
        H = np.diag([1.0, 2.0])
        assert_allclose(bfgs_update(H, [1.0, 0.0], [-1.0, 0.0]), H)
        assert_allclose(bfgs_update(H, [1.0, 0.0], [0.0, 1.0]), H)


class TestLineSearchParams:
    def test_from_config(self, small_config):
        params = LineSearchParams.from_config(small_config)
        assert params.shrink_factor == small_config.shrink_factor

    @pytest.mark.parametrize("kwargs", [{"shrink_factor": 1.0}, {"armijo_c": 0.0}, {"tau_min": 2.0}])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            LineSearchParams(**kwargs)


class TestBacktrackingSearch:
    def test_halves_until_sufficient_increase(self):
        objective = lambda v: -float(v @ v)
        u = np.array([1.0, 1.0])
        grad = -2.0 * u
        result = backtracking_search(objective, u, grad, grad, LineSearchParams())
        assert result.tau == 0.5
        assert_allclose(result.u, 0.0)
        assert not result.stalled

    def test_descent_direction_replaced(self):
        objective = lambda v: -float(v @ v)
        u = np.array([1.0, 1.0])
        grad = -2.0 * u
        result = backtracking_search(objective, u, -grad, grad, LineSearchParams())
        assert result.value > objective(u)

    def test_stalls_when_nothing_improves(self):
        objective = lambda v: -float(v @ v)
        u = np.array([1.0, 1.0])
        wrong_grad = 2.0 * u
        params = LineSearchParams(tau_min=1e-3)
        result = backtracking_search(objective, u, wrong_grad, wrong_grad, params)
        assert result.stalled
        assert result.tau == params.tau_min
        assert_allclose(result.u, u)

    def test_projection_applied(self):
        objective = lambda v: -float(np.sum((v - 2.0) ** 2))
        u = np.zeros(2)
        grad = np.array([4.0, 4.0])
        result = backtracking_search(objective, u, grad, grad, LineSearchParams(),
                                     project=lambda v: np.clip(v, 0.0, 1.0))
        assert np.all(result.u <= 1.0)


class TestProjectedBfgsMaximize:
    def test_separable_concave_quadratic(self):
        a = np.array([1.0, 3.0, 0.5])
        c = np.array([0.3, 1.4, -0.2])
        fun = lambda u: -float(np.sum(a * (u - c) ** 2))
        grad = lambda u: -2.0 * a * (u - c)
        state = projected_bfgs_maximize(fun, grad, np.full(3, 0.5), np.zeros(3), np.ones(3),
                                        LineSearchParams(), max_epochs=200, tol=1e-10)
        assert_allclose(state.u, [0.3, 1.0, 0.0], atol=1e-4)
        assert all(b >= a_ for a_, b in zip(state.trace, state.trace[1:]))

    def test_fixed_coordinates_never_move(self):
        fun = lambda u: -float(np.sum((u - 0.8) ** 2))
        grad = lambda u: -2.0 * (u - 0.8)
        mask = np.array([True, False])
        state = projected_bfgs_maximize(fun, grad, np.array([0.1, 0.1]), np.zeros(2), np.ones(2),
                                        LineSearchParams(), max_epochs=50, fixed_mask=mask)
        assert state.u[0] == 0.1
        assert state.u[1] == pytest.approx(0.8, abs=1e-4)

    def test_initial_step_sets_first_step_length(self):
        fun = lambda u: 1e4 * float(u[0])
        grad = lambda u: np.array([1e4])
        state = projected_bfgs_maximize(fun, grad, np.array([0.5]), np.zeros(1), np.ones(1),
                                        LineSearchParams(), max_epochs=1, initial_step=0.1)
        assert state.epochs == 1
        assert state.u[0] == pytest.approx(0.6)

    def test_steep_objective_still_steps(self):
        # unit steps overshoot a peak 1e-4 wide
        fun = lambda u: -1e6 * float(np.sum((u - 0.3001) ** 2))
        grad = lambda u: -2e6 * (u - 0.3001)
        state = projected_bfgs_maximize(fun, grad, np.full(2, 0.3), np.zeros(2), np.ones(2),
                                        LineSearchParams(tau_min=1e-3), max_epochs=20, initial_step=1e-5)
        assert state.epochs >= 1
        assert_allclose(state.u, 0.3001, atol=1e-6)


# ─── full position optimisers ─────────────────────────────────────────

class TestProjectedBfgs:
    def test_monotone_and_feasible(self, small_scenario):
        fixed = random_block(small_scenario, 5)
        state, trace = projected_bfgs(small_scenario.tx.u, fixed, small_scenario)
        assert all(b >= a - 1e-12 for a, b in zip(trace, trace[1:]))
        assert small_scenario.tx.contains(state.u)
        n = small_scenario.tx.n
        assert_allclose(state.u[[0, n]], small_scenario.tx.nominal[0])
        assert len(state.step_times) == state.epochs

    def test_moves_antennas_with_solved_beams(self, small_scenario, small_channels):
        cfg = small_scenario.config
        rho = np.full(cfg.K, 0.8)
        beam, _ = sca_iterate(initial_point(small_channels, cfg, rho), small_channels, rho, cfg)
        fixed = FixedBlock(beam.W, beam.R_x, rho)
        u0 = small_scenario.tx.u
        state, trace = projected_bfgs(u0, fixed, small_scenario)
        assert state.epochs >= 1
        assert np.max(np.abs(state.u - u0)) > 0.0
        assert trace[-1] > trace[0]
        assert fa_smoothed_objective(state.u, fixed, small_scenario) > fa_smoothed_objective(u0, fixed, small_scenario)

    def test_first_step_measured_in_wavelengths(self, small_scenario):
        fixed = random_block(small_scenario, 5)
        cfg = small_scenario.config
        state, _ = projected_bfgs(small_scenario.tx.u, fixed, small_scenario, max_epochs=1)
        moved = np.linalg.norm(state.u - small_scenario.tx.u)
        assert state.epochs == 1
        assert 0.0 < moved <= cfg.bfgs_initial_step * cfg.wavelength * (1 + 1e-9)

    def test_zero_range_keeps_objective(self, small_config):
        s = build_scenario(small_config.with_overrides(C_i=0.0, tx_pitch=0.01), 3)
        fixed = random_block(s)
        before = fa_objective(s.tx.u, fixed, s)
        state, trace = projected_bfgs(s.tx.u, fixed, s)
        assert state.epochs == 0
        assert_allclose(state.u, s.tx.u)
        assert fa_objective(state.u, fixed, s) == before
        assert len(trace) == 1


class TestBenchmark:
    def test_no_free_coordinates(self, small_config):
        s = build_scenario(small_config.with_overrides(C_i=0.0, tx_pitch=0.01), 3)
        fixed = random_block(s)
        assert_allclose(benchmark_step(s.tx.u, fixed, s), s.tx.u)

    def test_step_stays_in_boxes(self, small_scenario):
        fixed = random_block(small_scenario, 6)
        u = benchmark_step(small_scenario.tx.u, fixed, small_scenario)
        assert small_scenario.tx.contains(u)

    def test_optimize_monotone(self, small_scenario):
        fixed = random_block(small_scenario, 6)
        state, trace = benchmark_optimize(small_scenario.tx.u, fixed, small_scenario, max_epochs=3)
        assert all(b > a for a, b in zip(trace, trace[1:]))
        assert state.objective == trace[-1]


@pytest.mark.slow
class TestPositionSpeed:
    @pytest.mark.parametrize("seed", range(5))
    def test_bfgs_steps_faster_than_benchmark(self, seed):
        scenario = build_scenario(get_default_config(), seed)
        assert scenario.config.n_t == 9
        fixed = random_block(scenario, seed)
        bfgs_state, _ = projected_bfgs(scenario.tx.u, fixed, scenario, max_epochs=5)
        bench_state, _ = benchmark_optimize(scenario.tx.u, fixed, scenario, max_epochs=5)
        assert bfgs_state.step_times and bench_state.step_times
        assert np.mean(bfgs_state.step_times) < np.mean(bench_state.step_times)
