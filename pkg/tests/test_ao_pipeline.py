import math

import numpy as np
import pytest

import ao_pipeline
from ao_pipeline import InfeasibleStateError, convergence_check, final_metrics, run_ao
from beamforming_sca import SolverError, initial_point, sca_iterate
from channel import build_channels
from config import get_default_config
from run_experiment import RANDOM_FA_OFFSET, baseline_fpa, baseline_random_fa, configure
from scenario import build_scenario


@pytest.fixture
def ao_config(small_config):
    return small_config.with_overrides(max_ao_epochs=2, max_sca_epochs=3, max_bfgs_epochs=5)


# ─── convergence rule ─────────────────────────────────────────────────

class TestConvergenceCheck:
    def test_within_tolerance(self):
        assert convergence_check([1.0, 1.0005], 1e-3)

    def test_tolerance_inclusive(self):
        assert convergence_check([0.5, 1.0], 0.5)

    def test_not_converged(self):
        assert not convergence_check([1.0, 1.1, 1.3], 1e-3)

    def test_only_last_pair_counts(self):
        assert convergence_check([0.0, 5.0, 5.0], 1e-9)

    def test_needs_two_values(self):
        with pytest.raises(ValueError):
            convergence_check([1.0], 1e-3)


# ─── alternating optimisation ─────────────────────────────────────────

class TestRunAo:
    def test_infinite_tolerance_stops_after_one_epoch(self, small_scenario, ao_config):
        result = run_ao(small_scenario, ao_config.with_overrides(ao_tol=math.inf), randomize=False)
        assert len(result.trace.epochs) == 1
        assert result.trace.converged

    def test_reduces_to_sca_without_other_blocks(self, small_scenario, ao_config):
        cfg = ao_config.with_overrides(max_ao_epochs=1)
        result = run_ao(small_scenario, cfg, optimize_positions=False, optimize_rho=False, randomize=False)
        channels = build_channels(small_scenario.placement, small_scenario.tx, small_scenario.rx)
        rho = np.ones(cfg.K)
        beam, _ = sca_iterate(initial_point(channels, cfg, rho), channels, rho, cfg)
        assert result.trace.epochs[-1].objective == pytest.approx(beam.objective, rel=1e-6, abs=1e-9)
        assert np.all(result.ratio.rho == 1.0)
        np.testing.assert_allclose(result.scenario.tx.u, small_scenario.tx.u)

    def test_monotone_and_feasible(self, small_scenario, ao_config):
        result = run_ao(small_scenario, ao_config)
        values = result.trace.values()
        assert result.trace.monotone
        assert all(b >= a - 1e-6 for a, b in zip(values, values[1:]))
        assert result.scenario.tx.contains(result.scenario.tx.u)
        assert np.all(result.ratio.rho >= ao_config.rho_lb - 1e-12)
        assert np.all(result.ratio.rho <= 1.0)

    def test_deterministic(self, small_scenario, ao_config):
        a = run_ao(small_scenario, ao_config)
        b = run_ao(small_scenario, ao_config)
        np.testing.assert_allclose(a.trace.values(), b.trace.values(), rtol=1e-9)
        np.testing.assert_allclose(a.scenario.tx.u, b.scenario.tx.u)

    def test_epoch_records(self, small_scenario, ao_config):
        result = run_ao(small_scenario, ao_config, randomize=False)
        record = result.trace.epochs[0]
        assert record.epoch == 1
        assert {"beamforming", "positions", "ratio"} <= set(record.timings)
        assert record.u.shape == (2 * small_scenario.tx.n,)

    def test_benchmark_positions(self, small_scenario, ao_config):
        result = run_ao(small_scenario, ao_config, position_method="benchmark", randomize=False)
        assert result.trace.monotone

    def test_unknown_position_method(self, small_scenario, ao_config):
        with pytest.raises(ValueError, match="position_method"):
            run_ao(small_scenario, ao_config, position_method="newton")

    def test_negative_budget_raises(self, small_scenario, ao_config, monkeypatch):
        monkeypatch.setattr(ao_pipeline, "residual_budget", lambda *args: -1.0)
        with pytest.raises(InfeasibleStateError) as err:
            run_ao(small_scenario, ao_config, optimize_positions=False)
        assert err.value.trace.epochs == []

    def test_solver_failure_keeps_trace(self, small_scenario, ao_config, monkeypatch):
        calls = []

        def flaky(*args, **kwargs):
            calls.append(1)
            if len(calls) == 2:
                raise SolverError("numerical trouble", "solver_error")
            return sca_iterate(*args, **kwargs)

        monkeypatch.setattr(ao_pipeline, "sca_iterate", flaky)
        with pytest.raises(InfeasibleStateError) as err:
            run_ao(small_scenario, ao_config.with_overrides(ao_tol=1e-12), randomize=False)
        assert len(err.value.trace.epochs) == 1
        assert isinstance(err.value.__cause__, SolverError)

    def test_position_solver_failure_keeps_trace(self, small_scenario, ao_config, monkeypatch):
        def failing(*args, **kwargs):
            raise SolverError("benchmark surrogate failed", "solver_error")

        monkeypatch.setattr(ao_pipeline, "benchmark_optimize", failing)
        with pytest.raises(InfeasibleStateError) as err:
            run_ao(small_scenario, ao_config, position_method="benchmark", randomize=False)
        assert err.value.trace.epochs == []

    def test_initial_positions_projected(self, small_scenario, ao_config):
        u = small_scenario.tx.u + 1.0
        result = run_ao(small_scenario, ao_config.with_overrides(max_ao_epochs=1),
                        optimize_positions=False, initial_positions=u, randomize=False)
        assert result.scenario.tx.contains(result.scenario.tx.u)


class TestFinalMetrics:
    def test_rank_one_used_when_recovered(self, small_scenario, ao_config):
        result = run_ao(small_scenario, ao_config.with_overrides(max_ao_epochs=1))
        assert result.beamforming.w is not None
        report = final_metrics(result)
        relaxed = final_metrics(result, rank_one=False)
        assert report.min_secrecy >= 0.0
        assert report.margins.shape == relaxed.margins.shape


@pytest.mark.slow
class TestAoAcceptance:
    def test_converges_on_default_scenarios(self):
        cfg = get_default_config()
        for seed in range(10):
            result = run_ao(build_scenario(cfg, seed))
            assert result.trace.converged
            assert result.trace.monotone

    def test_moves_antennas_and_beats_fixed(self):
        cfg = get_default_config().with_overrides(max_ao_epochs=5)
        for seed in range(5):
            scenario = build_scenario(cfg, seed)
            result = run_ao(scenario)
            assert np.any(result.scenario.tx.u != scenario.tx.u)
            assert final_metrics(result).min_secrecy > baseline_fpa(scenario).min_secrecy

    def test_position_methods_ordered(self):
        cfg = configure("per-antenna-gain", 0.05, get_default_config())
        bfgs, random_fa, fpa = [], [], []
        for seed in range(20):
            scenario = build_scenario(cfg, seed)
            s_bfgs = final_metrics(run_ao(scenario)).min_secrecy
            s_bench = final_metrics(run_ao(scenario, position_method="benchmark")).min_secrecy
            assert s_bfgs >= s_bench - 1e-3
            bfgs.append(s_bfgs)
            random_fa.append(baseline_random_fa(scenario, seed=seed + RANDOM_FA_OFFSET).min_secrecy)
            fpa.append(baseline_fpa(scenario).min_secrecy)
        assert np.mean(bfgs) > np.mean(random_fa) > np.mean(fpa)

    def test_semantic_ratio_helps_every_seed(self):
        cfg = get_default_config()
        for seed in range(10):
            scenario = build_scenario(cfg, seed)
            with_rho = final_metrics(run_ao(scenario)).min_secrecy
            without = final_metrics(run_ao(scenario, optimize_rho=False)).min_secrecy
            assert with_rho >= without - 1e-6
