"""Distribution metrics, the scaling benchmark, and the evaluation harness."""

import functools

import numpy as np
import pytest
from numpy.testing import assert_allclose

from linflow.eval_bench import (BenchResult, EvalSettings, aggregate_cells,
                                bench_attention, draw_probe_states,
                                draw_samples, evaluate_model,
                                finalization_gap, heuristic_layer_search,
                                run_transfer_cell, sliced_wasserstein2,
                                temporal_smoothness)
from linflow.flow_core import FlowSchedule
from linflow.toy_model import ToyTransformer
from linflow.trajectory_store import collect
from linflow.transfer_trainer import TransferConfig


def tiny_model(seed=0, **kw):
    kw.setdefault("n_layers", 2)
    kw.setdefault("d_model", 8)
    kw.setdefault("seq_len", 6)
    kw.setdefault("d_state", 3)
    model = ToyTransformer(seed=seed, **kw)
    # fresh models zero-init the output head; wake it so internal branch
    # changes are visible at the output
    rng = np.random.default_rng(seed + 100)
    model.out_w.data = 0.3 * rng.standard_normal(model.out_w.data.shape,
                                                 dtype=np.float32)
    return model


class TestSlicedWasserstein:
    def test_identical_sets_zero(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((128, 5))
        assert sliced_wasserstein2(x, x.copy(), 32, np.random.default_rng(1)) == 0.0

    def test_point_masses_1d(self):
        a = np.zeros((64, 1))
        b = np.ones((64, 1))
        # any unit projection in 1d is +/-1, so the distance is exactly 1
        got = sliced_wasserstein2(a, b, 16, np.random.default_rng(2))
        assert got == pytest.approx(1.0, abs=1e-12)

    def test_shifted_gaussians_2d(self):
        # projected 1d W2 between N(0,I) and N(m,I) is |m.u|; averaging the
        # square over uniform unit directions gives |m|^2 / 2 in 2d
        rng = np.random.default_rng(3)
        m = np.array([1.5, -0.5])
        a = rng.standard_normal((10_000, 2))
        b = rng.standard_normal((10_000, 2)) + m
        got = sliced_wasserstein2(a, b, 256, np.random.default_rng(4))
        assert got == pytest.approx(np.linalg.norm(m) / np.sqrt(2), rel=0.05)

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((100, 4))
        b = rng.standard_normal((80, 4)) * 2.0
        d_ab = sliced_wasserstein2(a, b, 64, np.random.default_rng(6))
        d_ba = sliced_wasserstein2(b, a, 64, np.random.default_rng(6))
        assert d_ab == pytest.approx(d_ba, rel=1e-12)

    def test_flattens_trailing_axes(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((50, 3, 4))
        flat = sliced_wasserstein2(a.reshape(50, 12), a.reshape(50, 12) * 1.5,
                                   32, np.random.default_rng(8))
        shaped = sliced_wasserstein2(a, a * 1.5, 32, np.random.default_rng(8))
        assert shaped == pytest.approx(flat, rel=1e-12)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            sliced_wasserstein2(np.zeros((4, 3)), np.zeros((4, 5)))


class TestTemporalSmoothness:
    def test_linear_ramp_is_perfectly_smooth(self):
        ramp = np.arange(10.0).reshape(1, 10, 1) * np.ones((4, 1, 2))
        assert temporal_smoothness(ramp) == 0.0

    def test_alternating_sequence_scores_high(self):
        jitter = np.tile(np.array([1.0, -1.0] * 5).reshape(1, 10, 1), (2, 1, 1))
        # second difference of +/-1 alternation is +/-4 everywhere
        assert temporal_smoothness(jitter) == pytest.approx(16.0)

    def test_scale_quadratic(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((8, 12, 3))
        assert temporal_smoothness(2.0 * x) == pytest.approx(
            4.0 * temporal_smoothness(x), rel=1e-12)


class TestBenchAttention:
    def test_small_sizes_report_shape(self):
        res = bench_attention(n_list=(64, 128), d=16, repeats=1, seed=0)
        assert isinstance(res, BenchResult)
        assert {row["kernel"] for row in res.rows} == {"softmax", "linear"}
        assert len(res.rows) == 4
        assert set(res.slopes) == {"softmax", "linear"}
        for row in res.rows:
            assert row["median_s"] > 0.0


class TestDrawSamples:
    def test_shape_and_determinism(self):
        model = tiny_model()
        a = draw_samples(model, 5, seed=42, n_steps=4)
        b = draw_samples(model, 5, seed=42, n_steps=4)
        assert a.shape == (5, model.seq_len, model.d_state)
        assert_allclose(a, b, rtol=0, atol=0)

    def test_seed_changes_samples(self):
        model = tiny_model()
        a = draw_samples(model, 5, seed=1, n_steps=4)
        b = draw_samples(model, 5, seed=2, n_steps=4)
        assert np.abs(a - b).max() > 0.0

    def test_matches_manual_integration(self):
        from linflow.flow_core import sample
        model = tiny_model()
        rng = np.random.default_rng(7)
        x1 = rng.standard_normal((3, model.seq_len, model.d_state),
                                 dtype=np.float32)
        manual = sample(model, FlowSchedule.uniform(4), x1)
        assert_allclose(draw_samples(model, 3, seed=7, n_steps=4), manual,
                        rtol=0, atol=0)


class TestFinalizationGap:
    def test_zero_when_scores_at_poles(self):
        model = tiny_model()
        for blk in model.blocks:
            blk.r.data = np.float64(1.0)
        probe = draw_probe_states(model, 0, n=4)
        assert finalization_gap(model, model.finalize_layers(), probe) == 0.0

    def test_positive_for_fractional_scores(self):
        model = tiny_model()
        model.blocks[0].r.data = np.float64(0.6)
        probe = draw_probe_states(model, 0, n=4)
        assert finalization_gap(model, model.finalize_layers(), probe) > 0.0


class TestHeuristicLayerSearch:
    def test_zero_conversions(self):
        model = tiny_model()
        probe = draw_probe_states(model, 1, n=4)
        order, devs = heuristic_layer_search(model, probe, 0)
        assert order == [] and devs == []

    def test_full_conversion_covers_all_layers(self):
        model = tiny_model()
        probe = draw_probe_states(model, 1, n=4)
        order, devs = heuristic_layer_search(model, probe, model.n_layers)
        assert sorted(order) == list(range(model.n_layers))
        assert len(devs) == model.n_layers

    def test_deviations_non_decreasing(self):
        model = tiny_model(n_layers=3)
        probe = draw_probe_states(model, 2, n=8)
        _, devs = heuristic_layer_search(model, probe, 3)
        assert all(b >= a for a, b in zip(devs, devs[1:]))

    def test_teacher_untouched(self):
        model = tiny_model()
        before = [w.data.copy() for _, w in model.named_weights()]
        heuristic_layer_search(model, draw_probe_states(model, 3, n=4), 1)
        after = [w.data for _, w in model.named_weights()]
        for a, b in zip(before, after):
            assert_allclose(a, b, rtol=0, atol=0)

    def test_out_of_range_rejected(self):
        model = tiny_model()
        with pytest.raises(ValueError):
            heuristic_layer_search(model, draw_probe_states(model, 0, n=2),
                                   model.n_layers + 1)


class TestEvaluateModel:
    def test_teacher_against_itself(self):
        model = tiny_model()
        settings = EvalSettings(n_samples=16, n_projections=8, n_steps=2)
        metrics = evaluate_model(model, model, settings)
        assert metrics["w2_model_vs_teacher"] == 0.0
        assert metrics["smoothness_model"] == metrics["smoothness_teacher"]

    def test_data_reference_adds_keys(self):
        model = tiny_model()
        other = tiny_model(seed=1)
        settings = EvalSettings(n_samples=16, n_projections=8, n_steps=2)
        rng = np.random.default_rng(0)
        data = rng.standard_normal((16, model.seq_len, model.d_state))
        metrics = evaluate_model(model, other, settings, data_samples=data)
        assert {"w2_model_vs_data", "w2_teacher_vs_data"} <= set(metrics)
        assert all(np.isfinite(v) for v in metrics.values())


@functools.lru_cache(maxsize=1)
def _cell_inputs():
    teacher = tiny_model()
    tset = collect(teacher, FlowSchedule.uniform(3), n_trajectories=8, seed=0)
    return teacher, tset


class TestTransferCell:
    def test_row_fields_and_determinism(self):
        teacher, tset = _cell_inputs()
        cfg = TransferConfig(target_linear=1, total_steps=12, batch_size=4,
                             seed=3)
        settings = EvalSettings(n_samples=12, n_projections=8, n_steps=3)
        row = run_transfer_cell(teacher, tset, cfg, settings)
        again = run_transfer_cell(teacher, tset, cfg, settings)
        expected = {"objective", "target_linear", "lam", "reg_enabled", "seed",
                    "n_linear", "r_max_pole_gap", "w2_mixed", "w2_final",
                    "finalization_gap"}
        assert expected <= set(row)
        assert row == again

    def test_precomputed_teacher_samples_match(self):
        teacher, tset = _cell_inputs()
        cfg = TransferConfig(target_linear=1, total_steps=8, batch_size=4,
                             seed=1)
        settings = EvalSettings(n_samples=12, n_projections=8, n_steps=3)
        cached = draw_samples(teacher, settings.n_samples, settings.noise_seed,
                              settings.n_steps)
        assert (run_transfer_cell(teacher, tset, cfg, settings) ==
                run_transfer_cell(teacher, tset, cfg, settings, cached))


class TestAggregateCells:
    def test_seed_averaging(self):
        rows = [
            {"cell": "a", "seed": 0, "w2_mixed": 1.0, "w2_final": 2.0,
             "finalization_gap": 0.1},
            {"cell": "a", "seed": 1, "w2_mixed": 3.0, "w2_final": 4.0,
             "finalization_gap": 0.3},
            {"cell": "b", "seed": 0, "w2_mixed": 5.0, "w2_final": 6.0,
             "finalization_gap": 0.5},
        ]
        agg = {row["cell"]: row for row in aggregate_cells(rows)}
        assert agg["a"]["n_seeds"] == 2
        assert agg["a"]["w2_mixed_mean"] == pytest.approx(2.0)
        assert agg["a"]["w2_final_mean"] == pytest.approx(3.0)
        assert agg["b"]["w2_final_mean"] == pytest.approx(6.0)
