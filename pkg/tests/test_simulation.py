import json
import math

import numpy as np
import pytest
from scipy import stats as sps

from relaxmt.errors import GridFileError, InputError
from relaxmt.pipeline import MethodSpec
from relaxmt.simulation import (
    FieldScenario,
    GridCell,
    SubsetScenario,
    estimate_metrics,
    gen_correlated_field,
    gen_subset_scenario,
    load_grid_file,
    plant_effect,
    random_composition,
    run_experiment_grid,
    write_metrics_csv,
)


class TestComposition:
    def test_partition_properties(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            total = int(rng.integers(5, 200))
            parts = int(rng.integers(1, min(total, 20) + 1))
            sizes = random_composition(total, parts, rng)
            assert sizes.sum() == total
            assert sizes.min() >= 1
            assert sizes.size == parts

    def test_deterministic_for_seed(self):
        a = random_composition(100, 7, np.random.default_rng(5))
        b = random_composition(100, 7, np.random.default_rng(5))
        assert a.tolist() == b.tolist()


class TestSubsetScenario:
    def test_equal_sizes(self):
        sc = SubsetScenario(n_atoms=60, n_subsets=6, n_affected_subsets=2,
                            pi=0.5, delta=1.0, size_mode="equal")
        _, d, _ = gen_subset_scenario(sc, np.random.default_rng(2))
        assert set(d.sizes.tolist()) == {10}

    def test_equal_sizes_must_divide(self):
        with pytest.raises(InputError):
            SubsetScenario(n_atoms=61, n_subsets=6, n_affected_subsets=2,
                           pi=0.5, delta=1.0, size_mode="equal")

    def test_planted_counts_follow_pi(self):
        sc = SubsetScenario(n_atoms=200, n_subsets=20, n_affected_subsets=5,
                            pi=0.5, delta=1.0)
        rng = np.random.default_rng(3)
        totals = []
        for _ in range(500):
            scores, d, truth = gen_subset_scenario(sc, rng)
            totals.append(truth.sum())
        # five subsets of average size 10 at half density: about 25 planted
        assert 18 <= np.mean(totals) <= 32

    def test_strong_effect_everywhere_detected(self):
        sc = SubsetScenario(n_atoms=400, n_subsets=20, n_affected_subsets=20,
                            pi=1.0, delta=10.0)
        rng = np.random.default_rng(4)
        rec = estimate_metrics(MethodSpec(family="awa", base="bonferroni"),
                               sc, 10, rng)
        assert rec.avg_power > 0.99

    def test_null_effect_power_matches_size(self):
        sc = SubsetScenario(n_atoms=300, n_subsets=10, n_affected_subsets=3,
                            pi=0.5, delta=0.0)
        rng = np.random.default_rng(5)
        rec = estimate_metrics(MethodSpec(family="awa", base="bonferroni"),
                               sc, 300, rng)
        # planted atoms are exchangeable with nulls here
        assert rec.avg_power <= 0.05 / 300 * 10 + 0.01


class TestFieldGenerator:
    def test_marginal_variance(self):
        rng = np.random.default_rng(6)
        fields = np.stack([gen_correlated_field(32, 2.0, rng) for _ in range(500)])
        assert abs(fields.var(axis=0).mean() - 1.0) <= 0.15

    @pytest.mark.parametrize("theta,lag", [(2.0, 1), (5.0, 5)])
    def test_lag_correlations(self, theta, lag):
        rng = np.random.default_rng(7)
        fields = np.stack([gen_correlated_field(32, theta, rng) for _ in range(500)])
        cors = []
        for i in range(0, 32, 3):
            for j in range(0, 32 - lag, 3):
                cors.append(np.corrcoef(fields[:, i, j], fields[:, i, j + lag])[0, 1])
        assert abs(np.mean(cors) - math.exp(-lag / theta)) <= 0.05

    def test_dense_path_matches_fft_in_distribution(self):
        rng = np.random.default_rng(8)
        fft_fields = np.stack([gen_correlated_field(32, 2.0, rng, method="fft")
                               for _ in range(500)])
        dense_fields = np.stack([gen_correlated_field(32, 2.0, rng, method="dense")
                                 for _ in range(500)])
        ks = sps.ks_2samp(fft_fields.ravel(), dense_fields.ravel()).statistic
        assert ks < 0.02

    def test_dense_side_limit(self):
        with pytest.raises(InputError):
            gen_correlated_field(64, 2.0, np.random.default_rng(0), method="dense")


class TestPlantEffect:
    def test_zero_fraction_all_null(self):
        rng = np.random.default_rng(9)
        field = gen_correlated_field(16, 2.0, rng)
        scores, truth = plant_effect(field, 0.0, 2.0, rng)
        assert truth.sum() == 0
        # pure noise: bonferroni keeps the expected count near alpha
        from relaxmt.procedures import bonferroni
        from relaxmt.stats import one_sided_pvalue
        counts = []
        for _ in range(300):
            s, _ = plant_effect(field * 0.0, 0.0, 0.0, rng)
            counts.append(bonferroni(np.asarray(one_sided_pvalue(s)), 0.05).sum())
        assert np.mean(counts) <= 0.05 + 3 * np.std(counts) / math.sqrt(300)

    def test_truth_marks_top_values(self):
        rng = np.random.default_rng(10)
        field = gen_correlated_field(16, 2.0, rng)
        scores, truth = plant_effect(field, 0.1, 5.0, rng)
        m1 = round(0.1 * field.size)
        assert truth.sum() == m1
        top = np.argsort(field.ravel())[-m1:]
        assert set(np.nonzero(truth)[0].tolist()) == set(top.tolist())

    def test_planted_atoms_form_spatial_clumps(self):
        rng = np.random.default_rng(11)
        field = gen_correlated_field(64, 5.0, rng)
        _, truth = plant_effect(field, 0.05, 2.0, rng)
        coords = np.argwhere(truth.reshape(64, 64))
        sample = coords[rng.choice(len(coords), size=120, replace=False)]
        d_truth = np.mean([np.hypot(*(a - b)) for a in sample[:60] for b in sample[60:]])
        allc = rng.integers(0, 64, size=(240, 2))
        d_all = np.mean([np.hypot(*(a - b)) for a in allc[:120] for b in allc[120:]])
        assert d_truth < d_all

    def test_bad_fraction(self):
        with pytest.raises(InputError):
            plant_effect(np.zeros((4, 4)), 1.0, 2.0, np.random.default_rng(0))


class TestEstimateMetrics:
    def test_single_replicate_reproducible(self):
        sc = SubsetScenario(n_atoms=80, n_subsets=8, n_affected_subsets=2,
                            pi=0.5, delta=2.0)
        spec = MethodSpec(family="rmnc", base="bonferroni")
        a = estimate_metrics(spec, sc, 1, np.random.default_rng(42))
        b = estimate_metrics(spec, sc, 1, np.random.default_rng(42))
        assert a == b

    def test_awa_ratio_is_one(self):
        sc = SubsetScenario(n_atoms=80, n_subsets=8, n_affected_subsets=2,
                            pi=0.5, delta=2.0)
        rec = estimate_metrics(MethodSpec(family="awa", base="bonferroni"),
                               sc, 20, np.random.default_rng(1))
        assert rec.power_ratio_vs_awa == pytest.approx(1.0)

    def test_power_monotone_in_effect_size(self):
        deltas = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0]
        for fam in ("awa", "rmnc", "rmwc", "rmio"):
            spec = MethodSpec(family=fam, base="bonferroni")
            powers, ses = [], []
            for k, delta in enumerate(deltas):
                sc = SubsetScenario(n_atoms=200, n_subsets=10,
                                    n_affected_subsets=3, pi=0.5, delta=delta)
                rng = np.random.default_rng(np.random.SeedSequence(1000, spawn_key=(k,)))
                rec = estimate_metrics(spec, sc, 150, rng)
                powers.append(rec.avg_power)
                ses.append(rec.avg_power_se)
            for k in range(len(deltas) - 1):
                slack = 2 * math.hypot(ses[k], ses[k + 1])
                assert powers[k + 1] >= powers[k] - slack, (fam, deltas[k])


def test_field_scenario_metrics_smoke():
    sc = FieldScenario(side=16, theta=2.0, effect_fraction=0.05, delta=3.0,
                       block=4)
    rec = estimate_metrics(MethodSpec(family="rmnc", base="bonferroni"),
                           sc, 20, np.random.default_rng(77))
    assert rec.replicates == 20
    assert 0.0 <= rec.avg_power <= 1.0
    assert rec.weight_violations == 0


class TestGridRunner:
    def _cells(self):
        sc = SubsetScenario(n_atoms=60, n_subsets=6, n_affected_subsets=2,
                            pi=0.5, delta=2.0)
        return [GridCell(spec=MethodSpec(family="awa", base="bonferroni"), scenario=sc),
                GridCell(spec=MethodSpec(family="rmnc", base="bonferroni"), scenario=sc)]

    def test_deterministic_rows_and_csv(self, tmp_path):
        rows1 = run_experiment_grid(self._cells(), replicates=10, seed=5)
        rows2 = run_experiment_grid(self._cells(), replicates=10, seed=5)
        assert rows1 == rows2
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_metrics_csv(rows1, p1)
        write_metrics_csv(rows2, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_seed_changes_output(self):
        rows1 = run_experiment_grid(self._cells(), replicates=10, seed=5)
        rows2 = run_experiment_grid(self._cells(), replicates=10, seed=6)
        assert rows1 != rows2

    def test_worker_count_does_not_change_results(self):
        serial = run_experiment_grid(self._cells(), replicates=8, seed=9, workers=1)
        parallel = run_experiment_grid(self._cells(), replicates=8, seed=9, workers=2)
        assert serial == parallel

    def test_empty_grid_rejected(self):
        with pytest.raises(InputError):
            run_experiment_grid([], replicates=1, seed=0)


class TestGridFile:
    def test_load_builtin_smoke(self):
        from relaxmt.cli import _resolve_grid_path
        cells = load_grid_file(_resolve_grid_path("builtin:smoke"))
        assert len(cells) == 2
        assert cells[0].spec.family == "awa"

    def test_malformed_json_diagnoses_position(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"cells": [}')
        with pytest.raises(GridFileError, match="line 1"):
            load_grid_file(path)

    def test_missing_field_diagnosed_with_cell_index(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"cells": [{"method": "awa", "scenario":
                                               {"kind": "subsets", "M": 10}}]}))
        with pytest.raises(GridFileError, match="cell 0"):
            load_grid_file(path)

    def test_unknown_scenario_kind(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"cells": [{"method": "awa",
                                               "scenario": {"kind": "cube"}}]}))
        with pytest.raises(GridFileError, match="cube"):
            load_grid_file(path)
