import numpy as np
import pytest

from decodebench.domain import RunRecord, ScoreRecord
from decodebench.ranking import (
    RankingError,
    aggregate_core,
    aggregate_full,
    build_rank_table,
    emit_report,
    kendall_tau,
    rank_std_within_task,
    rank_within_task,
)


def make_record(model, task, dataset, seed, value, metric="BalancedAcc",
                dummy=0.5, perfect=1.0, status="ok", overlap=False):
    score = ScoreRecord(metric_name=metric, value=value, dummy_value=dummy,
                        perfect_value=perfect,
                        normalized=(value - dummy) / (perfect - dummy),
                        seed=seed, n_test=40)
    return RunRecord(model_id=model, task_id=task, dataset_id=dataset, seed=seed,
                     config_hash=123, scores=(score,), status=status,
                     pretrain_overlap=overlap)


class TestRankWithinTask:
    def test_basic_ordering(self):
        ranks = rank_within_task({"a": 0.9, "b": 0.7, "c": 0.8})
        assert ranks == {"a": 1.0, "b": 3.0, "c": 2.0}

    def test_average_ties(self):
        ranks = rank_within_task({"a": 0.9, "b": 0.9, "c": 0.5})
        assert ranks == {"a": 1.5, "b": 1.5, "c": 3.0}

    def test_single_model_error(self):
        with pytest.raises(RankingError):
            rank_within_task({"a": 0.9})

    def test_lower_better(self):
        ranks = rank_within_task({"a": 2.0, "b": 1.0}, higher_better=False)
        assert ranks == {"a": 2.0, "b": 1.0}

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(0)
        scores = {f"m{i}": float(v) for i, v in enumerate(rng.normal(size=6))}
        transformed = {m: float(np.exp(3 * v) + 1) for m, v in scores.items()}
        assert rank_within_task(scores) == rank_within_task(transformed)

    def test_rank_mass_conserved(self):
        rng = np.random.default_rng(1)
        for trial in range(20):
            m = int(rng.integers(2, 8))
            values = rng.integers(0, 3, size=m).astype(float)  # force ties
            ranks = rank_within_task({f"m{i}": float(values[i]) for i in range(m)})
            assert np.isclose(sum(ranks.values()), m * (m + 1) / 2)


class TestKendall:
    def test_identity(self):
        a = {"x": 1.0, "y": 2.0, "z": 3.0}
        tau, p = kendall_tau(a, a)
        assert tau == 1.0

    def test_reversal(self):
        a = {"x": 1.0, "y": 2.0, "z": 3.0}
        b = {"x": 3.0, "y": 2.0, "z": 1.0}
        tau, _ = kendall_tau(a, b)
        assert tau == -1.0

    def test_worked_example(self):
        a = {"m0": 1, "m1": 2, "m2": 3, "m3": 4}
        b = {"m0": 1, "m1": 2, "m2": 4, "m3": 3}
        tau, p = kendall_tau(a, b)
        assert np.isclose(tau, (5 - 1) / 6)
        assert 0 < p <= 1

    def test_mismatched_sets(self):
        with pytest.raises(RankingError, match="differ"):
            kendall_tau({"a": 1, "b": 2}, {"a": 1, "c": 2})

    def test_bounds_with_ties(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = int(rng.integers(3, 9))
            a = {f"m{i}": float(rng.integers(0, 3)) for i in range(n)}
            b = {f"m{i}": float(rng.integers(0, 3)) for i in range(n)}
            try:
                tau, _ = kendall_tau(a, b)
            except RankingError:
                continue
            assert -1.0 <= tau <= 1.0 or np.isnan(tau)

    def test_matches_scipy_with_ties(self):
        from scipy import stats

        rng = np.random.default_rng(3)
        for _ in range(300):
            n = int(rng.integers(3, 16))
            a = rng.integers(0, 5, size=n).astype(float)
            b = rng.integers(0, 5, size=n).astype(float)
            mine_t, mine_p = kendall_tau(
                {f"m{i}": a[i] for i in range(n)},
                {f"m{i}": b[i] for i in range(n)})
            ref = stats.kendalltau(a, b, variant="b", method="asymptotic")
            if np.isnan(mine_t):
                assert np.isnan(ref.statistic)
                continue
            assert abs(mine_t - ref.statistic) < 1e-12
            assert abs(mine_p - ref.pvalue) < 1e-12


class TestRankStd:
    def test_constant_ranks_zero(self):
        assert rank_std_within_task([2, 2, 2, 2, 2]) == 0.0

    def test_worked_sample_std(self):
        assert np.isclose(rank_std_within_task([1, 5], floor=2), 2.828, atol=1e-3)

    def test_floor_exclusion(self):
        assert rank_std_within_task([1, 2, 3, 4], floor=5) is None


class TestAggregation:
    def _records(self):
        rows = []
        # 3 models x 2 single-dataset tasks x 3 seeds
        base = {"a": 0.9, "b": 0.8, "c": 0.6}
        for task in ("t1", "t2"):
            for model, v in base.items():
                for seed in range(3):
                    rows.append(make_record(model, task, f"{task}_d0", seed,
                                            v + 0.01 * seed))
        return rows

    def test_mean_rank_over_tasks(self):
        table = build_rank_table(self._records(), variant="core")
        core = aggregate_core(table)
        assert core == {"a": 1.0, "b": 2.0, "c": 3.0}

    def test_full_equals_core_single_dataset(self):
        table = build_rank_table(self._records(), variant="full")
        assert aggregate_full(table) == aggregate_core(table)

    def test_dataset_averaged_task_rank(self):
        rows = []
        # one task, two datasets; model a ranks 1 and 3, model b 2 and 1, c 3 and 2
        values = {"d0": {"a": 0.9, "b": 0.8, "c": 0.7},
                  "d1": {"a": 0.6, "b": 0.9, "c": 0.8}}
        for d, per_model in values.items():
            for m, v in per_model.items():
                rows.append(make_record(m, "t1", d, 0, v))
        table = build_rank_table(rows, variant="full")
        full = aggregate_full(table)
        assert full == {"a": 2.0, "b": 1.5, "c": 2.5}

    def test_missing_cell_recorded(self):
        rows = self._records()
        rows = [r for r in rows if not (r.model_id == "b" and r.task_id == "t2")]
        table = build_rank_table(rows, variant="core")
        assert ("b", "t2", "t2_d0") in table.missing
        core = aggregate_core(table)
        assert core["b"] == 2.0  # mean over t1 only

    def test_failed_records_ignored(self):
        rows = self._records() + [make_record("a", "t1", "t1_d0", 9, 0.0,
                                              status="failed")]
        table = build_rank_table(rows, variant="core")
        assert aggregate_core(table)["a"] == 1.0


class TestEmitReport:
    def _records(self):
        rows = []
        for task in ("t1", "t2"):
            for model, v in (("a", 0.9), ("b", 0.8), ("dummy", 0.5)):
                for seed in range(3):
                    rows.append(make_record(model, task, f"{task}_d0", seed,
                                            v + 0.002 * seed,
                                            overlap=(model == "a" and task == "t1")))
        return rows

    def test_report_files_and_shape(self, tmp_path):
        plot = emit_report(self._records(), "core", tmp_path)
        for name in ("scores.csv", "ranks.csv", "mean_ranks.csv", "rank_std.csv",
                     "kendall.csv", "plot_data.json"):
            assert (tmp_path / name).exists()
        assert len(plot["box"]) == 3
        assert len(plot["bar"]) == 2
        assert plot["schema"] == "report/v1"

    def test_pretrain_overlap_carried(self, tmp_path):
        plot = emit_report(self._records(), "core", tmp_path)
        bar_t1 = next(b for b in plot["bar"] if b["task"] == "t1")
        flags = {m["model"]: m["pretrain_overlap"] for m in bar_t1["models"]}
        assert flags["a"] is True
        assert flags["b"] is False

    def test_byte_identical_reports(self, tmp_path):
        emit_report(self._records(), "core", tmp_path / "r1")
        emit_report(self._records(), "core", tmp_path / "r2")
        for name in ("scores.csv", "ranks.csv", "mean_ranks.csv", "kendall.csv",
                     "plot_data.json"):
            assert ((tmp_path / "r1" / name).read_bytes()
                    == (tmp_path / "r2" / name).read_bytes())

    def test_missing_cell_marked_absent(self, tmp_path):
        rows = [r for r in self._records()
                if not (r.model_id == "b" and r.task_id == "t2")]
        plot = emit_report(rows, "core", tmp_path)
        bar_t2 = next(b for b in plot["bar"] if b["task"] == "t2")
        b_entry = next(m for m in bar_t2["models"] if m["model"] == "b")
        assert b_entry["value"] is None

    def test_inconsistent_seeds_warned_not_fatal(self, tmp_path, caplog):
        import logging

        rows = self._records()
        rows = [r for r in rows if not (r.model_id == "a" and r.seed == 2
                                        and r.task_id == "t1")]
        with caplog.at_level(logging.WARNING, logger="decodebench.ranking"):
            emit_report(rows, "core", tmp_path)
        assert any("inconsistent seed counts" in m for m in caplog.messages)

    def test_sem_in_scores(self, tmp_path):
        emit_report(self._records(), "core", tmp_path)
        text = (tmp_path / "scores.csv").read_text()
        header = text.splitlines()[0].split(",")
        assert header == ["task", "dataset", "model", "metric", "value_mean",
                          "sem", "normalized", "max_normalized",
                          "pretrain_overlap"]
