"""Cross-model comparison: per-task ranks, Core/Full aggregation, rank
dispersion, Kendall's tau, and deterministic report emission."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .domain import RunRecord
from .metrics import metric_info, normalize_max, sem_across_seeds

logger = logging.getLogger(__name__)

RANK_STD_FLOOR = 5  # minimum datasets per task for rank-std reporting
REPORT_SCHEMA = "report/v1"


class RankingError(ValueError):
    pass


def rank_within_task(scores: dict[str, float], higher_better: bool = True
                     ) -> dict[str, float]:
    """Rank 1 = best; ties get the average of their positions."""
    if len(scores) < 2:
        raise RankingError(f"ranking needs >= 2 models, got {len(scores)}")
    models = sorted(scores)
    values = np.array([scores[m] for m in models], dtype=np.float64)
    keyed = values if higher_better else -values
    order = np.argsort(-keyed, kind="stable")
    ranks = np.empty(len(models), dtype=np.float64)
    pos = 0
    while pos < len(models):
        end = pos
        while end + 1 < len(models) and keyed[order[end + 1]] == keyed[order[pos]]:
            end += 1
        avg = (pos + end) / 2.0 + 1.0
        for k in range(pos, end + 1):
            ranks[order[k]] = avg
        pos = end + 1
    return {m: float(r) for m, r in zip(models, ranks)}


def kendall_tau(ranking_a: dict[str, float], ranking_b: dict[str, float]
                ) -> tuple[float, float]:
    """Tie-corrected tau_b with a two-sided normal-approximation p-value.

    The statistic uses exact integer pair counts (so identical rankings give
    exactly 1.0 and reversals exactly -1.0); the p-value follows the standard
    tie-adjusted normal approximation of the concordant-discordant difference.
    """
    if set(ranking_a) != set(ranking_b):
        raise RankingError(
            f"model sets differ: {sorted(set(ranking_a) ^ set(ranking_b))}"
        )
    if len(ranking_a) < 2:
        raise RankingError("kendall_tau needs >= 2 models")
    models = sorted(ranking_a)
    a = [float(ranking_a[m]) for m in models]
    b = [float(ranking_b[m]) for m in models]
    n = len(models)
    conc = disc = ties_a = ties_b = 0
    for i in range(n):
        for j in range(i + 1, n):
            xa = (a[i] > a[j]) - (a[i] < a[j])
            xb = (b[i] > b[j]) - (b[i] < b[j])
            if xa == 0:
                ties_a += 1
            if xb == 0:
                ties_b += 1
            if xa * xb > 0:
                conc += 1
            elif xa * xb < 0:
                disc += 1
    n0 = n * (n - 1) // 2
    denom2 = (n0 - ties_a) * (n0 - ties_b)
    if denom2 == 0:
        return float("nan"), float("nan")
    tau = (conc - disc) / math.sqrt(denom2)
    return tau, _tau_pvalue(a, b, conc - disc, n)


def _tie_stats(values) -> tuple[int, int, int]:
    """(sum t(t-1)/2, sum t(t-1)(t-2), sum t(t-1)(2t+5)) over tie groups."""
    counts: dict = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    t1 = sum(t * (t - 1) // 2 for t in counts.values())
    t2 = sum(t * (t - 1) * (t - 2) for t in counts.values())
    t3 = sum(t * (t - 1) * (2 * t + 5) for t in counts.values())
    return t1, t2, t3


def _tau_pvalue(a, b, con_minus_dis: int, n: int) -> float:
    if n < 3:
        return float("nan")
    x1, x2, x3 = _tie_stats(a)
    y1, y2, y3 = _tie_stats(b)
    m = n * (n - 1)
    var = ((m * (2 * n + 5) - x3 - y3) / 18.0
           + (2.0 * x1 * y1) / m
           + (x2 * y2) / (9.0 * m * (n - 2)))
    if var <= 0:
        return float("nan")
    z = con_minus_dis / math.sqrt(var)
    return math.erfc(abs(z) / math.sqrt(2.0))


def _registry_core_datasets() -> dict[str, str]:
    from .config import builtin_task_registry

    return {t.task_id: t.dataset_ids[0] for t in builtin_task_registry()}


def rank_std_within_task(ranks_over_datasets, floor: int = RANK_STD_FLOOR
                         ) -> float | None:
    """Sample std of one model's ranks across a task's datasets; None when the
    task has fewer datasets than the floor (excluded, recorded by the caller)."""
    ranks = np.asarray(ranks_over_datasets, dtype=np.float64)
    if ranks.size < floor:
        return None
    return float(ranks.std(ddof=1))


# ---------------------------------------------------------------------------
# Rank tables from run records
# ---------------------------------------------------------------------------

@dataclass
class RankTable:
    models: tuple[str, ...]
    tasks: tuple[str, ...]
    datasets: dict[str, tuple[str, ...]]  # task -> dataset ids
    headline_metric: dict[str, str]  # task -> metric name
    scores: dict  # (model, task, dataset) -> representative (seed-mean) value
    sems: dict  # (model, task, dataset) -> SEM across seeds (None if 1 seed)
    norm_scores: dict  # (model, task, dataset) -> normalized representative value
    max_norm_scores: dict = field(default_factory=dict)
    ranks: dict = field(default_factory=dict)  # (task, dataset) -> {model: rank}
    missing: list = field(default_factory=list)  # (model, task, dataset)
    pretrain_overlap: dict = field(default_factory=dict)  # (model, task, dataset) -> bool


def build_rank_table(records: list[RunRecord], variant: str = "core",
                     core_datasets: dict[str, str] | None = None) -> RankTable:
    """Representative scores (seed means of the first metric), ranks, and
    max-normalized scores from a store snapshot.

    `core_datasets` names each task's core dataset; without it the core
    variant falls back to the lexicographically first dataset id.
    """
    if variant not in ("core", "full"):
        raise RankingError(f"variant must be core or full, got {variant!r}")
    if core_datasets is None:
        core_datasets = _registry_core_datasets()
    ok = [r for r in records if r.status == "ok" and r.scores]
    if not ok:
        raise RankingError("no successful records to rank")
    models = tuple(sorted({r.model_id for r in ok}))
    tasks = tuple(sorted({r.task_id for r in ok}))
    datasets: dict[str, tuple[str, ...]] = {}
    for t in tasks:
        ds = sorted({r.dataset_id for r in ok if r.task_id == t})
        if variant == "core":
            core = core_datasets.get(t, ds[0])
            datasets[t] = (core,) if core in ds else tuple(ds[:1])
        else:
            datasets[t] = tuple(ds)

    table = RankTable(models=models, tasks=tasks, datasets=datasets,
                      headline_metric={}, scores={}, sems={}, norm_scores={})
    for t in tasks:
        sample = next(r for r in ok if r.task_id == t)
        table.headline_metric[t] = sample.scores[0].metric_name

    for t in tasks:
        metric = table.headline_metric[t]
        for d in datasets[t]:
            cell_scores: dict[str, float] = {}
            for m in models:
                runs = [r for r in ok
                        if r.model_id == m and r.task_id == t and r.dataset_id == d]
                values, norm_values = [], []
                overlap = False
                for r in runs:
                    for s in r.scores:
                        if s.metric_name == metric:
                            values.append(s.value)
                            norm_values.append((s.dummy_value, s.perfect_value))
                    overlap = overlap or r.pretrain_overlap
                if not values:
                    table.missing.append((m, t, d))
                    continue
                rep = float(np.mean(values))
                dummy, perfect = norm_values[0]
                cell_scores[m] = rep
                table.scores[(m, t, d)] = rep
                table.sems[(m, t, d)] = (sem_across_seeds(values)
                                         if len(values) > 1 else None)
                table.norm_scores[(m, t, d)] = ((rep - dummy) / (perfect - dummy)
                                                if perfect != dummy else 0.0)
                table.pretrain_overlap[(m, t, d)] = overlap
            if len(cell_scores) >= 2:
                info = metric_info(metric)
                table.ranks[(t, d)] = rank_within_task(cell_scores,
                                                       info.higher_better)
                best = (max if info.higher_better else min)(cell_scores.values())
                for m, v in cell_scores.items():
                    dummy_m = [s.dummy_value for r in ok
                               if r.model_id == m and r.task_id == t and r.dataset_id == d
                               for s in r.scores if s.metric_name == metric]
                    d_val = dummy_m[0]
                    if best != d_val:
                        table.max_norm_scores[(m, t, d)] = normalize_max(v, d_val, best)
    if table.missing:
        logger.warning("missing cells excluded from ranking: %s", table.missing)
    return table


def aggregate_core(table: RankTable) -> dict[str, float]:
    """Mean over tasks of the (single core dataset) rank per model."""
    return _aggregate(table, per_task_dataset_mean=False)


def aggregate_full(table: RankTable) -> dict[str, float]:
    """Mean over tasks of the dataset-averaged rank per model."""
    return _aggregate(table, per_task_dataset_mean=True)


def _aggregate(table: RankTable, per_task_dataset_mean: bool) -> dict[str, float]:
    out = {}
    for m in table.models:
        task_ranks = []
        for t in table.tasks:
            ds_ranks = [table.ranks[(t, d)][m] for d in table.datasets[t]
                        if (t, d) in table.ranks and m in table.ranks[(t, d)]]
            if not ds_ranks:
                continue
            if per_task_dataset_mean:
                task_ranks.append(float(np.mean(ds_ranks)))
            else:
                task_ranks.append(ds_ranks[0])
        if task_ranks:
            out[m] = float(np.mean(task_ranks))
    return out


def rank_std_table(table: RankTable, floor: int = RANK_STD_FLOOR):
    """(model, task) -> rank std across that task's datasets; tasks below the
    floor are excluded and listed separately."""
    stds, excluded = {}, []
    for t in table.tasks:
        n_ds = len(table.datasets[t])
        if n_ds < floor:
            excluded.append((t, n_ds))
            continue
        for m in table.models:
            ranks = [table.ranks[(t, d)][m] for d in table.datasets[t]
                     if (t, d) in table.ranks and m in table.ranks[(t, d)]]
            value = rank_std_within_task(ranks, floor=floor)
            if value is not None:
                stds[(m, t)] = value
    return stds, excluded


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    path.write_bytes(buf.getvalue().encode("utf-8"))


def emit_report(records: list[RunRecord], variant: str, out_dir) -> dict:
    """Write the CSV tables and the versioned JSON plot data; returns the plot
    data. Byte-identical output for identical stores."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = build_rank_table(records, variant=variant)
    seed_counts = {}
    for r in records:
        if r.status == "ok":
            key = (r.task_id, r.dataset_id)
            seed_counts.setdefault(key, {}).setdefault(r.model_id, set()).add(r.seed)
    for key, per_model in sorted(seed_counts.items()):
        counts = {len(v) for v in per_model.values()}
        if len(counts) > 1:
            logger.warning("inconsistent seed counts for %s: %s", key,
                           {m: len(v) for m, v in sorted(per_model.items())})

    score_rows = []
    for t in table.tasks:
        for d in table.datasets[t]:
            for m in table.models:
                if (m, t, d) not in table.scores:
                    score_rows.append([t, d, m, table.headline_metric[t],
                                       "", "", "", "", ""])
                    continue
                score_rows.append([
                    t, d, m, table.headline_metric[t],
                    table.scores[(m, t, d)], table.sems[(m, t, d)],
                    table.norm_scores[(m, t, d)],
                    table.max_norm_scores.get((m, t, d)),
                    table.pretrain_overlap.get((m, t, d), False),
                ])
    _write_csv(out / "scores.csv",
               ["task", "dataset", "model", "metric", "value_mean", "sem",
                "normalized", "max_normalized", "pretrain_overlap"], score_rows)

    rank_rows = []
    for (t, d), ranks in sorted(table.ranks.items()):
        for m in sorted(ranks):
            rank_rows.append([t, d, m, ranks[m]])
    _write_csv(out / "ranks.csv", ["task", "dataset", "model", "rank"], rank_rows)

    core = aggregate_core(table)
    full = aggregate_full(table)
    chosen = core if variant == "core" else full
    mean_rows = [[m, chosen.get(m), len([1 for t in table.tasks
                                         for d in table.datasets[t]
                                         if (t, d) in table.ranks
                                         and m in table.ranks[(t, d)]])]
                 for m in table.models]
    _write_csv(out / "mean_ranks.csv", ["model", "mean_rank", "n_cells"], mean_rows)

    stds, excluded = rank_std_table(table)
    std_rows = [[m, t, len(table.datasets[t]), v]
                for (m, t), v in sorted(stds.items())]
    _write_csv(out / "rank_std.csv", ["model", "task", "n_datasets", "rank_std"],
               std_rows)

    common = sorted(set(core) & set(full))
    if len(common) >= 2:
        tau, p = kendall_tau({m: core[m] for m in common},
                             {m: full[m] for m in common})
        tau = None if np.isnan(tau) else tau
        p = None if np.isnan(p) else p
    else:
        tau, p = None, None
    _write_csv(out / "kendall.csv", ["comparison", "tau_b", "p_value"],
               [["core_vs_full", tau, p]])

    plot_data = {
        "schema": REPORT_SCHEMA,
        "variant": variant,
        "bar": [
            {
                "task": t, "dataset": d, "metric": table.headline_metric[t],
                "models": [
                    {
                        "model": m,
                        "value": table.scores.get((m, t, d)),
                        "sem": table.sems.get((m, t, d)),
                        "normalized": table.norm_scores.get((m, t, d)),
                        "pretrain_overlap": table.pretrain_overlap.get((m, t, d), False),
                    }
                    for m in table.models
                ],
            }
            for t in table.tasks for d in table.datasets[t]
        ],
        "box": [
            {
                "model": m,
                "ranks": [table.ranks[(t, d)][m]
                          for t in table.tasks for d in table.datasets[t]
                          if (t, d) in table.ranks and m in table.ranks[(t, d)]],
                "mean_rank": chosen.get(m),
            }
            for m in table.models
        ],
        "rank_scatter": {
            "models": common,
            "core": [core[m] for m in common],
            "full": [full[m] for m in common],
            "tau_b": tau,
            "p_value": p,
        },
        "rank_std": [
            {"model": m, "task": t, "std": v} for (m, t), v in sorted(stds.items())
        ],
        "rank_std_excluded_tasks": [
            {"task": t, "n_datasets": n} for t, n in sorted(excluded)
        ],
    }
    (out / "plot_data.json").write_bytes(
        json.dumps(plot_data, sort_keys=True, indent=1).encode("utf-8"))
    return plot_data
