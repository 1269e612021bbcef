"""Command-line interface.

    nb <modality> <task> [--download | --prepare]   # or run the task directly
    nb list-tasks
    nb list-models
    nb run --models a,b --tasks x,y --seeds 3 --set key=value --force
    nb report --variant core|full --out <dir>
    nb compact-store

The data/cache/store root comes from $NB_ROOT (default ./nb_root). Exit code
is 0 iff no experiment failed.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import bench, ranking
from .config import apply_overrides, builtin_task_registry
from .store import ResultsStore

logger = logging.getLogger(__name__)

MODALITIES = ("eeg", "meg", "fmri")


def _store() -> ResultsStore:
    return ResultsStore(bench.nb_root() / "store" / "records.jsonl")


def _parse_runner_flags(items) -> dict[str, bench.RunnerModel]:
    runners = {}
    for item in items or []:
        if "=" not in item:
            raise SystemExit(f"--runner needs model_id=command, got {item!r}")
        model_id, _, command = item.partition("=")
        runners[model_id] = bench.RunnerModel(model_id, tuple(command.split()))
    return runners


def _apply_task_overrides(tasks, overrides):
    if not overrides:
        return tasks
    return [apply_overrides(t, overrides) for t in tasks]


def _run_experiments(task_specs, model_ids, seeds, force, workers, runners,
                     variant="core") -> int:
    store = _store()
    plan = bench.plan(variant, model_ids, task_specs,
                      seeds=seeds, store=store, force=force, runners=runners)
    if force and plan:
        # forced reruns would collide with the uniqueness key; rewrite the
        # store without the re-planned cells first
        planned_keys = {(e.model_id, e.task_id, e.dataset_id, e.seed,
                         e.config_hash) for e in plan}
        if planned_keys & store.keys():
            store.rewrite([r for r in store.records()
                           if r.key not in planned_keys])
    print(f"planned {len(plan)} experiment(s)")
    ctx = bench.BenchContext(runners=runners)
    results = bench.run(plan, ctx, store, workers=workers, tasks=task_specs)
    failed = [r for r in results if r.status != "ok"]
    for r in results:
        headline = r.scores[0] if r.scores else None
        line = (f"{r.task_id}/{r.dataset_id} {r.model_id} seed={r.seed}: "
                + (f"{headline.metric_name}={headline.value:.4f} "
                   f"(normalized {headline.normalized:+.3f})" if headline
                   else f"{r.status}: {r.error}"))
        print(line)
    if failed:
        print(f"{len(failed)} experiment(s) failed", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="nb", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command")

    sub.add_parser("list-tasks")
    sub.add_parser("list-models")
    sub.add_parser("compact-store")

    p_run = sub.add_parser("run")
    p_run.add_argument("--models", default=",".join(bench.INTERNAL_MODELS))
    p_run.add_argument("--tasks", default=None)
    p_run.add_argument("--seeds", type=int, default=None,
                       help="number of seeds (0..n-1); default: task trainer seeds")
    p_run.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE")
    p_run.add_argument("--force", action="store_true")
    p_run.add_argument("--workers", type=int, default=None)
    p_run.add_argument("--variant", choices=("core", "full"), default="core")
    p_run.add_argument("--runner", action="append", default=[],
                       metavar="MODEL_ID=COMMAND",
                       help="register an external protocol-v1 runner")

    p_report = sub.add_parser("report")
    p_report.add_argument("--variant", choices=("core", "full"), default="core")
    p_report.add_argument("--out", required=True)

    # `nb <modality> <task> [--download|--prepare]`
    for modality in MODALITIES:
        p_mod = sub.add_parser(modality)
        p_mod.add_argument("task")
        p_mod.add_argument("--download", action="store_true")
        p_mod.add_argument("--prepare", action="store_true")
        p_mod.add_argument("--set", dest="overrides", action="append", default=[])

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_help()
        return 0

    if args.command == "list-tasks":
        for t in builtin_task_registry():
            datasets = ",".join(t.dataset_ids)
            print(f"{t.task_id:28s} {t.objective.value:26s} "
                  f"n_outputs={t.n_outputs} datasets={datasets}")
        return 0

    if args.command == "list-models":
        for m in bench.INTERNAL_MODELS:
            print(m)
        return 0

    if args.command == "compact-store":
        kept = _store().compact()
        print(f"store compacted; {kept} record(s) kept")
        return 0

    if args.command == "run":
        tasks = bench.resolve_tasks(args.tasks.split(",") if args.tasks else None)
        tasks = _apply_task_overrides(tasks, args.overrides)
        seeds = list(range(args.seeds)) if args.seeds is not None else None
        runners = _parse_runner_flags(args.runner)
        return _run_experiments(tasks, args.models.split(","), seeds, args.force,
                                args.workers, runners, variant=args.variant)

    if args.command == "report":
        records = _store().records()
        if not records:
            print("results store is empty; run experiments first", file=sys.stderr)
            return 1
        ranking.emit_report(records, args.variant, args.out)
        print(f"report written to {args.out}")
        return 0

    if args.command in MODALITIES:
        tasks = bench.resolve_tasks([args.task])
        tasks = _apply_task_overrides(tasks, args.overrides)
        task = tasks[0]
        if args.download:
            if task.source.is_synthetic:
                print(f"{task.task_id}: synthetic source, nothing to download")
                return 0
            print(f"{task.task_id}: automated downloads are not supported; place "
                  f"recordings under {task.source.root}", file=sys.stderr)
            return 1
        if args.prepare:
            ctx = bench.BenchContext()
            for dataset_id in task.dataset_ids:
                cache_path, manifest_path = ctx.prepare(task, dataset_id)
                print(f"prepared {dataset_id}: {cache_path}")
            return 0
        return _run_experiments([task], list(bench.INTERNAL_MODELS), None, False,
                                None, {})

    parser.error(f"unknown command {args.command!r}")
    return 2


if __name__ == "__main__":
    sys.exit(main())
