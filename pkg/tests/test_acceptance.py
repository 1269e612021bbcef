"""Acceptance suite: one test per criterion, each printing a PASS line.

The end-to-end benchmark grid (5 internal models x 5 synthetic tasks covering
every objective kind x 3 seeds) runs once per store in a module fixture; the
determinism criterion repeats it from a second clean state and compares.
"""

import math
import statistics
import time

import numpy as np
import pytest

from decodebench import bench, dsp, metrics, ranking, spd
from decodebench.baseline import dummy_fit_predict, logistic_fit_cv, ridge_fit_cv
from decodebench.config import builtin_task_registry, get_task
from decodebench.domain import (
    ClassIndex,
    ClassProbs,
    EmbeddingPred,
    LabelProbs,
    LabelVector,
    ObjectiveKind,
    Recording,
    ScalarPred,
)
from decodebench.metrics import balanced_accuracy, macro_f1, pearson_r, topk_accuracy
from decodebench.optim import (
    OptimizerState,
    adamw_step,
    cosine_warmup_lr,
    loss_clip,
)
from decodebench.split import apply_split
from decodebench.store import ResultsStore
from tests.conftest import make_example_set

E2E_TASKS = ("evoked_synthetic", "freqtag_synthetic", "artifact_synthetic",
             "reaction_time_synthetic", "image_synthetic")
E2E_SEEDS = (0, 1, 2)


def _ok(name: str):
    print(f"ACCEPTANCE {name}: PASS")


# ---------------------------------------------------------------------------
# Criterion: normalization endpoints on every synthetic task
# ---------------------------------------------------------------------------

def _perfect_predictions(objective, targets):
    if objective in (ObjectiveKind.BINARY, ObjectiveKind.MULTICLASS):
        n = max(t.value for t in targets) + 1
        out = []
        for t in targets:
            probs = np.zeros(n)
            probs[t.value] = 1.0
            out.append(ClassProbs(probs))
        return out
    if objective is ObjectiveKind.MULTILABEL:
        return [LabelProbs(np.asarray(t.values, dtype=np.float64)) for t in targets]
    if objective is ObjectiveKind.REGRESSION:
        return [ScalarPred(t.value) for t in targets]
    return [EmbeddingPred(np.asarray(t.values, dtype=np.float64)) for t in targets]


def test_criterion_normalization_endpoints(tmp_path, monkeypatch):
    monkeypatch.setenv("NB_ROOT", str(tmp_path / "root"))
    ctx = bench.BenchContext()
    for task in builtin_task_registry():
        dataset_id = task.dataset_ids[0]
        es, _ = ctx.example_set(task, dataset_id)
        refs = ctx.dummy_reference(task, dataset_id)
        test_idx = es.indices("test")
        fit_idx = np.concatenate([es.indices("train"), es.indices("valid")])
        fit_targets = [es.targets[i] for i in fit_idx]
        test_targets = [es.targets[i] for i in test_idx]
        subjects = [es.subject_ids[i] for i in test_idx]
        concepts = [es.concept_ids[i] for i in test_idx]

        # dummy representative value normalizes to exactly 0
        per_seed = {m: [] for m in task.metric_names}
        for seed in task.trainer.seeds:
            preds = dummy_fit_predict(fit_targets, task.objective,
                                      len(test_targets), seed=seed)
            vals = metrics.evaluate_predictions(task.objective, test_targets,
                                                preds, task.metric_names,
                                                subject_ids=subjects,
                                                concept_ids=concepts)
            for m, v in vals.items():
                per_seed[m].append(v)
        for m in task.metric_names:
            rep = float(np.mean(per_seed[m]))
            s_dummy = refs[m]
            s_perfect = metrics.metric_info(m).perfect_value
            normalized = metrics.normalize_score(rep, s_dummy, s_perfect)
            assert abs(normalized) <= 1e-12, (task.task_id, m, normalized)

        # a perfect-prediction oracle normalizes to exactly 1
        perfect = _perfect_predictions(task.objective, test_targets)
        vals = metrics.evaluate_predictions(task.objective, test_targets, perfect,
                                            task.metric_names,
                                            subject_ids=subjects,
                                            concept_ids=concepts)
        for m in task.metric_names:
            s_dummy = refs[m]
            s_perfect = metrics.metric_info(m).perfect_value
            normalized = metrics.normalize_score(vals[m], s_dummy, s_perfect)
            assert abs(normalized - 1.0) <= 1e-12, (task.task_id, m, normalized)
    _ok("normalization endpoints (dummy=0, perfect=1) on every synthetic task")


# ---------------------------------------------------------------------------
# Criterion: metric oracles vs brute force, 1000 instances each
# ---------------------------------------------------------------------------

def _bf_balanced_accuracy(y_true, y_pred):
    recalls = []
    for c in sorted(set(y_true)):
        hits = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        total = sum(1 for t in y_true if t == c)
        recalls.append(hits / total)
    return sum(recalls) / len(recalls)


def _bf_macro_f1(y_true, y_pred):
    n_labels = len(y_true[0])
    f1s = []
    for c in range(n_labels):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t[c] and p[c])
        fp = sum(1 for t, p in zip(y_true, y_pred) if not t[c] and p[c])
        fn = sum(1 for t, p in zip(y_true, y_pred) if t[c] and not p[c])
        f1s.append(2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0)
    return sum(f1s) / n_labels


def _bf_pearson(y, p):
    n = len(y)
    my = math.fsum(y) / n
    mp = math.fsum(p) / n
    num = math.fsum((yi - my) * (pi - mp) for yi, pi in zip(y, p))
    dy = math.sqrt(math.fsum((yi - my) ** 2 for yi in y))
    dp = math.sqrt(math.fsum((pi - mp) ** 2 for pi in p))
    return num / (dy * dp) if dy and dp else 0.0


def _bf_topk(preds, cands, true_idx, k):
    hits, ranks = 0, []
    for row, ti in zip(preds, true_idx):
        nr = math.sqrt(sum(v * v for v in row)) or 1.0
        sims = []
        for j, cand in enumerate(cands):
            nc = math.sqrt(sum(v * v for v in cand)) or 1.0
            sims.append((-sum(a * b for a, b in zip(row, cand)) / (nr * nc), j))
        order = sorted(range(len(cands)), key=lambda j: sims[j])
        rank = order.index(ti) + 1
        ranks.append(rank)
        hits += rank <= k
    return hits / len(preds), statistics.median(ranks)


def _bf_tau_b(a, b):
    n = len(a)
    conc = disc = ties_a = ties_b = 0
    for i in range(n):
        for j in range(i + 1, n):
            xa, xb = a[i] - a[j], b[i] - b[j]
            if xa == 0:
                ties_a += 1
            if xb == 0:
                ties_b += 1
            if xa * xb > 0:
                conc += 1
            elif xa * xb < 0:
                disc += 1
    n0 = n * (n - 1) // 2
    denom = math.sqrt((n0 - ties_a) * (n0 - ties_b))
    return (conc - disc) / denom if denom else float("nan")


def test_criterion_metric_oracles():
    rng = np.random.default_rng(12345)
    for _ in range(1000):
        n = int(rng.integers(2, 33))
        c = int(rng.integers(2, 7))
        y = rng.integers(0, c, size=n)
        y[rng.integers(0, n)] = rng.integers(0, c)  # keep arbitrary
        p = rng.integers(0, c, size=n)
        got = balanced_accuracy(y, p)
        want = _bf_balanced_accuracy(list(y), list(p))
        assert abs(got - want) <= 1e-9

        yl = rng.random((n, c)) < 0.4
        pl = rng.random((n, c)) < 0.4
        assert abs(macro_f1(yl, pl) - _bf_macro_f1(yl.tolist(), pl.tolist())) <= 1e-9

        yv = rng.normal(size=n)
        pv = rng.normal(size=n)
        assert abs(pearson_r(yv, pv) - _bf_pearson(list(yv), list(pv))) <= 1e-9

    for _ in range(1000):
        m = int(rng.integers(2, 9))
        d = int(rng.integers(2, 7))
        nq = int(rng.integers(1, 9))
        cands = rng.normal(size=(m, d))
        preds = rng.normal(size=(nq, d))
        true_idx = rng.integers(0, m, size=nq)
        k = int(rng.integers(1, m + 1))
        got_acc, got_med = topk_accuracy(preds, cands, true_idx, k=k)
        want_acc, want_med = _bf_topk(preds.tolist(), cands.tolist(),
                                      list(true_idx), k)
        assert abs(got_acc - want_acc) <= 1e-9
        assert abs(got_med - want_med) <= 1e-9

    checked = 0
    while checked < 1000:
        n = int(rng.integers(3, 33))
        a = rng.integers(0, 6, size=n).astype(float)
        b = rng.integers(0, 6, size=n).astype(float)
        want = _bf_tau_b(list(a), list(b))
        if math.isnan(want):
            continue
        ranking_a = {f"m{i}": float(a[i]) for i in range(n)}
        ranking_b = {f"m{i}": float(b[i]) for i in range(n)}
        got, _ = ranking.kendall_tau(ranking_a, ranking_b)
        assert abs(got - want) <= 1e-9
        checked += 1
    _ok("metric oracles (balanced acc, macro-F1, Pearson, top-k, tau_b)"
        " vs brute force, 1e-9")


# ---------------------------------------------------------------------------
# Criterion: CLIP loss
# ---------------------------------------------------------------------------

def test_criterion_clip_loss():
    rng = np.random.default_rng(777)
    for _ in range(5):
        zh = rng.normal(size=(1, int(rng.integers(2, 17))))
        z = rng.normal(size=zh.shape)
        loss, _ = loss_clip(zh, z)
        assert abs(loss) <= 1e-12

    worst = 0.0
    for _ in range(10):
        b = int(rng.integers(2, 9))
        d = int(rng.integers(2, 17))
        zh = rng.normal(size=(b, d))
        z = rng.normal(size=(b, d))
        _, grad = loss_clip(zh, z)
        h = 1e-5
        for _ in range(6):  # spot-check entries with central differences
            i, j = int(rng.integers(b)), int(rng.integers(d))
            zp, zm = zh.copy(), zh.copy()
            zp[i, j] += h
            zm[i, j] -= h
            num = (loss_clip(zp, z)[0] - loss_clip(zm, z)[0]) / (2 * h)
            rel = abs(grad[i, j] - num) / max(abs(num), 1e-8)
            worst = max(worst, rel)
    assert worst <= 1e-6

    zh = rng.normal(size=(6, 12))
    z = rng.normal(size=(6, 12))
    base, _ = loss_clip(zh, z)
    for alpha in (0.1, 10.0):
        for row in range(6):
            scaled = zh.copy()
            scaled[row] *= alpha
            assert abs(loss_clip(scaled, z)[0] - base) <= 1e-9
    _ok("CLIP loss (B=1 zero, finite-difference gradient, rescale invariance)")


# ---------------------------------------------------------------------------
# Criterion: optimizer
# ---------------------------------------------------------------------------

def test_criterion_optimizer():
    params = {"w": np.array([1.0])}
    state = OptimizerState()
    adamw_step(params, {"w": np.array([1.0])}, state, lr=0.1, weight_decay=0.05)
    expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8)) - 0.1 * 0.05 * 1.0
    assert abs(params["w"][0] - expected) <= 1e-10

    params = {"w": np.array([1.0])}
    state = OptimizerState()
    for _ in range(500):
        adamw_step(params, {"w": params["w"].copy()}, state, lr=0.05,
                   weight_decay=0.0)
    assert abs(params["w"][0]) < 1e-3

    assert cosine_warmup_lr(0, 1000, 1e-4) == 0.0
    assert cosine_warmup_lr(100, 1000, 1e-4) == 1e-4
    assert abs(cosine_warmup_lr(1000, 1000, 1e-4)) <= 1e-12
    _ok("optimizer (hand-computed AdamW step, quadratic convergence, schedule)")


# ---------------------------------------------------------------------------
# Criterion: DSP specs (measured on impulse responses), runtime < 1 min
# ---------------------------------------------------------------------------

def test_criterion_dsp_specs():
    t0 = time.perf_counter()
    sfreq = 500.0
    n = 2 ** 17
    imp = np.zeros((1, n), dtype=np.float32)
    imp[0, n // 2] = 1.0
    rec = Recording("imp", "s", "e", sfreq, ("c0",), imp)
    freqs = np.fft.rfftfreq(n, 1.0 / sfreq)

    def gain_of(out, f):
        spec = np.abs(np.fft.rfft(out.data[0].astype(np.float64)))
        return spec[np.argmin(np.abs(freqs - f))]

    out = dsp.notch(rec, [50.0, 60.0])
    for f in (50.0, 60.0):
        assert 20 * math.log10(max(gain_of(out, f), 1e-30)) <= -30.0

    low, high = 0.1, 75.0
    out = dsp.bandpass(rec, low, high)
    assert 20 * math.log10(max(gain_of(out, low / 4), 1e-30)) <= -20.0
    edge = min(2 * high, 0.99 * sfreq / 2)
    assert 20 * math.log10(max(gain_of(out, edge), 1e-30)) <= -20.0
    for f in np.linspace(2 * low, 0.8 * high, 5):
        assert abs(20 * math.log10(gain_of(out, f))) <= 3.0

    t = np.arange(int(10 * sfreq)) / sfreq
    for f_test in (10.0, 25.0, 45.0):
        sine = Recording("s", "s", "e", sfreq, ("c0",),
                         np.sin(2 * np.pi * f_test * t)[None, :].astype(np.float32))
        res = dsp.resample(sine, 120.0)
        x = res.data[0].astype(np.float64)
        w = np.hanning(len(x))
        amp = 2 * np.abs(np.fft.rfft(x * w)).max() / w.sum()
        assert abs(amp - 1.0) < 0.01

    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0, f"DSP criterion took {elapsed:.1f}s"
    _ok(f"DSP specs (notch >=30 dB, band edges, resampler <1%) in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# Criterion: SPD stack
# ---------------------------------------------------------------------------

def test_criterion_spd_stack():
    rng = np.random.default_rng(99)

    def rand_spd(c):
        a = rng.normal(size=(c, c))
        return a @ a.T / c + 0.2 * np.eye(c)

    p = rand_spd(4)
    assert np.abs(spd.riemannian_mean([p, p]) - p).max() <= 1e-8
    d = np.diag([3.0, 0.25, 1.5])
    assert np.abs(spd.riemannian_mean([d, np.linalg.inv(d)]) - np.eye(3)).max() <= 1e-8
    mats = [rand_spd(3) for _ in range(6)]
    a = rng.normal(size=(3, 3)) + 0.6 * np.eye(3)
    lhs = spd.riemannian_mean([a.T @ m @ a for m in mats])
    rhs = a.T @ spd.riemannian_mean(mats) @ a
    assert np.abs(lhs - rhs).max() <= 1e-6

    ref = rand_spd(5)
    assert np.abs(spd.tangent_project(ref, ref)).max() <= 1e-9

    y = rng.integers(0, 2, size=150)
    x = rng.normal(size=(150, 2)) + 5.0 * np.stack([y, -y.astype(float)], axis=1)
    model = logistic_fit_cv(x, y)
    assert balanced_accuracy(y, model.predict(x)) == 1.0

    xr = rng.normal(size=(200, 1))
    yr = 2.0 * xr[:, 0] + rng.normal(0, 0.01, size=200)
    ridge = ridge_fit_cv(xr, yr)
    slope = ridge.weights[0, 0] / ridge.scaler.scale[0]
    assert abs(slope - 2.0) <= 0.05
    xs = ridge.scaler.transform(xr)
    xc = xs - xs.mean(axis=0)
    yc = yr - yr.mean()
    oracle = np.linalg.solve(xc.T @ xc + ridge.alpha * np.eye(1), xc.T @ yc[:, None])
    assert np.abs(ridge.weights - oracle).max() <= 1e-8
    _ok("SPD stack (Karcher properties, tangent zero, logistic 1.0, ridge slope)")


# ---------------------------------------------------------------------------
# Criterion: split invariants over 1000 randomized policies
# ---------------------------------------------------------------------------

def test_criterion_split_invariants():
    from decodebench.config import SplitPolicy
    from decodebench.domain import TEST, TRAIN, VALID
    from decodebench.split import SplitError, _round_half_up

    rng = np.random.default_rng(4242)
    checked = 0
    while checked < 1000:
        kind = ("Random", "CrossSubject", "LeaveConceptOut")[int(rng.integers(3))]
        n_units = int(rng.integers(3, 15))
        per_unit = int(rng.integers(1, 5))
        n = n_units * per_unit
        test_ratio = float(rng.uniform(0.1, 0.4))
        valid_ratio = float(rng.uniform(0.1, 0.4))
        seed = int(rng.integers(10_000))
        subjects = [f"s{i // per_unit:02d}" for i in range(n)]
        concepts = [f"c{i // per_unit:02d}" for i in range(n)]
        es = make_example_set(n=n, subjects=subjects, concepts=concepts)
        policy = SplitPolicy(kind=kind, test_ratio=test_ratio,
                             valid_ratio=valid_ratio, seed=seed)
        try:
            out = apply_split(es, policy)
        except SplitError:
            continue  # unsatisfiable draw (e.g. ratios too large for n)
        labels = list(out.split_labels)
        assert all(l in (TRAIN, VALID, TEST) for l in labels)
        assert labels.count(TEST) >= 1 and labels.count(TRAIN) >= 1

        if kind == "Random":
            expected = max(1, _round_half_up(test_ratio * n))
            assert labels.count(TEST) == expected
        else:
            tags = subjects if kind == "CrossSubject" else concepts
            by_label = {}
            for tag, l in zip(tags, labels):
                by_label.setdefault(l, set()).add(tag)
            for a in (TRAIN, VALID):
                assert not (by_label.get(a, set()) & by_label.get(TEST, set()))
            expected = max(1, _round_half_up(test_ratio * n_units))
            assert len(by_label.get(TEST, set())) == expected
        checked += 1
    _ok("split invariants (partition, disjointness, rounding) x 1000 policies")


# ---------------------------------------------------------------------------
# Criterion: ranking identities
# ---------------------------------------------------------------------------

def test_criterion_ranking():
    from tests.test_ranking import make_record

    rows = []
    for task in ("t1", "t2", "t3"):
        for model, v in (("a", 0.9), ("b", 0.7), ("c", 0.5)):
            rows.append(make_record(model, task, f"{task}_d0", 0, v))
    table = ranking.build_rank_table(rows, variant="full")
    assert ranking.aggregate_full(table) == ranking.aggregate_core(table)

    a = {f"m{i}": float(i) for i in range(6)}
    rev = {f"m{i}": float(5 - i) for i in range(6)}
    assert ranking.kendall_tau(a, a)[0] == 1.0
    assert ranking.kendall_tau(a, rev)[0] == -1.0

    ranks = ranking.rank_within_task({"a": 0.9, "b": 0.9, "c": 0.5})
    assert ranks == {"a": 1.5, "b": 1.5, "c": 3.0}
    _ok("ranking (full==core single-dataset, tau identities, tie handling)")


# ---------------------------------------------------------------------------
# Criteria: end-to-end synthetic benchmark + determinism
# ---------------------------------------------------------------------------

def _full_benchmark(root):
    store = ResultsStore(root / "store" / "records.jsonl")
    import os

    old = os.environ.get("NB_ROOT")
    os.environ["NB_ROOT"] = str(root)
    try:
        plan = bench.plan("core", list(bench.INTERNAL_MODELS), list(E2E_TASKS),
                          seeds=list(E2E_SEEDS), store=store)
        ctx = bench.BenchContext(root=root)
        t0 = time.perf_counter()
        records = bench.run(plan, ctx, store, workers=min(4, (os.cpu_count() or 1)))
        elapsed = time.perf_counter() - t0
    finally:
        if old is None:
            os.environ.pop("NB_ROOT", None)
        else:
            os.environ["NB_ROOT"] = old
    return records, elapsed, store


@pytest.fixture(scope="module")
def e2e_runs(tmp_path_factory):
    root_a = tmp_path_factory.mktemp("bench_a")
    root_b = tmp_path_factory.mktemp("bench_b")
    records_a, elapsed_a, store_a = _full_benchmark(root_a)
    records_b, elapsed_b, store_b = _full_benchmark(root_b)
    return {
        "a": (records_a, elapsed_a, store_a, root_a),
        "b": (records_b, elapsed_b, store_b, root_b),
    }


def _mean_metric(records, model, task, metric):
    vals = [s.value for r in records if r.model_id == model and r.task_id == task
            and r.status == "ok" for s in r.scores if s.metric_name == metric]
    assert vals, f"no scores for {model}/{task}/{metric}"
    return float(np.mean(vals))


def test_criterion_end_to_end_benchmark(e2e_runs):
    records, elapsed, _, _ = e2e_runs["a"]
    n_expected = len(bench.INTERNAL_MODELS) * len(E2E_TASKS) * len(E2E_SEEDS)
    assert len(records) == n_expected
    failed = [r for r in records if r.status != "ok"]
    assert not failed, f"failed: {[(r.model_id, r.task_id, r.error) for r in failed]}"

    assert elapsed < 600.0, f"benchmark took {elapsed:.0f}s"

    evoked_xdawn = _mean_metric(records, "handcrafted", "evoked_synthetic",
                                "BalancedAcc")
    assert evoked_xdawn >= 0.90, evoked_xdawn
    freqtag = _mean_metric(records, "handcrafted", "freqtag_synthetic",
                           "BalancedAcc")
    assert freqtag >= 0.90, freqtag
    linear_sep = _mean_metric(records, "linear", "evoked_synthetic", "BalancedAcc")
    assert linear_sep >= 0.90, linear_sep
    top5 = _mean_metric(records, "linear", "image_synthetic", "Top5Acc")
    assert top5 >= 0.80, top5

    # the retrieval candidate set really is 100 concepts
    image = [r for r in records if r.task_id == "image_synthetic"][0]
    assert image.scores[0].n_test > 0
    task = get_task("image_synthetic")
    ctx = bench.BenchContext(root=e2e_runs["a"][3])
    es, _ = ctx.example_set(task, "image_a")
    test_concepts = {es.concept_ids[i] for i in es.indices("test")}
    assert len(test_concepts) == 100

    _ok(f"end-to-end benchmark ({len(records)} experiments in {elapsed:.0f}s; "
        f"XdawnTsLR {evoked_xdawn:.3f}, CoSpectraLogLR {freqtag:.3f}, "
        f"linear {linear_sep:.3f}, top-5 {top5:.3f})")


def test_criterion_determinism(e2e_runs):
    records_a, _, store_a, root_a = e2e_runs["a"]
    records_b, _, store_b, root_b = e2e_runs["b"]

    def score_fields(records):
        return {
            (r.model_id, r.task_id, r.dataset_id, r.seed):
                (r.config_hash, r.split_hash, r.status, r.scores)
            for r in records
        }

    assert score_fields(records_a) == score_fields(records_b)

    ranking.emit_report(store_a.records(), "core", root_a / "report")
    ranking.emit_report(store_b.records(), "core", root_b / "report")
    for name in ("scores.csv", "ranks.csv", "mean_ranks.csv", "rank_std.csv",
                 "kendall.csv", "plot_data.json"):
        assert ((root_a / "report" / name).read_bytes()
                == (root_b / "report" / name).read_bytes()), name
    _ok("determinism (two clean-state runs: byte-identical scores and reports)")
