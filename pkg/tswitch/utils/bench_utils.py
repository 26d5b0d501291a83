"""
Bench runners. A bench run trains one suite per root seed (pre-trained model
on the relabelled mixture, then one fine-tune per task), applies the discard,
binarization and merging operators to the resulting task vectors, and records
test accuracies as rows of a BenchReport.

Two runners exist:
    run_controlled: per-task accuracy of each discard procedure over an alpha
        grid, plus direct merges of the discarded sets
    run_merging_bench: static merges against T-Switch and Auto-Switch at one
        alpha, with routing statistics and an N / C ablation
"""

import csv
import io
import math
import os
from collections import OrderedDict, namedtuple
from dataclasses import dataclass

import numpy as np

from tswitch.algo.binarize import bin_discard, build_pack, storage_report
from tswitch.algo.merge import (
    apply_auto,
    apply_switch,
    direct_merge,
    direct_merge_scale,
    signed_switch_vector,
    task_arithmetic,
    weight_average,
)
from tswitch.algo.pulse import Scope, dare_discard, discard_high, p_discard
from tswitch.algo.router import RouteWeights, SwitchCache, build_query_index, route
from tswitch.models.toy_nets import ModelSpec, ToyMLP
from tswitch.utils import log_utils as LogUtils
from tswitch.utils.dataset import (
    STREAM_DARE,
    STREAM_FINETUNE,
    STREAM_INIT,
    STREAM_PRETRAIN,
    derive_seed,
    gen_suite,
)
from tswitch.utils.errors import DataError, InvariantError
from tswitch.utils.file_utils import atomic_output, write_text_atomic
from tswitch.utils.tensorstore import add_task_vector, compute_task_vector, save_ntc
from tswitch.utils.train_utils import accuracy, evaluate, feature_fn, predict, train

EXPERIMENT_CONTROLLED = "controlled"
EXPERIMENT_MERGE = "merge"
TASK_ALL = "all"

ReportRow = namedtuple("ReportRow", ["experiment", "alpha", "method", "task", "metric", "value", "seed"])


class BenchReport(object):
    """
    Flat table of (experiment, alpha, method, task, metric, value, seed) rows.
    alpha is None where no discard ratio applies; task is a task index or "all"
    for suite-level metrics.
    """

    COLUMNS = ReportRow._fields

    def __init__(self, rows=None):
        self.rows = list(rows or [])

    def __len__(self):
        return len(self.rows)

    def add(self, experiment, alpha, method, task, metric, value, seed):
        value = float(value)
        if not math.isfinite(value):
            raise InvariantError(
                "non-finite {} for {} / {} / task {} (seed {})".format(metric, experiment, method, task, seed)
            )
        alpha = None if alpha is None else float(alpha)
        self.rows.append(ReportRow(experiment, alpha, method, task, metric, value, int(seed)))

    def extend(self, other):
        self.rows.extend(other.rows)

    def select(self, **filters):
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in filters.items())]

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.COLUMNS)
        for r in self.rows:
            writer.writerow(["" if v is None else v for v in r])
        return buf.getvalue()

    def save(self, path):
        write_text_atomic(path, self.to_csv())

    @classmethod
    def from_csv(cls, text):
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if tuple(header or ()) != cls.COLUMNS:
            raise DataError("not a bench report (header {})".format(header), code="CSV_HEADER")
        rows = []
        for line in reader:
            if len(line) != len(cls.COLUMNS):
                raise DataError("malformed report row {}".format(line), code="CSV_ROW")
            experiment, alpha, method, task, metric, value, seed = line
            task = task if task == TASK_ALL else int(task)
            alpha = None if alpha == "" else float(alpha)
            rows.append(ReportRow(experiment, alpha, method, task, metric, float(value), int(seed)))
        return cls(rows)


@dataclass
class TrainedSuite:
    suite: object
    spec: ModelSpec
    pretrained: object
    finetuned: list
    taus: list
    seed: int

    @property
    def K(self):
        return self.suite.K


def prepare_suite(config, seed):
    """
    Generate the suite for @seed and train the pre-trained and fine-tuned models.

    Returns:
        trained (TrainedSuite)
    """
    suite = gen_suite(config, seed)
    spec = ModelSpec(d_in=suite.d_in, d_out=suite.classes, hidden=list(config.model.hidden))

    init = ToyMLP(spec, seed=derive_seed(seed, STREAM_INIT)).to_tensor_set(
        meta={"model_id": "init", "seed": seed}
    )
    LogUtils.log_info("seed {}: pre-training on {} mixture samples".format(seed, len(suite.pretrain)))
    pretrained = train(init, suite.pretrain, config.train.pretrain, derive_seed(seed, STREAM_PRETRAIN), spec=spec)
    pretrained = pretrained.with_meta(model_id="pretrained")

    finetuned, taus = [], []
    for task in LogUtils.custom_tqdm(suite.tasks, desc="fine-tune (seed {})".format(seed)):
        ft = train(
            pretrained,
            task.train,
            config.train.finetune,
            derive_seed(seed, STREAM_FINETUNE, task.task_id),
            spec=spec,
        ).with_meta(model_id="finetuned", task_id=task.task_id)
        finetuned.append(ft)
        taus.append(compute_task_vector(pretrained, ft))
    return TrainedSuite(suite=suite, spec=spec, pretrained=pretrained, finetuned=finetuned, taus=taus, seed=int(seed))


def save_trained_suite(trained, out_dir):
    """
    Dump a trained suite as NTC files so the command line verbs can be driven
    from disk:
        pretrained.ntc, finetuned/task_XX.ntc, examples/task_XX.ntc (unlabeled
        query pool), test/task_XX.ntc (x and y)

    Returns:
        paths (dict): lists of written paths per kind
    """
    paths = OrderedDict(pretrained=[], finetuned=[], examples=[], test=[])
    target = os.path.join(out_dir, "pretrained.ntc")
    save_ntc(trained.pretrained, target)
    paths["pretrained"].append(target)
    for task, ft in zip(trained.suite.tasks, trained.finetuned):
        fname = "task_{:02d}.ntc".format(task.task_id)
        meta = {"task_id": task.task_id, "seed": trained.seed}
        for kind, tensor_set in (
            ("finetuned", ft),
            ("examples", task.query.to_tensor_set(meta=meta)),
            ("test", task.test.to_tensor_set(meta=meta)),
        ):
            target = os.path.join(out_dir, kind, fname)
            save_ntc(tensor_set, target)
            paths[kind].append(target)
    return paths


def _task_accs(trained, params_per_task):
    return [
        evaluate(params, trained.spec, task.test) for task, params in zip(trained.suite.tasks, params_per_task)
    ]


def _merged_accs(trained, merged):
    return _task_accs(trained, [merged] * trained.K)


def _add_task_rows(report, experiment, alpha, method, accs, seed, metric="acc"):
    for task_id, acc in enumerate(accs):
        report.add(experiment, alpha, method, task_id, metric, acc, seed)


# controlled experiment


def controlled_rows(trained, alphas, merge_alphas=(), scope=Scope.GLOBAL, report=None):
    """
    Rows of the controlled experiment for one trained suite.

    Per task and alpha: accuracy of theta + tau' for tau' produced by P-Discard,
    discard-high, DARE and Bin-Discard. Per merge alpha: accuracy of the direct
    merge of the P-Discard, DARE and Bin-Discard sets.
    """
    report = BenchReport() if report is None else report
    exp, seed, theta = EXPERIMENT_CONTROLLED, trained.seed, trained.pretrained

    _add_task_rows(report, exp, None, "pretrained", _merged_accs(trained, theta), seed)
    _add_task_rows(report, exp, None, "finetuned", _task_accs(trained, trained.finetuned), seed)
    _add_task_rows(report, exp, None, "direct", _merged_accs(trained, direct_merge(theta, trained.taus)), seed)

    def discarded(alpha, a_idx):
        out = OrderedDict((key, []) for key in ("p_discard", "discard_high", "dare", "bin_discard"))
        for i, tau in enumerate(trained.taus):
            out["p_discard"].append(p_discard(tau, alpha, scope))
            out["discard_high"].append(discard_high(tau, alpha, scope))
            out["dare"].append(dare_discard(tau, alpha, derive_seed(seed, STREAM_DARE, i, a_idx)))
            out["bin_discard"].append(bin_discard(tau, alpha, scope)[1])
        return out

    for a_idx, alpha in enumerate(LogUtils.custom_tqdm(list(alphas), desc="controlled (seed {})".format(seed))):
        for method, vectors in discarded(alpha, a_idx).items():
            params = [add_task_vector(theta, v) for v in vectors]
            _add_task_rows(report, exp, alpha, method, _task_accs(trained, params), seed)

    for m_idx, alpha in enumerate(merge_alphas):
        sets = discarded(alpha, len(alphas) + m_idx)
        for method in ("p_discard", "dare", "bin_discard"):
            merged = direct_merge(theta, sets[method])
            _add_task_rows(report, exp, alpha, "direct_" + method, _merged_accs(trained, merged), seed)
            report.add(exp, alpha, "direct_" + method, TASK_ALL, "merge_scale", direct_merge_scale(sets[method]), seed)
    return report


def run_controlled(config, seeds=None):
    """
    Controlled experiment over the config's alpha grid for every root seed.
    """
    seeds = list(config.experiment.seeds if seeds is None else seeds)
    scope = Scope.parse(config.bench.scope)
    report = BenchReport()
    for seed in seeds:
        LogUtils.log_section("Controlled experiment, seed {}".format(seed))
        trained = prepare_suite(config, seed)
        controlled_rows(trained, config.bench.alphas, config.bench.merge_alphas, scope=scope, report=report)
    return report


# merging bench


def auto_switch_accs(trained, packs, index, test_features, C, metric="euclidean", vectors=None):
    """
    Route every test input of every task and evaluate it with its weighted merge.

    Args:
        trained (TrainedSuite)
        packs (list of TaskSwitchPack): one switch per task
        index (QueryIndex): query set built with the merged backbone
        test_features (list of np.ndarray): backbone features of each task's test inputs
        C (int): number of neighbours
        metric (str): distance metric
        vectors (list of np.ndarray): precomputed signed switch vectors

    Returns:
        accs (list of float): per-task accuracy
        route_accs (list of float): per-task fraction routed to the true task by argmax w
        cache (SwitchCache): the merge cache, for distinct-merge statistics
    """
    vectors = [signed_switch_vector(p) for p in packs] if vectors is None else vectors
    cache = SwitchCache()
    accs, route_accs = [], []
    for task, feats in zip(trained.suite.tasks, test_features):
        weights = route(index, feats, C, metric=metric)
        route_accs.append(float(np.mean([w.argmax() == task.task_id for w in weights])))
        groups = OrderedDict()
        for j, w in enumerate(weights):
            groups.setdefault(w.counts, []).append(j)
        preds = np.empty(len(task.test), dtype=np.int64)
        for counts, rows in groups.items():
            merged = cache.get_or_compute(
                counts,
                lambda counts=counts: apply_auto(
                    trained.pretrained, packs, RouteWeights(counts=counts, C=int(C)), vectors=vectors
                ),
            )
            preds[rows] = predict(merged, task.test.x[rows], spec=trained.spec)
        accs.append(accuracy(preds, task.test.y))
    return accs, route_accs, cache


def merging_rows(trained, bench, report=None):
    """
    Rows of the merging bench for one trained suite.

    Args:
        trained (TrainedSuite)
        bench (Config): the `bench` section (alpha, arith_coef, N, C, metric,
            N_grid, C_grid, scope)
        report (BenchReport): rows are appended here if given
    """
    report = BenchReport() if report is None else report
    exp, seed, theta, taus = EXPERIMENT_MERGE, trained.seed, trained.pretrained, trained.taus
    alpha, scope = float(bench.alpha), Scope.parse(bench.scope)

    _add_task_rows(report, exp, None, "pretrained", _merged_accs(trained, theta), seed)
    _add_task_rows(report, exp, None, "finetuned", _task_accs(trained, trained.finetuned), seed)
    _add_task_rows(report, exp, None, "average", _merged_accs(trained, weight_average(theta, taus)), seed)
    _add_task_rows(
        report, exp, None, "arith", _merged_accs(trained, task_arithmetic(theta, taus, bench.arith_coef)), seed
    )
    dare_taus = [dare_discard(tau, alpha, derive_seed(seed, STREAM_DARE, i, 0)) for i, tau in enumerate(taus)]
    _add_task_rows(
        report, exp, alpha, "dare_arith", _merged_accs(trained, task_arithmetic(theta, dare_taus, bench.arith_coef)), seed
    )
    backbone = direct_merge(theta, taus)
    _add_task_rows(report, exp, None, "direct", _merged_accs(trained, backbone), seed)

    # T-Switch with the oracle task id
    packs = [build_pack(tau, alpha, scope) for tau in taus]
    _add_task_rows(
        report, exp, alpha, "tswitch", _task_accs(trained, [apply_switch(theta, p) for p in packs]), seed
    )
    _add_task_rows(
        report, exp, alpha, "tswitch", [storage_report(p).bits_per_parameter for p in packs], seed,
        metric="bits_per_param",
    )

    # Auto-Switch, features from the direct-merged backbone
    extract = feature_fn(backbone, spec=trained.spec)
    test_features = [extract(task.test.x) for task in trained.suite.tasks]
    query_features = [extract(task.query.x) for task in trained.suite.tasks]
    vectors = [signed_switch_vector(p) for p in packs]

    def auto_rows(N, C, method):
        index = build_query_index(lambda f: f, [q[:N] for q in query_features], n_per_task=N)
        if C > index.rows:
            LogUtils.log_warning(
                "skipping {}: C={} exceeds the {} index rows".format(method, C, index.rows), print_now=False
            )
            return
        accs, route_accs, cache = auto_switch_accs(
            trained, packs, index, test_features, C, metric=bench.metric, vectors=vectors
        )
        _add_task_rows(report, exp, alpha, method, accs, seed)
        _add_task_rows(report, exp, alpha, method, route_accs, seed, metric="route_acc")
        report.add(exp, alpha, method, TASK_ALL, "distinct_merges", len(cache), seed)

    auto_rows(int(bench.N), int(bench.C), "auto_switch")
    for N in bench.N_grid:
        for C in bench.C_grid:
            auto_rows(int(N), int(C), "auto_switch(N={},C={})".format(int(N), int(C)))
    return report


def run_merging_bench(config, seeds=None):
    seeds = list(config.experiment.seeds if seeds is None else seeds)
    report = BenchReport()
    for seed in seeds:
        LogUtils.log_section("Merging bench, seed {}".format(seed))
        trained = prepare_suite(config, seed)
        merging_rows(trained, config.bench, report=report)
    return report


# summaries


def summarize(report):
    """
    Seed-averaged means. Each (experiment, method, alpha, metric) cell is first
    averaged over tasks within a seed, then mean and standard deviation are
    taken over seeds.

    Returns:
        summary (list of dict): one entry per cell in first-appearance order
    """
    per_seed = OrderedDict()
    for r in report.rows:
        key = (r.experiment, r.method, r.alpha, r.metric)
        per_seed.setdefault(key, OrderedDict()).setdefault(r.seed, []).append(r.value)
    summary = []
    for (experiment, method, alpha, metric), seeds in per_seed.items():
        means = np.array([np.mean(v) for v in seeds.values()], dtype=np.float64)
        summary.append(
            {
                "experiment": experiment,
                "method": method,
                "alpha": alpha,
                "metric": metric,
                "mean": float(means.mean()),
                "std": float(means.std()),
                "n_seeds": int(means.size),
            }
        )
    return summary


def _lookup(summary, experiment, method, alpha=None, metric="acc"):
    for entry in summary:
        if entry["experiment"] != experiment or entry["method"] != method or entry["metric"] != metric:
            continue
        if (alpha is None) != (entry["alpha"] is None):
            continue
        if alpha is not None and not math.isclose(entry["alpha"], alpha, abs_tol=1e-9):
            continue
        return entry["mean"]
    return None


TrendCheck = namedtuple("TrendCheck", ["name", "passed", "value", "reference"])


def check_trends(summary, alpha=0.5):
    """
    Evaluate the expected orderings on a summary. Accuracies are fractions, so
    a margin of 0.05 is five points. Checks whose cells are missing from the
    summary are skipped.

    Returns:
        checks (list of TrendCheck)
    """
    checks = []

    def expect(name, value, reference, margin=0.0):
        if value is None or reference is None:
            return
        checks.append(TrendCheck(name, bool(value >= reference + margin), value, reference + margin))

    c, m = EXPERIMENT_CONTROLLED, EXPERIMENT_MERGE
    ft_c = _lookup(summary, c, "finetuned")
    expect("p_discard >= discard_high + 5pt", _lookup(summary, c, "p_discard", alpha), _lookup(summary, c, "discard_high", alpha), 0.05)
    expect("p_discard >= finetuned - 1pt", _lookup(summary, c, "p_discard", alpha), ft_c, -0.01)
    dare = _lookup(summary, c, "dare", alpha)
    if dare is not None and ft_c is not None:
        # "no improvement": the reversed ordering, within seed noise
        checks.append(TrendCheck("dare <= finetuned + 0.5pt", bool(dare <= ft_c + 0.005), dare, ft_c + 0.005))
    expect("bin_discard >= finetuned - 2pt", _lookup(summary, c, "bin_discard", alpha), ft_c, -0.02)
    direct_dare = _lookup(summary, c, "direct_dare", alpha)
    expect("direct(bin_discard) >= direct(dare)", _lookup(summary, c, "direct_bin_discard", alpha), direct_dare)
    expect("direct(p_discard) >= direct(dare)", _lookup(summary, c, "direct_p_discard", alpha), direct_dare)

    # direct merges of discarded sets are non-decreasing in alpha within one point
    for method in ("direct_p_discard", "direct_bin_discard"):
        series = sorted(
            (e["alpha"], e["mean"])
            for e in summary
            if e["experiment"] == c and e["method"] == method and e["metric"] == "acc"
        )
        label = "direct({})".format(method[len("direct_") :])
        for (a0, v0), (a1, v1) in zip(series[:-1], series[1:]):
            expect("{} at {:g} >= at {:g} - 1pt".format(label, a1, a0), v1, v0, -0.01)

    ft_m = _lookup(summary, m, "finetuned")
    tswitch = _lookup(summary, m, "tswitch", alpha)
    expect("tswitch >= finetuned - 1pt", tswitch, ft_m, -0.01)
    route_acc = _lookup(summary, m, "auto_switch", alpha, metric="route_acc")
    if route_acc is not None:
        checks.append(TrendCheck("auto_switch routing >= 95%", bool(route_acc >= 0.95), route_acc, 0.95))
    expect("auto_switch >= tswitch - 1.5pt", _lookup(summary, m, "auto_switch", alpha), tswitch, -0.015)
    return checks


def log_summary(summary, checks):
    LogUtils.log_section("Summary")
    for e in summary:
        LogUtils.log_info(
            "{:<11} {:<26} alpha={:<5} {:<16} {:.4f} +- {:.4f} ({} seeds)".format(
                e["experiment"],
                e["method"],
                "-" if e["alpha"] is None else "{:g}".format(e["alpha"]),
                e["metric"],
                e["mean"],
                e["std"],
                e["n_seeds"],
            )
        )
    if checks:
        LogUtils.log_section("Trend checks")
    for chk in checks:
        line = "{:<45} {:.4f} vs {:.4f}".format(chk.name, chk.value, chk.reference)
        if chk.passed:
            LogUtils.log_info("PASS " + line)
        else:
            LogUtils.log_warning("FAIL " + line, print_now=False)
    # skipped grid cells and failed checks, printed once at the end
    LogUtils.flush_warnings()


def plot_report(report, path):
    """
    Average accuracy vs alpha for each discard procedure (left) and for the
    direct merges of the discarded sets (right), fine-tuned accuracy dashed.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    summary = summarize(report)
    acc = [e for e in summary if e["metric"] == "acc" and e["experiment"] == EXPERIMENT_CONTROLLED]
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    panels = (
        (axes[0], ("p_discard", "discard_high", "dare", "bin_discard"), "per-task model"),
        (axes[1], ("direct_p_discard", "direct_dare", "direct_bin_discard"), "direct merge"),
    )
    for ax, methods, title in panels:
        for method in methods:
            pts = sorted((e["alpha"], e["mean"]) for e in acc if e["method"] == method)
            if pts:
                ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=method)
        for e in acc:
            if e["method"] == "finetuned":
                ax.axhline(e["mean"], linestyle="--", color="gray", label="finetuned")
        ax.set_xlabel("discard ratio")
        ax.set_ylabel("avg accuracy")
        ax.set_title(title)
        ax.legend(fontsize=8)
    fig.tight_layout()
    with atomic_output(path, "wb") as f:
        fig.savefig(f, format="png")
    plt.close(fig)
