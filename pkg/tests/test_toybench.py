import os

import numpy as np
import pytest

from tswitch.configs import config_factory
from tswitch.models import ModelSpec, ToyMLP
from tswitch.utils.bench_utils import (
    BenchReport,
    TrendCheck,
    check_trends,
    controlled_rows,
    merging_rows,
    prepare_suite,
    run_controlled,
    run_merging_bench,
    save_trained_suite,
    summarize,
)
from tswitch.utils.dataset import Split, derive_seed, gen_suite
from tswitch.utils.errors import DataError, InvariantError, UserError
from tswitch.utils.tensorstore import NamedTensorSet, load_ntc
from tswitch.utils.train_utils import evaluate, feature_fn, logits, train


def two_blobs(seed, n=200):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    centers = np.array([[-3.0, -3.0], [3.0, 3.0]])
    x = centers[y] + 0.5 * rng.standard_normal((n, 2))
    return Split(x=x, y=y)


HYPER = {"lr": 0.05, "epochs": 30, "batch_size": 32, "momentum": 0.9}


@pytest.fixture
def trained(tiny_config):
    return prepare_suite(tiny_config, seed=0)


def test_derive_seed_streams():
    assert derive_seed(0, 1) == derive_seed(0, 1)
    assert derive_seed(0, 1) != derive_seed(0, 2)
    assert derive_seed(0, 3, 1) != derive_seed(1, 3, 1)


def test_gen_suite_is_deterministic(tiny_config):
    a, b, other = gen_suite(tiny_config, 4), gen_suite(tiny_config, 4), gen_suite(tiny_config, 5)
    assert a.K == 3
    for ta, tb in zip(a.tasks, b.tasks):
        np.testing.assert_array_equal(ta.train.x, tb.train.x)
        np.testing.assert_array_equal(ta.train.y, tb.train.y)
        np.testing.assert_array_equal(ta.query.x, tb.query.x)
    np.testing.assert_array_equal(a.pretrain.y, b.pretrain.y)
    assert not np.array_equal(a.tasks[0].train.x, other.tasks[0].train.x)


def test_gen_suite_layout(tiny_config):
    suite = gen_suite(tiny_config, 0)
    assert len(suite.pretrain) == 3 * 30
    for task in suite.tasks:
        assert task.train.x.shape == (60, 6)
        assert len(task.test) == 30
        assert task.query.y is None
        assert len(task.query) == 10
        assert task.train.y.max() < 3
        assert np.linalg.norm(task.center) == pytest.approx(8.0)


def test_gen_suite_rejects_bad_config(tiny_config):
    with tiny_config.values_unlocked():
        tiny_config.suite.K = 1
    with pytest.raises(UserError):
        gen_suite(tiny_config, 0)


def test_split_tensor_set_round_trip():
    split = Split(x=np.ones((3, 2)), y=[0, 2, 1])
    back = Split.from_tensor_set(split.to_tensor_set())
    np.testing.assert_array_equal(back.x, split.x)
    assert back.y.tolist() == [0, 2, 1]
    unlabeled = Split.from_tensor_set(Split(x=np.ones((2, 2))).to_tensor_set())
    assert unlabeled.y is None
    with pytest.raises(DataError):
        Split.from_tensor_set(NamedTensorSet([("z", np.ones(2, np.float32))]))
    with pytest.raises(DataError):
        Split.from_tensor_set(NamedTensorSet([("x", np.ones((2, 2), np.float32)), ("y", np.float32([0.5, 1]))]))
    with pytest.raises(UserError):
        Split(x=np.ones((3, 2)), y=[0, 1])


def test_model_spec_and_tensor_set_conversion():
    spec = ModelSpec(d_in=4, d_out=3, hidden=[5])
    assert spec.param_shapes() == [("W0", (5, 4)), ("b0", (5,)), ("W1", (3, 5)), ("b1", (3,))]
    params = ToyMLP(spec, seed=1).to_tensor_set()
    assert ModelSpec.from_tensor_set(params).dims == [4, 5, 3]
    assert ToyMLP(spec, seed=1).to_tensor_set().bit_equal(params)
    assert not ToyMLP(spec, seed=2).to_tensor_set().bit_equal(params)
    assert ToyMLP.from_tensor_set(params).to_tensor_set().bit_equal(params)
    x = np.ones((2, 4), np.float32)
    assert logits(params, x).shape == (2, 3)
    assert feature_fn(params)(x).shape == (2, 5)


def test_zero_learning_rate_leaves_parameters():
    init = ToyMLP(ModelSpec(d_in=2, d_out=2, hidden=[8]), seed=0).to_tensor_set()
    out = train(init, two_blobs(0), dict(HYPER, lr=0.0), seed=0)
    assert out.bit_equal(init)
    assert train(init, two_blobs(0), dict(HYPER, epochs=0), seed=0).bit_equal(init)


def test_training_fits_separable_data_and_is_reproducible():
    init = ToyMLP(ModelSpec(d_in=2, d_out=2, hidden=[16]), seed=0).to_tensor_set()
    data = two_blobs(1)
    a = train(init, data, HYPER, seed=3)
    b = train(init, data, HYPER, seed=3)
    assert a.bit_equal(b)
    assert evaluate(a, None, data) >= 0.99
    assert evaluate(a, None, two_blobs(2)) >= 0.99
    with pytest.raises(UserError):
        evaluate(a, None, Split(x=data.x))
    with pytest.raises(UserError):
        train(init, data, {"lr": 0.1}, seed=0)


def test_prepare_suite_is_reproducible(tiny_config, trained):
    again = prepare_suite(tiny_config, seed=0)
    assert again.pretrained.bit_equal(trained.pretrained)
    for a, b in zip(again.taus, trained.taus):
        assert a.bit_equal(b)
    assert trained.taus[1].meta["task_id"] == "1"
    assert trained.taus[0].meta["base_fingerprint"] == trained.pretrained.fingerprint().hex


def test_controlled_rows(trained):
    report = controlled_rows(trained, alphas=[0.0, 0.5], merge_alphas=[0.5])
    K = trained.K
    assert len(report) == 3 * K + 2 * 4 * K + 3 * (K + 1)
    methods = {r.method for r in report.rows}
    assert methods == {
        "pretrained", "finetuned", "direct", "p_discard", "discard_high", "dare", "bin_discard",
        "direct_p_discard", "direct_dare", "direct_bin_discard",
    }
    for r in report.select(metric="acc"):
        assert 0.0 <= r.value <= 1.0
    assert len(report.select(metric="merge_scale")) == 3
    # same suite, same rows
    assert controlled_rows(trained, alphas=[0.5]).rows == controlled_rows(trained, alphas=[0.5]).rows


def test_merging_rows(tiny_config, trained):
    report = merging_rows(trained, tiny_config.bench)
    methods = {r.method for r in report.rows}
    assert {"pretrained", "finetuned", "average", "arith", "dare_arith", "direct", "tswitch", "auto_switch"} <= methods
    assert "auto_switch(N=5,C=1)" in methods
    # C=100 exceeds the 15 index rows and is skipped
    assert "auto_switch(N=5,C=100)" not in methods
    assert len(report.select(method="tswitch", metric="bits_per_param")) == trained.K
    (distinct,) = report.select(method="auto_switch", metric="distinct_merges")
    assert 1 <= distinct.value
    for r in report.select(metric="route_acc"):
        assert 0.0 <= r.value <= 1.0


def test_run_benches_over_seeds(tiny_config):
    with tiny_config.values_unlocked():
        tiny_config.bench.N_grid = []
    report = run_merging_bench(tiny_config, seeds=[0, 1])
    assert {r.seed for r in report.rows} == {0, 1}
    summary = summarize(report)
    auto = [e for e in summary if e["method"] == "auto_switch" and e["metric"] == "acc"]
    assert len(auto) == 1
    assert auto[0]["n_seeds"] == 2


def test_run_controlled(tiny_config):
    config = config_factory("controlled")
    with config.values_unlocked():
        config.update({"suite": tiny_config.suite.to_dict()})
        config.model.hidden = [8]
        config.train.pretrain.epochs = 2
        config.train.finetune.epochs = 2
        config.bench.alphas = [0.5]
        config.bench.merge_alphas = []
    report = run_controlled(config, seeds=[3])
    assert len(report.select(method="bin_discard")) == 3


def test_save_trained_suite(tmp_path, trained):
    paths = save_trained_suite(trained, str(tmp_path))
    assert len(paths["finetuned"]) == trained.K
    assert os.path.exists(os.path.join(str(tmp_path), "examples", "task_02.ntc"))
    assert load_ntc(paths["pretrained"][0]).bit_equal(trained.pretrained)
    test = Split.from_tensor_set(load_ntc(paths["test"][1]))
    np.testing.assert_array_equal(test.y, trained.suite.tasks[1].test.y)
    assert load_ntc(paths["examples"][0]).names == ["x"]


def test_report_csv_and_checks():
    report = BenchReport()
    report.add("merge", None, "finetuned", 0, "acc", 0.9, 0)
    report.add("merge", 0.5, "tswitch", 0, "acc", 0.95, 0)
    report.add("merge", 0.5, "tswitch", "all", "bits_per_param", 1.5, 0)
    back = BenchReport.from_csv(report.to_csv())
    assert back.rows == report.rows
    assert report.to_csv().splitlines()[0] == "experiment,alpha,method,task,metric,value,seed"
    with pytest.raises(DataError) as e:
        BenchReport.from_csv("a,b\n1,2\n")
    assert e.value.code == "CSV_HEADER"
    with pytest.raises(InvariantError):
        report.add("merge", None, "direct", 0, "acc", float("nan"), 0)


def test_summarize_averages_tasks_then_seeds():
    report = BenchReport()
    for seed, accs in ((0, [0.5, 0.7]), (1, [0.8, 1.0])):
        for task, acc in enumerate(accs):
            report.add("controlled", 0.5, "p_discard", task, "acc", acc, seed)
    (entry,) = summarize(report)
    assert entry["mean"] == pytest.approx(0.75)
    assert entry["std"] == pytest.approx(0.15)
    assert entry["n_seeds"] == 2


def test_check_trends_on_summary():
    summary = [
        {"experiment": "merge", "method": "finetuned", "alpha": None, "metric": "acc", "mean": 0.90},
        {"experiment": "merge", "method": "tswitch", "alpha": 0.5, "metric": "acc", "mean": 0.895},
        {"experiment": "merge", "method": "auto_switch", "alpha": 0.5, "metric": "acc", "mean": 0.85},
    ]
    checks = {c.name: c for c in check_trends(summary)}
    assert checks["tswitch >= finetuned - 1pt"].passed
    assert not checks["auto_switch >= tswitch - 1.5pt"].passed
    assert all(isinstance(c, TrendCheck) for c in checks.values())
    # cells absent from the summary are not checked
    assert not any(name.startswith("p_discard") for name in checks)


def _cell(method, alpha, mean, experiment="controlled"):
    return {"experiment": experiment, "method": method, "alpha": alpha, "metric": "acc", "mean": mean}


def test_check_trends_alpha_series_and_dare():
    summary = [
        _cell("finetuned", None, 0.90),
        _cell("dare", 0.5, 0.904),
        _cell("direct_p_discard", 0.1, 0.60),
        _cell("direct_p_discard", 0.2, 0.595),
        _cell("direct_bin_discard", 0.1, 0.62),
        _cell("direct_bin_discard", 0.2, 0.58),
    ]
    checks = {c.name: c for c in check_trends(summary)}
    assert checks["dare <= finetuned + 0.5pt"].passed
    assert checks["direct(p_discard) at 0.2 >= at 0.1 - 1pt"].passed
    assert not checks["direct(bin_discard) at 0.2 >= at 0.1 - 1pt"].passed

    summary[1] = _cell("dare", 0.5, 0.91)
    checks = {c.name: c for c in check_trends(summary)}
    assert not checks["dare <= finetuned + 0.5pt"].passed


def expected_check_names(alpha, merge_alphas):
    names = {
        "p_discard >= discard_high + 5pt",
        "p_discard >= finetuned - 1pt",
        "dare <= finetuned + 0.5pt",
        "bin_discard >= finetuned - 2pt",
        "direct(bin_discard) >= direct(dare)",
        "direct(p_discard) >= direct(dare)",
        "tswitch >= finetuned - 1pt",
        "auto_switch routing >= 95%",
        "auto_switch >= tswitch - 1.5pt",
    }
    grid = sorted(merge_alphas)
    for label in ("p_discard", "bin_discard"):
        for a0, a1 in zip(grid[:-1], grid[1:]):
            names.add("direct({}) at {:g} >= at {:g} - 1pt".format(label, a1, a0))
    return names


@pytest.mark.slow
def test_default_suite_trends():
    controlled = config_factory("controlled")
    merge = config_factory("merge")
    alpha = merge.bench.alpha
    assert alpha in controlled.bench.alphas and alpha in controlled.bench.merge_alphas
    report = run_controlled(controlled)
    report.extend(run_merging_bench(merge))
    checks = check_trends(summarize(report), alpha=alpha)
    assert {c.name for c in checks} == expected_check_names(alpha, controlled.bench.merge_alphas)
    failed = [c for c in checks if not c.passed]
    assert not failed, failed
