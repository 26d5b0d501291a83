"""
The command line entry point. Every verb loads its inputs, runs one chain of
operations and writes its outputs atomically.

Verbs:
    extract   task vector from a base and a fine-tuned checkpoint
    lowrank   dense task vector from low-rank factor sets
    discard   pulse / high / random discard of a task vector
    binarize  task switch (.tsw) from a task vector
    inspect   describe an .ntc, .tsw or .tqi file
    merge     static merge (average, arith, direct) of task vectors
    apply     T-Switch, or Auto-Switch with explicit weights
    route     build a query index / route inputs and apply the weighted switches
    bench     controlled and merging benches, suite dumps, evaluation

Global flags (before or after the verb): --seed, --per-tensor, --quiet, --json.

Exit codes: 0 success, 1 user error, 2 data error, 3 internal error. With
--json, stdout carries exactly one JSON object.
"""

import argparse
import glob
import json
import os
import sys
import traceback
from collections import OrderedDict

import numpy as np

from tswitch.algo.binarize import (
    TSW_MAGIC,
    build_pack,
    decode_tsw,
    decode_tsw_bytes,
    encode_tsw,
    pack_summary,
    storage_report,
)
from tswitch.algo.merge import (
    MergeMethod,
    MergeRecipe,
    apply_auto,
    apply_switch,
    direct_merge_scale,
    merge,
)
from tswitch.algo.pulse import DISCARD_MODES, Scope, check_alpha, discard, pulse_mask
from tswitch.algo.router import (
    DEFAULT_C,
    DEFAULT_N,
    METRICS,
    TQI_MAGIC,
    build_query_index,
    decode_tqi_bytes,
    load_tqi,
    route_and_apply,
    save_tqi,
)
from tswitch.configs import config_factory
from tswitch.models.toy_nets import ModelSpec
from tswitch.utils import log_utils as LogUtils
from tswitch.utils.bench_utils import (
    check_trends,
    log_summary,
    plot_report,
    prepare_suite,
    run_controlled,
    run_merging_bench,
    save_trained_suite,
    summarize,
)
from tswitch.utils.dataset import Split
from tswitch.utils.errors import (
    DataError,
    EmptyInputError,
    FingerprintMismatchError,
    TSwitchError,
    UserError,
)
from tswitch.utils.file_utils import apply_thread_cap, read_bytes, staged_outputs, write_text_atomic
from tswitch.utils.tensorstore import (
    NTC_MAGIC,
    compute_task_vector,
    decode_ntc,
    load_ntc,
    materialize_lowrank_set,
    save_ntc,
)
from tswitch.utils.train_utils import evaluate, feature_fn


class TswArgumentParser(argparse.ArgumentParser):
    """
    Reports bad flags as a UserError (exit 1) instead of argparse's exit 2.
    """

    def error(self, message):
        raise UserError("{}: {}".format(self.prog, message))


def _global_flags():
    # SUPPRESS keeps a flag given before the verb from being reset by the subparser default
    common = TswArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="root seed (random discard, bench)")
    common.add_argument(
        "--per-tensor", action="store_true", default=argparse.SUPPRESS, help="rank and rescale within each tensor"
    )
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="no human-readable output")
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS, help="print one JSON object")
    return common


GLOBAL_DEFAULTS = {"seed": None, "per_tensor": False, "quiet": False, "json": False}


def _scope(args):
    return Scope.PER_TENSOR if args.per_tensor else Scope.GLOBAL


def _ntc_summary(tensor_set):
    return {
        "n_tensors": len(tensor_set),
        "n_params": tensor_set.numel,
        "fingerprint": tensor_set.fingerprint().hex,
    }


# verbs


def cmd_extract(args):
    base = load_ntc(args.base)
    finetuned = load_ntc(args.finetuned)
    tau = compute_task_vector(base, finetuned)
    save_ntc(tau, args.output)
    LogUtils.log_info("task vector with {} params written to {}".format(tau.numel, args.output))
    return dict(op="extract", output=args.output, **_ntc_summary(tau))


def cmd_lowrank(args):
    down = load_ntc(args.down)
    up = load_ntc(args.up)
    tau = materialize_lowrank_set(down, up, args.scale)
    if args.base is not None:
        base = load_ntc(args.base)
        if base.fingerprint() != tau.fingerprint():
            raise FingerprintMismatchError("materialized deltas do not match the base structure")
        tau = tau.with_meta(base_fingerprint=base.fingerprint().hex)
    save_ntc(tau, args.output)
    LogUtils.log_info("dense task vector with {} params written to {}".format(tau.numel, args.output))
    return dict(op="lowrank", output=args.output, scale=args.scale, **_ntc_summary(tau))


def cmd_discard(args):
    check_alpha(args.alpha)
    tau = load_ntc(args.task_vector)
    seed = 0 if args.seed is None else args.seed
    out = discard(tau, args.mode, args.alpha, scope=_scope(args), seed=seed)
    save_ntc(out, args.output)
    kept = int(np.count_nonzero(out.flatten()))
    result = OrderedDict(
        op="discard", mode=args.mode, alpha=args.alpha, output=args.output, n_params=out.numel, nonzero=kept
    )
    if args.mode != "random":
        mask = pulse_mask(tau, args.alpha, _scope(args))
        result["units"] = [
            {"name": u.name, "gamma_u": u.gamma_u, "gamma_l": u.gamma_l, "kept_pos": u.kept_pos, "kept_neg": u.kept_neg}
            for u in mask.units
        ]
    LogUtils.log_info("{} discard at alpha={}: {} of {} entries nonzero".format(args.mode, args.alpha, kept, out.numel))
    return result


def cmd_binarize(args):
    check_alpha(args.alpha)
    tau = load_ntc(args.task_vector)
    pack = build_pack(tau, args.alpha, _scope(args))
    encode_tsw(pack, args.output)
    report = storage_report(pack)
    LogUtils.log_info(
        "switch written to {}: {} of {} active, {:.3f} bits/param".format(
            args.output, pack.n_active, pack.n_params, report.bits_per_parameter
        )
    )
    result = OrderedDict(op="binarize", output=args.output)
    result.update(pack_summary(pack))
    result["storage"] = report.to_dict()
    return result


def cmd_inspect(args):
    payload = read_bytes(args.path)
    magic = bytes(payload[:4])
    if magic == TSW_MAGIC:
        pack = decode_tsw_bytes(payload)
        result = OrderedDict(op="inspect", path=args.path, format="tsw")
        result.update(pack_summary(pack))
        result["storage"] = storage_report(pack).to_dict()
        LogUtils.log_info(
            "TSW switch, scope {}, alpha {:g}, knob {}".format(result["scope"], pack.alpha, result["knob"])
        )
        LogUtils.log_info(
            "{} of {} parameters active, {} bytes, {:.4f} bits/param ({:.2%} of fp32)".format(
                pack.n_active,
                pack.n_params,
                result["storage"]["bytes_serialized"],
                result["storage"]["bits_per_parameter"],
                result["storage"]["ratio_vs_fp32"],
            )
        )
        return result
    if magic == NTC_MAGIC:
        tensor_set = decode_ntc(payload)
        LogUtils.log_info("NTC file, {} tensors, {} params".format(len(tensor_set), tensor_set.numel))
        for name, arr in tensor_set.items():
            LogUtils.log_info("  {:<24} {}".format(name, tuple(arr.shape)))
        return dict(
            op="inspect",
            path=args.path,
            format="ntc",
            tensors=[{"name": n, "shape": list(s)} for n, s in zip(tensor_set.names, tensor_set.shapes)],
            meta=tensor_set.meta,
            **_ntc_summary(tensor_set)
        )
    if magic == TQI_MAGIC:
        index = decode_tqi_bytes(payload)
        LogUtils.log_info("TQI query index, K={} d={} rows={}".format(index.K, index.dim, index.rows))
        return dict(op="inspect", path=args.path, format="tqi", **index.meta())
    raise DataError("unrecognized file format (magic {!r})".format(magic), code="UNKNOWN_MAGIC")


def cmd_merge(args):
    base = load_ntc(args.base)
    taus = [load_ntc(p) for p in args.task_vectors]
    recipe = MergeRecipe(method=args.method, scaling_coef=args.coef if args.method == "arith" else None)
    if args.method != "arith" and args.coef is not None:
        raise UserError("--coef only applies to --method arith")
    merged = merge(base, taus, recipe)
    save_ntc(merged, args.output)
    result = OrderedDict(op="merge", method=args.method, n_tasks=len(taus), output=args.output)
    if recipe.method == MergeMethod.DIRECT:
        result["scale"] = direct_merge_scale(taus)
    LogUtils.log_info("{} merge of {} task vectors written to {}".format(args.method, len(taus), args.output))
    return result


def _parse_weights(text):
    try:
        return [float(w) for w in text.split(",") if w.strip()]
    except ValueError:
        raise UserError("weights must be comma-separated numbers, got {!r}".format(text))


def cmd_apply(args):
    base = load_ntc(args.base)
    packs = [decode_tsw(p) for p in args.switch]
    if args.weights is None:
        if len(packs) != 1:
            raise UserError("{} switches given; pass -w to weight them".format(len(packs)))
        merged = apply_switch(base, packs[0])
        mode = "tswitch"
    else:
        weights = _parse_weights(args.weights)
        merged = apply_auto(base, packs, np.asarray(weights, dtype=np.float64))
        mode = "auto"
    save_ntc(merged, args.output)
    LogUtils.log_info("{} applied to base, written to {}".format(mode, args.output))
    return OrderedDict(op="apply", mode=mode, n_switches=len(packs), output=args.output)


def _example_files(directory):
    files = sorted(glob.glob(os.path.join(directory, "*.ntc")))
    if not files:
        raise EmptyInputError("no .ntc example files in {}".format(directory))
    return files


def cmd_route_build(args):
    backbone = load_ntc(args.backbone)
    spec = ModelSpec.from_tensor_set(backbone)
    files = _example_files(args.examples)
    examples = [Split.from_tensor_set(load_ntc(f)).x for f in files]
    index = build_query_index(
        feature_fn(backbone, spec=spec), examples, n_per_task=args.n, backbone_fingerprint=backbone.fingerprint().hex
    )
    save_tqi(index, args.output)
    LogUtils.log_info("query index with {} rows ({} tasks, d={}) written to {}".format(index.rows, index.K, index.dim, args.output))
    return dict(op="route_build", output=args.output, files=files, **index.meta())


def cmd_route_apply(args):
    base = load_ntc(args.base)
    packs = [decode_tsw(p) for p in args.switches]
    index = load_tqi(args.index)
    inputs = Split.from_tensor_set(load_ntc(args.inputs)).x
    if args.backbone is not None:
        backbone = load_ntc(args.backbone)
        feats = feature_fn(backbone)(inputs)
    else:
        feats = inputs
    merged, weights = route_and_apply(base, packs, index, feats, C=args.C, metric=args.metric)

    written = OrderedDict()
    assignments = []
    with staged_outputs(args.output, last=("routes.json",)) as stage_dir:
        for i, (tensor_set, w) in enumerate(zip(merged, weights)):
            key = "-".join(str(c) for c in w.counts)
            if key not in written:
                fname = "merged_{}.ntc".format(key)
                save_ntc(tensor_set.with_meta(route_counts=key, route_C=w.C), os.path.join(stage_dir, fname))
                written[key] = fname
            # file names are relative to the output directory
            assignments.append({"input": i, "counts": list(w.counts), "weights": [float(x) for x in w.w], "file": written[key]})
        write_text_atomic(os.path.join(stage_dir, "routes.json"), json.dumps(assignments, indent=4))
    LogUtils.log_info("{} inputs routed to {} distinct merges in {}".format(len(weights), len(written), args.output))
    return OrderedDict(
        op="route_apply",
        output=args.output,
        n_inputs=len(weights),
        distinct_merges=len(written),
        routes=[a["counts"] for a in assignments],
    )


def load_config(path, bench_name):
    """
    Default config for @bench_name, overridden by the JSON file at @path if given.
    Unknown keys in the file are rejected.
    """
    if path is None:
        config = config_factory(bench_name)
    else:
        try:
            ext_cfg = json.loads(read_bytes(path).decode("utf-8"))
        except ValueError as e:
            raise UserError("config {} is not valid JSON: {}".format(path, e))
        if not isinstance(ext_cfg, dict):
            raise UserError("config {} must hold a JSON object".format(path))
        if ext_cfg.get("bench_name", bench_name) != bench_name:
            raise UserError("config {} is for bench {!r}, not {!r}".format(path, ext_cfg["bench_name"], bench_name))
        config = config_factory(bench_name)
        # update config with external json - this will throw errors if
        # the external config has keys not present in the base config
        with config.values_unlocked():
            config.update(ext_cfg)
    config.lock()
    return config


def _run_bench(args, bench_name, runner):
    config = load_config(args.config, bench_name)
    seeds = None if args.seed is None else [args.seed]
    out_dir = os.path.dirname(os.path.abspath(args.output))
    stem = os.path.splitext(os.path.basename(args.output))[0]
    plot_path = os.path.splitext(args.output)[0] + ".png" if config.experiment.logging.plot else None

    def body(stage_dir):
        report = runner(config, seeds=seeds)
        report.save(os.path.join(stage_dir, os.path.basename(args.output)))
        summary = summarize(report)
        checks = check_trends(summary, alpha=config.bench.alpha if "alpha" in config.bench else 0.5)
        log_summary(summary, checks)
        if plot_path is not None:
            plot_report(report, os.path.join(stage_dir, stem + ".png"))
        return report, summary, checks

    # csv, plot and log appear together or not at all
    with staged_outputs(out_dir) as stage_dir:
        if config.experiment.logging.terminal_output_to_txt and not args.json and not args.quiet:
            with LogUtils.PrintLogger(os.path.join(stage_dir, stem + ".log")):
                report, summary, checks = body(stage_dir)
        else:
            report, summary, checks = body(stage_dir)
    return OrderedDict(
        op="bench_" + bench_name,
        output=args.output,
        rows=len(report),
        plot=plot_path,
        summary=summary,
        checks=[{"name": c.name, "passed": c.passed, "value": c.value, "reference": c.reference} for c in checks],
    )


def cmd_bench_controlled(args):
    return _run_bench(args, "controlled", run_controlled)


def cmd_bench_merge(args):
    return _run_bench(args, "merge", run_merging_bench)


def cmd_bench_suite(args):
    config = load_config(args.config, args.bench)
    seed = config.experiment.seeds[0] if args.seed is None else args.seed
    trained = prepare_suite(config, seed)
    with staged_outputs(args.output) as stage_dir:
        staged = save_trained_suite(trained, stage_dir)
    paths = OrderedDict(
        (kind, [os.path.join(args.output, os.path.relpath(p, stage_dir)) for p in files])
        for kind, files in staged.items()
    )
    LogUtils.log_info("suite for seed {} written to {}".format(seed, args.output))
    return OrderedDict(op="bench_suite", output=args.output, seed=seed, K=trained.K, files=paths)


def cmd_bench_eval(args):
    params = load_ntc(args.params)
    split = Split.from_tensor_set(load_ntc(args.data))
    if split.y is None:
        raise UserError("{} has no labels ('y' tensor)".format(args.data))
    acc = evaluate(params, ModelSpec.from_tensor_set(params), split)
    LogUtils.log_info("accuracy {:.4f} on {} examples".format(acc, len(split)))
    return OrderedDict(op="bench_eval", accuracy=acc, n=len(split))


# parser


def build_parser():
    common = _global_flags()
    parser = TswArgumentParser(prog="tsw", description="task vector switches", parents=[common])
    verbs = parser.add_subparsers(dest="verb", parser_class=TswArgumentParser)
    verbs.required = True

    def verb(name, func, help_text, parent=verbs):
        p = parent.add_parser(name, help=help_text, parents=[common])
        if func is not None:
            p.set_defaults(func=func)
        return p

    p = verb("extract", cmd_extract, "task vector = finetuned - base")
    p.add_argument("--base", required=True)
    p.add_argument("--finetuned", required=True)
    p.add_argument("-o", "--output", required=True)

    p = verb("lowrank", cmd_lowrank, "materialize low-rank factors into a dense task vector")
    p.add_argument("--down", required=True, help="NTC of d x r factors")
    p.add_argument("--up", required=True, help="NTC of r x k factors, same tensor names")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--base", default=None, help="(optional) check the deltas fit this base")
    p.add_argument("-o", "--output", required=True)

    p = verb("discard", cmd_discard, "discard task vector entries")
    p.add_argument("-i", "--input", dest="task_vector", required=True, help="task vector NTC")
    p.add_argument("--mode", choices=DISCARD_MODES, default="pulse")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("-o", "--output", required=True)

    p = verb("binarize", cmd_binarize, "build a task switch file")
    p.add_argument("-i", "--input", dest="task_vector", required=True, help="task vector NTC")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("-o", "--output", required=True)

    p = verb("inspect", cmd_inspect, "describe an .ntc, .tsw or .tqi file")
    p.add_argument("path")

    p = verb("merge", cmd_merge, "static merge of task vectors")
    p.add_argument("task_vectors", nargs="+")
    p.add_argument("--method", choices=["average", "arith", "direct"], required=True)
    p.add_argument("--coef", type=float, default=None, help="task arithmetic scaling coefficient")
    p.add_argument("--base", required=True)
    p.add_argument("-o", "--output", required=True)

    p = verb("apply", cmd_apply, "apply one switch, or several with weights")
    p.add_argument("--base", required=True)
    p.add_argument("--switch", action="append", required=True)
    p.add_argument("-w", "--weights", default=None, help="comma-separated per-switch weights")
    p.add_argument("-o", "--output", required=True)

    p = verb("route", None, "Auto-Switch routing")
    route_verbs = p.add_subparsers(dest="route_verb", parser_class=TswArgumentParser)
    route_verbs.required = True
    r = verb("build", cmd_route_build, "build a query index", parent=route_verbs)
    r.add_argument("--backbone", required=True, help="direct-merged backbone NTC")
    r.add_argument("--examples", required=True, help="directory of per-task example NTC files")
    r.add_argument("-n", type=int, default=DEFAULT_N, help="examples kept per task")
    r.add_argument("-o", "--output", required=True)
    r = verb("apply", cmd_route_apply, "route inputs and apply weighted switches", parent=route_verbs)
    r.add_argument("--base", required=True)
    r.add_argument("--switches", nargs="+", required=True)
    r.add_argument("--index", required=True)
    r.add_argument("-C", type=int, default=DEFAULT_C)
    r.add_argument("--metric", choices=METRICS, default="euclidean")
    r.add_argument("--inputs", required=True, help="NTC with an 'x' tensor")
    r.add_argument("--backbone", default=None, help="backbone for input features (inputs are features if omitted)")
    r.add_argument("-o", "--output", required=True, help="output directory")

    p = verb("bench", None, "benches on the synthetic suite")
    bench_verbs = p.add_subparsers(dest="bench_verb", parser_class=TswArgumentParser)
    bench_verbs.required = True
    for name, func in (("controlled", cmd_bench_controlled), ("merge", cmd_bench_merge)):
        b = verb(name, func, "{} bench".format(name), parent=bench_verbs)
        b.add_argument("--config", default=None, help="(optional) JSON overriding the default config")
        b.add_argument("-o", "--output", required=True, help="CSV report path")
    b = verb("suite", cmd_bench_suite, "train one suite and dump it as NTC files", parent=bench_verbs)
    b.add_argument("--config", default=None)
    b.add_argument("--bench", choices=["controlled", "merge"], default="merge")
    b.add_argument("-o", "--output", required=True, help="output directory")
    b = verb("eval", cmd_bench_eval, "accuracy of a parameter set on a labeled split", parent=bench_verbs)
    b.add_argument("--params", required=True)
    b.add_argument("--data", required=True)
    return parser


def parse_args(argv=None):
    args = build_parser().parse_args(argv)
    for key, value in GLOBAL_DEFAULTS.items():
        if not hasattr(args, key):
            setattr(args, key, value)
    return args


def main(argv=None):
    json_mode = False
    try:
        args = parse_args(argv)
        json_mode = args.json
        LogUtils.configure(quiet=args.quiet, json_mode=args.json)
        apply_thread_cap()
        result = args.func(args)
        if args.json:
            sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")
        return 0
    except SystemExit as e:
        # --help
        return e.code if isinstance(e.code, int) else 0
    except TSwitchError as e:
        LogUtils.log_error(str(e))
        if json_mode:
            sys.stdout.write(json.dumps({"error": str(e), "code": e.code, "exit_code": e.exit_code}, sort_keys=True) + "\n")
        return e.exit_code
    except Exception as e:
        LogUtils.log_error("run failed with error:\n{}\n\n{}".format(e, traceback.format_exc()))
        return 3


if __name__ == "__main__":
    sys.exit(main())
