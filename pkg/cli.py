"""
Command-line entry point.

    python run.py gen-synth --out-dir data --test-fraction 0.2
    python run.py train --config claster.cfg --data-prefix data/synth --out models/claster.ckpt
    python run.py evaluate --checkpoint models/claster.ckpt --instances data/synth_test.tsv --mode gzsl --out outputs/report.txt

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""
import argparse
import sys
from pathlib import Path

import numpy as np

from clustering import cluster_histogram, purity
from dataset import (
    SyntheticSpec, generate_synthetic, holdout_split, load_dataset, load_instances, write_dataset,
)
from errors import ClasterError, EmptyInput, UnknownClass, UsageError
from evaluation import (
    EvalReport, emit_report, gzsl_report, load_split_metrics, paired_differences,
    paired_ttest, per_class_accuracy,
)
from inference import UNSEEN
from pipeline import TrainedModel, load_config, run_pipeline, sweep_clusters
from utils import MODELS_DIR, OUTPUTS_DIR, configure_logging, get_logger, save_output

log = get_logger(__name__)


# ── Helpers ────────────────────────────────────────────────────────

def _int_list(text):
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def _gate_tau(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got '{text}'")
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError(f"tau must lie in (0, 1), got {text}")
    return value


def _overrides(args):
    """--set pairs first, dedicated flags on top."""
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--set expects key=value, got '{item}'")
        overrides[key.strip()] = value.strip()
    for key in ("seed", "k_clusters", "ablation_mode"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return overrides


def _data_paths(args):
    """Explicit file flags win over --data-prefix."""
    prefix = args.data_prefix
    paths = {}
    for kind in ("instances", "embeddings", "split"):
        explicit = getattr(args, kind)
        if explicit is None and prefix is None:
            raise UsageError(f"--{kind} or --data-prefix is required")
        paths[kind] = explicit or f"{prefix}_{kind}.tsv"
    return paths


def _load_training_data(args):
    paths = _data_paths(args)
    return load_dataset(paths["instances"], paths["embeddings"], paths["split"])


def _load_test_instances(model, path):
    instances = load_instances(path, d_v=model.d_v)
    known = set(model.seen_labels) | set(model.unseen_labels)
    unknown = sorted({inst.class_label for inst in instances} - known)
    if unknown:
        raise UnknownClass(f"test classes unknown to the checkpoint: {unknown}")
    return instances


def _columns(instances):
    features = np.vstack([inst.features for inst in instances])
    return features, [inst.class_label for inst in instances], [inst.id for inst in instances]


def _predict(model, instances, mode, tau=None):
    """(ids, routes, predictions, truths) for the rows a mode scores."""
    if mode == "zsl":
        unseen = set(model.unseen_labels)
        instances = [inst for inst in instances if inst.class_label in unseen]
        if not instances:
            raise EmptyInput("no unseen-class instances to evaluate")
        features, truths, ids = _columns(instances)
        predicted = model.predict_zsl(features)
        return ids, [UNSEEN] * len(predicted), predicted, truths
    features, truths, ids = _columns(instances)
    routed = model.predict_gzsl(features, tau=tau)
    return ids, [route for route, _ in routed], [label for _, label in routed], truths


# ── Commands ───────────────────────────────────────────────────────

def cmd_gen_synth(args):
    spec = SyntheticSpec(
        num_classes=args.num_classes, per_class=args.per_class, d_v=args.d_v, d_s=args.d_s,
        noise_scale=args.noise_scale, seed=args.seed, unseen_fraction=args.unseen_fraction,
    )
    dataset = generate_synthetic(spec)
    prefix = Path(args.out_dir) / args.prefix
    paths = [f"{prefix}_instances.tsv", f"{prefix}_embeddings.tsv", f"{prefix}_split.tsv"]
    if args.test_fraction > 0:
        train, test = holdout_split(dataset, args.test_fraction, seed=args.seed)
        paths.append(f"{prefix}_test.tsv")
        write_dataset(train, *paths[:3], test=test, test_path=paths[3])
    else:
        write_dataset(dataset, *paths)
    for path in paths:
        print(f"✅ Wrote {path}")
    return 0


def cmd_train(args):
    config = load_config(args.config, _overrides(args))
    dataset = _load_training_data(args)
    result = run_pipeline(dataset, config)

    out = Path(args.out)
    log_path = Path(args.progress_log) if args.progress_log else out.with_suffix(".progress.tsv")
    result.model.save(out)
    save_output(result.progress_log(), log_path)

    print(f"✅ Checkpoint: {out}")
    print(f"✅ Progress log: {log_path}")
    if result.purity_before is not None:
        print(f"   Purity before RL: {result.purity_before:.4f}")
        print(f"   Purity after RL:  {result.purity_after:.4f}")
    return 0


def cmd_evaluate(args):
    model = TrainedModel.load(args.checkpoint)
    instances = _load_test_instances(model, args.instances)
    _, _, predicted, truths = _predict(model, instances, args.mode, tau=args.tau)

    report = EvalReport(
        mode=args.mode,
        config=model.config.flat(),
        purity_before=model.purity_before,
        purity_after=model.purity_after,
    )
    if args.mode == "zsl":
        report.zsl = per_class_accuracy(predicted, truths, model.unseen_labels)
    else:
        predicted = np.asarray(predicted, dtype=object)
        truths = np.asarray(truths, dtype=object)
        seen_rows = np.isin(truths, model.seen_labels)
        if not seen_rows.any() or seen_rows.all():
            raise EmptyInput("gzsl evaluation needs both seen and unseen test instances")
        report.seen = per_class_accuracy(predicted[seen_rows], truths[seen_rows], model.seen_labels)
        report.unseen = per_class_accuracy(predicted[~seen_rows], truths[~seen_rows], model.unseen_labels)
        report.gzsl = gzsl_report(report.seen, report.unseen)

    emit_report(report, args.out)
    if report.zsl is not None:
        print(f"✅ ZSL mean class accuracy: {report.zsl.mean_class_accuracy:.4f}")
    else:
        print(f"✅ GZSL u={report.gzsl.u:.4f} s={report.gzsl.s:.4f} H={report.gzsl.H:.4f}")
    print(f"   Report: {args.out}")
    return 0


def cmd_predict(args):
    model = TrainedModel.load(args.checkpoint)
    instances = _load_test_instances(model, args.instances)
    ids, routes, predicted, truths = _predict(model, instances, args.mode, tau=args.tau)
    lines = "".join(
        f"{inst_id}\t{route}\t{label}\t{truth}\n"
        for inst_id, route, label, truth in zip(ids, routes, predicted, truths)
    )
    save_output(lines, args.out)
    print(f"✅ {len(ids)} predictions written to {args.out}")
    return 0


def cmd_cluster_stats(args):
    model = TrainedModel.load(args.checkpoint)
    instances = _load_test_instances(model, args.instances)
    features, labels, _ = _columns(instances)
    assignments = model.psi_assignments(features)
    scored = purity(assignments, labels, model.clusters.k)
    report = EvalReport(
        mode="cluster-stats",
        config=model.config.flat(),
        purity_before=model.purity_before,
        purity_after=model.purity_after,
        purity=scored.purity,
        histogram=cluster_histogram(assignments, labels, model.clusters.k),
    )
    emit_report(report, args.out)
    print(f"✅ Purity over {scored.n_points} instances: {scored.purity:.4f}")
    print(f"   Report: {args.out}")
    return 0


def cmd_ttest(args):
    diffs = paired_differences(load_split_metrics(args.first), load_split_metrics(args.second))
    result = paired_ttest(diffs)
    report = EvalReport(mode="ttest", ttests={args.name: result})
    if args.out:
        emit_report(report, args.out)
    print(f"▶  Paired t-test over {result.n} splits")
    print(f"   mean diff {result.mean_diff:.4f}, std {result.std_diff:.4f}")
    print(f"   t = {result.t_value:.4f} (critical {result.critical_value:.3f}, p = {result.p_value:.4f})")
    print(f"   {'significant' if result.significant else 'not significant'} at 0.05")
    return 0


def cmd_sweep(args):
    config = load_config(args.config, _overrides(args))
    paths = _data_paths(args)
    train = load_dataset(paths["instances"], paths["embeddings"], paths["split"])
    test = load_dataset(args.test_instances, paths["embeddings"], paths["split"], require_seen=False)
    table = sweep_clusters(train, test, config, args.ks, args.seeds)
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    if args.out:
        save_output(table.to_csv(index=False, sep="\t", float_format="%.4f"), args.out)
        print(f"✅ Sweep table: {args.out}")
    return 0


# ── Parser ─────────────────────────────────────────────────────────

def _add_config_flags(parser):
    parser.add_argument("--config", help="config file of `key = value` lines")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key; repeatable, wins over the file")
    parser.add_argument("--seed", type=int, help="override the `seed` config key")
    parser.add_argument("--k-clusters", type=int, help="override the `k_clusters` config key")
    parser.add_argument("--ablation-mode",
                        choices=("full", "kmeans_only", "random_clustering", "no_clustering"),
                        help="override the `ablation_mode` config key")


def _add_data_flags(parser):
    parser.add_argument("--data-prefix",
                        help="prefix P for P_instances.tsv, P_embeddings.tsv and P_split.tsv")
    parser.add_argument("--instances", help="training instances file")
    parser.add_argument("--embeddings", action="append",
                        help="class embeddings file; repeat to average several sources")
    parser.add_argument("--split", help="seen/unseen split file")


def _add_model_flags(parser, out_help):
    parser.add_argument("--checkpoint", required=True, help="trained model checkpoint")
    parser.add_argument("--instances", required=True, help="labelled instances file")
    parser.add_argument("--out", required=True, help=out_help)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="claster",
        description="Zero-shot action recognition with clustered visual-semantic representations",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-synth", help="write a synthetic dataset")
    p.add_argument("--out-dir", default=str(Path("data")), help="output folder")
    p.add_argument("--prefix", default="synth", help="file name prefix")
    p.add_argument("--num-classes", type=int, default=20, help="number of classes")
    p.add_argument("--per-class", type=int, default=50, help="instances per class")
    p.add_argument("--d-v", type=int, default=32, help="visual feature dimension")
    p.add_argument("--d-s", type=int, default=8, help="class embedding dimension")
    p.add_argument("--noise-scale", type=float, default=0.1,
                   help="noise relative to the mean distance between class means")
    p.add_argument("--unseen-fraction", type=float, default=0.5, help="share of unseen classes")
    p.add_argument("--test-fraction", type=float, default=0.0,
                   help="share of seen instances held out into PREFIX_test.tsv with all unseen instances")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.set_defaults(handler=cmd_gen_synth)

    p = sub.add_parser("train", help="run the full training pipeline")
    _add_config_flags(p)
    _add_data_flags(p)
    p.add_argument("--out", default=str(MODELS_DIR / "claster.ckpt"), help="checkpoint path")
    p.add_argument("--progress-log", help="RL progress log path (default: next to the checkpoint)")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on labelled test instances")
    _add_model_flags(p, "report path")
    p.add_argument("--mode", choices=("zsl", "gzsl"), default="zsl", help="evaluation protocol")
    p.add_argument("--tau", type=_gate_tau, help="gate threshold (default: the checkpoint's)")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("predict", help="dump per-instance predictions")
    _add_model_flags(p, "prediction dump path")
    p.add_argument("--mode", choices=("zsl", "gzsl"), default="zsl", help="prediction protocol")
    p.add_argument("--tau", type=_gate_tau, help="gate threshold (default: the checkpoint's)")
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("cluster-stats", help="purity and per-class cluster histogram")
    _add_model_flags(p, "report path")
    p.set_defaults(handler=cmd_cluster_stats)

    p = sub.add_parser("ttest", help="paired t-test over per-split results")
    p.add_argument("--first", required=True, help="per-split results of the first method")
    p.add_argument("--second", required=True, help="per-split results of the second method")
    p.add_argument("--name", default="first_vs_second", help="label used in the report")
    p.add_argument("--out", help="optional report path")
    p.set_defaults(handler=cmd_ttest)

    p = sub.add_parser("sweep", help="unseen accuracy across cluster counts")
    _add_config_flags(p)
    _add_data_flags(p)
    p.add_argument("--test-instances", required=True, help="test instances file")
    p.add_argument("--ks", type=_int_list, default=[2, 4, 6, 8], help="comma-separated cluster counts")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2], help="comma-separated seeds")
    p.add_argument("--out", default=str(OUTPUTS_DIR / "sweep.tsv"), help="sweep table path")
    p.set_defaults(handler=cmd_sweep)
    return parser


def main(argv=None):
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ClasterError as e:
        phase = f" [{e.phase}]" if e.phase else ""
        print(f"error{phase}: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
