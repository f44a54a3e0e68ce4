"""
Accuracy, GZSL summary, significance testing and report files.
"""
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from scipy import stats
from sklearn.linear_model import Ridge
from sklearn.metrics.pairwise import cosine_similarity
from statsmodels.stats.weightstats import DescrStatsW

from dataset import read_table
from errors import (
    EmptyInput, MalformedRecord, OutOfRange, ShapeMismatch, SplitMismatch,
    TooFewSamples, UnknownClass, ZeroVariance,
)
from utils import get_logger, save_output

log = get_logger(__name__)

# Two-tailed Student t critical values at 0.05, df = 1..30
T_CRITICAL_05 = (
    12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
    2.201, 2.179, 2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086,
    2.080, 2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
)


# ── Domain Types ───────────────────────────────────────────────────

@dataclass
class AccuracyReport:
    per_class: dict
    mean_class_accuracy: float
    n_instances: int
    excluded: list = field(default_factory=list)


@dataclass
class GzslReport:
    u: float
    s: float
    H: float


@dataclass
class PairedTTestResult:
    mean_diff: float
    std_diff: float
    n: int
    t_value: float
    critical_value: float
    p_value: float
    significant: bool


@dataclass
class EvalReport:
    mode: str = "zsl"
    config: dict = field(default_factory=dict)
    zsl: Optional[AccuracyReport] = None
    seen: Optional[AccuracyReport] = None
    unseen: Optional[AccuracyReport] = None
    gzsl: Optional[GzslReport] = None
    purity_before: Optional[float] = None
    purity_after: Optional[float] = None
    purity: Optional[float] = None
    histogram: Optional[pd.DataFrame] = None
    ttests: dict = field(default_factory=dict)


# ── Accuracy ───────────────────────────────────────────────────────

def per_class_accuracy(predictions, truths, class_set):
    """
    Mean of per-class accuracies (macro average).

    Classes in `class_set` with no instance are left out of the mean and
    listed in `excluded`.
    """
    predictions = np.asarray(list(predictions), dtype=object)
    truths = np.asarray(list(truths), dtype=object)
    if predictions.shape != truths.shape:
        raise ShapeMismatch(f"{predictions.size} predictions vs {truths.size} truths")
    if truths.size == 0:
        raise EmptyInput("no instances to score")
    classes = sorted(class_set)
    unknown = sorted(set(truths) - set(classes))
    if unknown:
        raise UnknownClass(f"truth labels outside the class set: {unknown}")

    frame = pd.DataFrame({"truth": truths, "correct": predictions == truths})
    by_class = frame.groupby("truth")["correct"].mean()
    per_class = {label: float(by_class[label]) for label in classes if label in by_class.index}
    excluded = [label for label in classes if label not in by_class.index]
    if excluded:
        log.warning(f"⚠️  No instances for {len(excluded)} class(es), excluded from the mean: {excluded}")
    return AccuracyReport(
        per_class=per_class,
        mean_class_accuracy=float(np.mean(list(per_class.values()))),
        n_instances=int(truths.size),
        excluded=excluded,
    )


def harmonic_mean(u, s, scale=1.0):
    """2us/(u+s), or 0 when both are 0. `scale` is the upper bound (1 or 100)."""
    for name, value in (("u", u), ("s", s)):
        if not 0 <= value <= scale:
            raise OutOfRange(f"{name}={value} outside [0, {scale}]")
    return 0.0 if u + s == 0 else 2.0 * u * s / (u + s)


def gzsl_report(seen, unseen):
    u = unseen.mean_class_accuracy
    s = seen.mean_class_accuracy
    return GzslReport(u=u, s=s, H=harmonic_mean(u, s))


def summarize_runs(values):
    """(mean, sample std with n − 1); std is 0 for a single run."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise EmptyInput("no runs to summarize")
    std = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return float(values.mean()), std


# ── Significance ───────────────────────────────────────────────────

def t_critical(df):
    if df <= len(T_CRITICAL_05):
        return T_CRITICAL_05[df - 1]
    return float(stats.t.ppf(0.975, df))


def paired_ttest(diffs):
    """Dependent t-test on per-split differences against a zero mean."""
    diffs = np.asarray(diffs, dtype=np.float64)
    n = diffs.size
    if n < 2:
        raise TooFewSamples(f"a paired t-test needs at least 2 differences, got {n}")
    if np.ptp(diffs) == 0:
        raise ZeroVariance("all differences are equal; t is undefined")
    std = float(diffs.std(ddof=1))
    mean = float(diffs.mean())
    t_value = mean / (std / math.sqrt(n))
    critical = t_critical(n - 1)
    _, p_value, _ = DescrStatsW(diffs).ttest_mean(0.0)
    return PairedTTestResult(
        mean_diff=mean,
        std_diff=std,
        n=n,
        t_value=t_value,
        critical_value=critical,
        p_value=float(p_value),
        significant=abs(t_value) > critical,
    )


def load_split_metrics(path):
    """`split_id<TAB>value` lines -> {split_id: value}."""
    frame = read_table(path, 2)
    metrics = {}
    for line, (split_id, value) in zip(frame.index, frame.itertuples(index=False)):
        split_id = split_id.strip()
        if split_id in metrics:
            raise MalformedRecord(f"split '{split_id}' listed twice", line=int(line))
        try:
            metrics[split_id] = float(value)
        except ValueError:
            raise MalformedRecord(f"'{value}' is not a number", line=int(line))
    return metrics


def paired_differences(first, second):
    """first − second per split id, in sorted split order."""
    if set(first) != set(second):
        missing = sorted(set(first) ^ set(second))
        raise SplitMismatch(f"split ids differ between result files: {missing}")
    return [first[key] - second[key] for key in sorted(first)]


# ── Baseline ───────────────────────────────────────────────────────

def ridge_baseline(train, test, alpha=1.0):
    """
    Ridge regression from visual features to class embeddings, then the
    cosine-nearest unseen class embedding. Scored on the unseen test instances.
    """
    seen = train.seen_only()
    model = Ridge(alpha=alpha).fit(seen.features(), seen.embeddings.matrix(seen.labels()))
    unseen_test = test.unseen_only()
    if not len(unseen_test):
        raise EmptyInput("no unseen-class test instances")
    labels = sorted(train.split.unseen)
    similarity = cosine_similarity(model.predict(unseen_test.features()),
                                   train.embeddings.matrix(labels))
    predicted = [labels[i] for i in np.argmax(similarity, axis=1)]
    return per_class_accuracy(predicted, unseen_test.labels(), labels)


# ── Report files ───────────────────────────────────────────────────
# `section.key = value` lines, floats with 4 decimals, then a raw
# `[per_class]` block of `section<TAB>label<TAB>accuracy` lines.

def _value(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.4f}"
    return str(value)


def render_report(report):
    lines = [f"report.mode = {report.mode}"]
    lines += [f"config.{key} = {value}" for key, value in sorted(report.config.items())]

    def _accuracy(section, acc):
        if acc is not None:
            lines.append(f"{section}.mean_class_accuracy = {_value(acc.mean_class_accuracy)}")
            lines.append(f"{section}.n_instances = {_value(acc.n_instances)}")
            if acc.excluded:
                lines.append(f"{section}.excluded = {','.join(acc.excluded)}")

    _accuracy("zsl", report.zsl)
    _accuracy("seen", report.seen)
    _accuracy("unseen", report.unseen)
    if report.gzsl is not None:
        lines += [f"gzsl.{key} = {_value(getattr(report.gzsl, key))}" for key in ("u", "s", "H")]
    if report.purity_before is not None:
        lines.append(f"purity.before = {_value(report.purity_before)}")
    if report.purity_after is not None:
        lines.append(f"purity.after = {_value(report.purity_after)}")
    if report.purity is not None:
        lines.append(f"purity.value = {_value(report.purity)}")
    if report.histogram is not None:
        for label, row in report.histogram.iterrows():
            lines += [f"histogram.{label}.{j} = {_value(v)}" for j, v in row.items()]
    for name, result in sorted(report.ttests.items()):
        for key in ("mean_diff", "std_diff", "n", "t_value", "critical_value", "p_value", "significant"):
            lines.append(f"ttest.{name}.{key} = {_value(getattr(result, key))}")

    raw = [
        f"{section}\t{label}\t{accuracy!r}"
        for section, acc in (("zsl", report.zsl), ("seen", report.seen), ("unseen", report.unseen))
        if acc is not None
        for label, accuracy in acc.per_class.items()
    ]
    if raw:
        lines.append("[per_class]")
        lines += raw
    return "\n".join(lines) + "\n"


def emit_report(report, path):
    return save_output(render_report(report), path)


def _parse_value(text):
    if text in ("true", "false"):
        return text == "true"
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def parse_report(path):
    """
    Nested mapping of a report file: `a.b.c = v` becomes result[a][b][c],
    and the raw block becomes result["per_class"][section][label].
    """
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    result = {}
    in_raw = False
    for number, line in enumerate(lines, start=1):
        if not line:
            continue
        if line == "[per_class]":
            in_raw = True
            continue
        if in_raw:
            parts = line.split("\t")
            if len(parts) != 3:
                raise MalformedRecord("expected section, label and accuracy", line=number)
            result.setdefault("per_class", {}).setdefault(parts[0], {})[parts[1]] = float(parts[2])
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise MalformedRecord("expected 'key = value'", line=number)
        *path_keys, leaf = key.split(".")
        node = result
        for part in path_keys:
            node = node.setdefault(part, {})
        node[leaf] = _parse_value(value)
    return result
