"""Global confusion aggregation, objective metrics and Kendall's tau-b."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .dataset import Sample
from .matching import ConfusionVector, InstanceEvaluation


class EmptyAggregate(ValueError):
    pass


class MetricKind(enum.Enum):
    F1 = "f1"
    MCC = "mcc"
    RECALL_MINUS_FPR = "rec-fpr"

    @classmethod
    def parse(cls, name: str) -> "MetricKind":
        key = name.strip().lower().replace("_", "-")
        aliases = {"recallminusfpr": "rec-fpr", "recall-minus-fpr": "rec-fpr", "rec-fpr": "rec-fpr"}
        key = aliases.get(key.replace(" ", ""), key)
        for kind in cls:
            if kind.value == key:
                return kind
        raise ValueError(f"unknown metric {name!r}; choose one of {[k.value for k in cls]}")


@dataclass(frozen=True)
class GlobalConfusion:
    tp: float
    tn: float
    fp: float
    fn: float
    n_instances: int


def aggregate_confusion(cs: Iterable[ConfusionVector]) -> GlobalConfusion:
    columns: list[list[float]] = [[], [], [], []]
    n = 0
    for c in cs:
        for col, value in zip(columns, c.normalized):
            col.append(value)
        n += 1
    tp, tn, fp, fn = (math.fsum(col) for col in columns)
    return GlobalConfusion(tp, tn, fp, fn, n)


def phi_apply(kind: MetricKind, g: GlobalConfusion) -> float:
    """Objective value; any zero denominator makes the metric 0."""
    if g.n_instances == 0:
        raise EmptyAggregate("cannot score an empty aggregate")
    tp, tn, fp, fn = g.tp, g.tn, g.fp, g.fn
    if kind is MetricKind.F1:
        denom = 2 * tp + fp + fn
        return 2 * tp / denom if denom > 0 else 0.0
    if kind is MetricKind.RECALL_MINUS_FPR:
        pos, neg = tp + fn, fp + tn
        if pos <= 0 or neg <= 0:
            return 0.0
        return tp / pos - fp / neg
    if kind is MetricKind.MCC:
        factors = (tp + fp, tp + fn, tn + fp, tn + fn)
        if any(f <= 0 for f in factors):
            return 0.0
        # exact ratio: the float product of four small factors can underflow to 0
        num = Fraction(tp) * Fraction(tn) - Fraction(fp) * Fraction(fn)
        prod = math.prod(Fraction(f) for f in factors)
        return math.copysign(math.sqrt(num * num / prod), num) if num else 0.0
    raise ValueError(f"unsupported metric {kind!r}")


def _merge_count(values: list, lo: int, hi: int, buf: list) -> int:
    """Sort values[lo:hi] in place; return the number of strict inversions."""
    if hi - lo < 2:
        return 0
    mid = (lo + hi) // 2
    swaps = _merge_count(values, lo, mid, buf) + _merge_count(values, mid, hi, buf)
    i, j, k = lo, mid, lo
    while i < mid and j < hi:
        if values[j] < values[i]:
            buf[k] = values[j]
            swaps += mid - i
            j += 1
        else:
            buf[k] = values[i]
            i += 1
        k += 1
    buf[k : k + mid - i] = values[i:mid]
    k += mid - i
    buf[k : k + hi - j] = values[j:hi]
    values[lo:hi] = buf[lo:hi]
    return swaps


def _tied_pairs(sorted_keys: Sequence) -> int:
    total, run = 0, 1
    for a, b in zip(sorted_keys, sorted_keys[1:]):
        if a == b:
            run += 1
        else:
            total += run * (run - 1) // 2
            run = 1
    return total + run * (run - 1) // 2


def kendall_tau(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Kendall's tau-b in O(n log n) (Knight's method). All-tied input gives 0."""
    n = len(xs)
    if n != len(ys):
        raise ValueError(f"length mismatch: {n} vs {len(ys)}")
    if n < 2:
        raise ValueError("need at least two observations")
    pairs = sorted(zip(xs, ys))
    n0 = n * (n - 1) // 2
    tied_x = _tied_pairs([p[0] for p in pairs])
    tied_xy = _tied_pairs(pairs)
    y_order = [p[1] for p in pairs]
    discordant = _merge_count(y_order, 0, n, [None] * n)
    tied_y = _tied_pairs(y_order)
    # pairs tied in neither variable are concordant or discordant
    concordant = n0 - tied_x - tied_y + tied_xy - discordant
    only_x = tied_x - tied_xy
    only_y = tied_y - tied_xy
    denom = (concordant + discordant + only_x) * (concordant + discordant + only_y)
    if denom == 0:
        return 0.0
    return (concordant - discordant) / math.sqrt(denom)


ScalarStrategy = Callable[[InstanceEvaluation, Sample], "tuple[float, float]"]


def weakness_count_scalars(ev: InstanceEvaluation, sample: Sample) -> tuple[float, float]:
    """Fewer weaknesses ranks better on both sides."""
    return -float(ev.n_predicted), -float(len(sample.weaknesses))


def verdict_scalars(ev: InstanceEvaluation, sample: Sample) -> tuple[float, float]:
    """Judge says pass iff it found nothing; the human side is the recorded verdict."""
    if sample.verdict is None:
        raise ValueError(f"sample {sample.id!r} has no verdict")
    return float(ev.n_predicted == 0), float(sample.verdict == "pass")


SCALAR_STRATEGIES: dict[str, ScalarStrategy] = {
    "weakness-count": weakness_count_scalars,
    "verdict": verdict_scalars,
}


def human_alignment_tau(
    evals: Sequence[tuple[InstanceEvaluation, Sample]],
    strategy: ScalarStrategy | str = "weakness-count",
) -> float:
    if isinstance(strategy, str):
        strategy = SCALAR_STRATEGIES[strategy]
    pairs = [strategy(ev, s) for ev, s in evals]
    return kendall_tau([p for p, _ in pairs], [h for _, h in pairs])


REPORT_COLUMNS = ("task_family", "metric", "value")


def write_metric_report(rows: Iterable[tuple[str, str, float]], csv_path: str | Path, json_path: str | Path) -> None:
    rows = [(family, metric, float(value)) for family, metric, value in rows]
    with Path(csv_path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for family, metric, value in rows:
            writer.writerow([family, metric, repr(value)])
    Path(json_path).write_text(
        json.dumps([dict(zip(REPORT_COLUMNS, r)) for r in rows], indent=2) + "\n", encoding="utf-8"
    )
