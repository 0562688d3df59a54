"""Cost and classification metrics.

Definitions follow the actuarial evaluation conventions: R-squared as
1 - SSres/SStot, NMAE as MAE over mean actual cost (in percent), AUROC as
the Mann-Whitney rank statistic with half credit for ties, and average
precision as the step-sum over descending score thresholds. Accumulations
use exact compensated summation (math.fsum).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from typing import Sequence


class MetricError(Exception):
    pass


class DegenerateActuals(MetricError):
    pass


class ZeroMeanActual(MetricError):
    pass


class SingleClass(MetricError):
    pass


class NoPositives(MetricError):
    pass


class ZeroVariance(MetricError):
    pass


AGE_BANDS = ((0, 17, "0-17"), (18, 34, "18-34"), (35, 49, "35-49"),
             (50, 64, "50-64"), (65, None, "65+"))


def age_band(age: int) -> str:
    for lo, hi, name in AGE_BANDS:
        if age >= lo and (hi is None or age <= hi):
            return name
    return AGE_BANDS[0][2]


@dataclass(frozen=True)
class EvalPair:
    actual: float
    predicted: float
    age_band: str | None = None
    sex: str | None = None


def _actuals(pairs: Sequence[EvalPair]) -> list[float]:
    return [p.actual for p in pairs]


def r_squared(pairs: Sequence[EvalPair]) -> float:
    """1 - sum((y - yhat)^2) / sum((y - ybar)^2); can be negative."""
    if len(pairs) < 2:
        raise DegenerateActuals("need at least 2 pairs")
    ys = _actuals(pairs)
    ybar = math.fsum(ys) / len(ys)
    ss_tot = math.fsum((y - ybar) ** 2 for y in ys)
    if ss_tot == 0.0:
        raise DegenerateActuals("actuals have zero variance")
    ss_res = math.fsum((p.actual - p.predicted) ** 2 for p in pairs)
    return 1.0 - ss_res / ss_tot


def mae(pairs: Sequence[EvalPair]) -> float:
    """Mean absolute error in dollars."""
    if not pairs:
        raise MetricError("need at least 1 pair")
    return math.fsum(abs(p.predicted - p.actual) for p in pairs) / len(pairs)


def nmae(pairs: Sequence[EvalPair]) -> float:
    """MAE normalized by mean actual cost, in percent."""
    mean_actual = math.fsum(_actuals(pairs)) / len(pairs) if pairs else 0.0
    if not pairs or mean_actual <= 0.0:
        raise ZeroMeanActual("mean actual cost must be > 0")
    return mae(pairs) / mean_actual * 100.0


def auroc(scores: Sequence[tuple[float, int]]) -> float:
    """P(random positive outscores random negative), ties count half.

    O(n log n) via tied ranks; exactly equals the pairwise count.
    """
    pos = sum(1 for _, y in scores if y)
    neg = len(scores) - pos
    if pos == 0 or neg == 0:
        raise SingleClass("need at least one positive and one negative")
    order = sorted(range(len(scores)), key=lambda i: scores[i][0])
    ranks = [0.0] * len(scores)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and scores[order[j + 1]][0] == scores[order[i]][0]:
            j += 1
        avg = (i + j + 2) / 2.0          # 1-based average rank, exact .5 steps
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    rank_sum = math.fsum(ranks[i] for i, (_, y) in enumerate(scores) if y)
    u = rank_sum - pos * (pos + 1) / 2.0
    return u / (pos * neg)


def auprc(scores: Sequence[tuple[float, int]]) -> float:
    """Average precision: sum of (R_k - R_{k-1}) * P_k at descending
    score thresholds, equal scores grouped into one step."""
    p_total = sum(1 for _, y in scores if y)
    if p_total == 0:
        raise NoPositives("need at least one positive")
    by_score = sorted(scores, key=lambda sy: -sy[0])
    ap = 0.0
    tp = fp = 0
    r_prev = 0.0
    i = 0
    n = len(by_score)
    while i < n:
        j = i
        while j + 1 < n and by_score[j + 1][0] == by_score[i][0]:
            j += 1
        for k in range(i, j + 1):
            if by_score[k][1]:
                tp += 1
            else:
                fp += 1
        r = tp / p_total
        ap += (r - r_prev) * (tp / (tp + fp))
        r_prev = r
        i = j + 1
    return ap


def top_percentile_auc(pairs: Sequence[EvalPair], p: float = 1.0) -> float:
    """AUROC of identifying top-p% actual-cost patients from predictions.

    The cutoff is the nearest-rank upper percentile: the ceil(n*p/100)-th
    largest actual; ties at the cutoff are all labeled positive.
    """
    if not 0 < p < 100:
        raise MetricError("percentile must be in (0, 100)")
    n = len(pairs)
    if n == 0:
        raise MetricError("need pairs")
    k = math.ceil(n * p / 100.0)
    cutoff = sorted(_actuals(pairs), reverse=True)[k - 1]
    return auroc([(pr.predicted, int(pr.actual >= cutoff)) for pr in pairs])


def top_percentile_ap(pairs: Sequence[EvalPair], p: float = 1.0) -> float:
    """Average precision of the same top-p% labeling."""
    n = len(pairs)
    k = math.ceil(n * p / 100.0)
    cutoff = sorted(_actuals(pairs), reverse=True)[k - 1]
    return auprc([(pr.predicted, int(pr.actual >= cutoff)) for pr in pairs])


@dataclass
class SliceTable:
    rows: dict[str, float]            # slice name -> NMAE (percent)
    counts: dict[str, int]
    spread: float                     # max - min over reported slices
    skipped: list[str]


def sliced_nmae(pairs: Sequence[EvalPair]) -> SliceTable:
    """NMAE per age band and per sex, each over the slice's own mean actual."""
    groups: dict[str, list[EvalPair]] = {}
    for name in [b[2] for b in AGE_BANDS]:
        groups[f"age:{name}"] = []
    for name in ("F", "M"):
        groups[f"sex:{name}"] = []
    for p in pairs:
        if p.age_band is not None:
            groups.setdefault(f"age:{p.age_band}", []).append(p)
        if p.sex is not None:
            groups.setdefault(f"sex:{p.sex}", []).append(p)
    rows, counts, skipped = {}, {}, []
    for name, members in groups.items():
        try:
            rows[name] = nmae(members)
            counts[name] = len(members)
        except (ZeroMeanActual, MetricError):
            skipped.append(name)
    spread = (max(rows.values()) - min(rows.values())) if rows else 0.0
    return SliceTable(rows=rows, counts=counts, spread=spread, skipped=skipped)


def censor(pairs: Sequence[EvalPair],
           threshold: float = 250_000.0) -> tuple[list[EvalPair], int]:
    """Drop pairs whose predicted cost exceeds the threshold.

    Returns (kept pairs, removed count).
    """
    kept = [p for p in pairs if p.predicted <= threshold]
    return kept, len(pairs) - len(kept)


def pearson_r_squared(pairs: Sequence[EvalPair]) -> float:
    """Squared sample Pearson correlation between actual and predicted."""
    n = len(pairs)
    if n < 2:
        raise ZeroVariance("need at least 2 pairs")
    xs = [p.actual for p in pairs]
    ys = [p.predicted for p in pairs]
    mx = math.fsum(xs) / n
    my = math.fsum(ys) / n
    sxx = math.fsum((x - mx) ** 2 for x in xs)
    syy = math.fsum((y - my) ** 2 for y in ys)
    if sxx == 0.0 or syy == 0.0:
        raise ZeroVariance("both series need nonzero variance")
    sxy = math.fsum((x - mx) * (y - my) for x, y in zip(xs, ys))
    r = sxy / math.sqrt(sxx * syy)
    return r * r


@dataclass
class MetricReport:
    n: int
    r_squared: float
    mae: float
    nmae: float
    auroc: float                       # top-1% identification AUC
    auprc: float                       # top-1% identification AP
    pearson_r_squared: float
    slices: SliceTable
    censored_count: int = 0
    label: str = "model"
    extras: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    def write_csv(self, path) -> None:
        """Comparison-table CSV: model,r_squared,nmae."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "r_squared", "nmae"])
            w.writerow([self.label, repr(self.r_squared), repr(self.nmae)])


def build_report(pairs: Sequence[EvalPair], label: str = "model",
                 censored_count: int = 0, top_p: float = 1.0,
                 extras: dict | None = None) -> MetricReport:
    return MetricReport(
        n=len(pairs),
        r_squared=r_squared(pairs),
        mae=mae(pairs),
        nmae=nmae(pairs),
        auroc=top_percentile_auc(pairs, top_p),
        auprc=top_percentile_ap(pairs, top_p),
        pearson_r_squared=pearson_r_squared(pairs),
        slices=sliced_nmae(pairs),
        censored_count=censored_count,
        label=label,
        extras=extras or {},
    )
