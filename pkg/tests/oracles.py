"""Brute-force reference implementations the fast metrics must match
exactly. Kept deliberately naive: direct pair enumeration and full
rescans per threshold."""

import math


def auroc_pairwise(scores):
    """O(P*N) pair count: 1 per correctly ordered pair, 0.5 per tie."""
    pos = [s for s, y in scores if y]
    neg = [s for s, y in scores if not y]
    total = []
    for p in pos:
        for n in neg:
            if p > n:
                total.append(1.0)
            elif p == n:
                total.append(0.5)
    num = math.fsum(total)
    return num / (len(pos) * len(neg))


def auprc_stepscan(scores):
    """Threshold-by-threshold rescan of the whole dataset."""
    p_total = sum(1 for _, y in scores if y)
    thresholds = sorted({s for s, _ in scores}, reverse=True)
    ap = 0.0
    r_prev = 0.0
    for t in thresholds:
        tp = sum(1 for s, y in scores if s >= t and y)
        fp = sum(1 for s, y in scores if s >= t and not y)
        r = tp / p_total
        ap += (r - r_prev) * (tp / (tp + fp))
        r_prev = r
    return ap


def r_squared_direct(ys, yhats):
    n = len(ys)
    ybar = math.fsum(ys) / n
    ss_res = math.fsum((y - yh) ** 2 for y, yh in zip(ys, yhats))
    ss_tot = math.fsum((y - ybar) ** 2 for y in ys)
    return 1.0 - ss_res / ss_tot
