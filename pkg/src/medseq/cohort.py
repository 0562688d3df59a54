"""Cohort selection, chronic-condition labeling, and the two evaluation
pipelines (next-year cost, chronic disease onset).

The condition table ships as an editable CSV (ccw_name, caliber_name,
icd10cm_prefixes); a condition is positive for a patient when any
diagnosis in the first months of the target year starts with one of its
prefixes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from datetime import date
from importlib import resources

from . import metrics
from .metrics import EvalPair, MetricReport, SingleClass, age_band
from .montecarlo import (SimulationRequest, first_match_days,
                         simulate_futures, _predicate_ids)
from .sequencer import TokenSequence, split_at, truncate
from .synth import PatientTimeline
from .vocab import CodeSystem, Vocabulary, normalize_code

NOT_MAPPED = "NOT_MAPPED"

# The combined-dementia row answers for both of its CCW constituents.
_CONDITION_ALIASES = {
    "alzheimer's disease": "Dementia (Alzheimer's disease + non-Alzheimer's dementia)",
    "non-alzheimer's dementia": "Dementia (Alzheimer's disease + non-Alzheimer's dementia)",
    "non alzheimer's dementia": "Dementia (Alzheimer's disease + non-Alzheimer's dementia)",
}


class CohortError(Exception):
    pass


class UnknownCondition(CohortError):
    pass


@dataclass
class SoaCohortCriteria:
    baseline_year: int
    target_year: int
    require_rx_data: bool = True
    exclude_any_capitation: bool = True
    min_baseline_enrollment_months: int = 12

    def __post_init__(self):
        if self.target_year != self.baseline_year + 1:
            raise CohortError("target_year must be baseline_year + 1")


# Exclusion reasons, applied in this order; each patient counts once.
NO_RX = "NO_RX"
CAPITATION = "CAPITATION"
ENROLLMENT = "ENROLLMENT"
MISSING_ENROLLMENT = "MISSING_ENROLLMENT"


@dataclass
class FilterReport:
    included: int
    excluded: dict[str, int]

    @property
    def total(self) -> int:
        return self.included + sum(self.excluded.values())


def soa_filter(timelines: list[PatientTimeline],
               criteria: SoaCohortCriteria) -> tuple[list[PatientTimeline], FilterReport]:
    """Apply the cohort rules: rx coverage, then capitation, then enrollment."""
    included = []
    excluded = {NO_RX: 0, CAPITATION: 0, ENROLLMENT: 0, MISSING_ENROLLMENT: 0}
    years = (criteria.baseline_year, criteria.target_year)
    for t in timelines:
        base = t.enrollment.get(criteria.baseline_year)
        if base is None:
            excluded[MISSING_ENROLLMENT] += 1
            continue
        if criteria.require_rx_data and not all(
                t.enrollment[y].rx for y in years if y in t.enrollment):
            excluded[NO_RX] += 1
            continue
        if criteria.exclude_any_capitation and any(
                t.enrollment[y].capitated for y in years if y in t.enrollment):
            excluded[CAPITATION] += 1
            continue
        if base.months < criteria.min_baseline_enrollment_months:
            excluded[ENROLLMENT] += 1
            continue
        included.append(t)
    return included, FilterReport(len(included), excluded)


@dataclass(frozen=True)
class ConditionRow:
    ccw_name: str
    caliber_name: str          # NOT_MAPPED when absent from the comparator
    icd10cm_prefixes: tuple[str, ...]

    @property
    def mapped(self) -> bool:
        return self.caliber_name != NOT_MAPPED


class ConditionMap:
    def __init__(self, rows: list[ConditionRow]):
        self.rows = rows
        self._by_name = {r.ccw_name.lower(): r for r in rows}

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def mapped_rows(self) -> list[ConditionRow]:
        return [r for r in self.rows if r.mapped]

    def map_condition(self, ccw_name: str) -> str:
        key = ccw_name.strip().lower()
        key = _CONDITION_ALIASES.get(key, key).lower()
        row = self._by_name.get(key)
        if row is None:
            raise UnknownCondition(f"no CCW condition named {ccw_name!r}")
        return row.caliber_name

    def with_rows(self, extra: list[ConditionRow]) -> "ConditionMap":
        return ConditionMap(self.rows + extra)

    @classmethod
    def load(cls, path=None) -> "ConditionMap":
        if path is None:
            ref = resources.files("medseq.data").joinpath("ccw_caliber_map.csv")
            with ref.open("r", encoding="utf-8") as fh:
                return cls._parse(fh)
        with open(path, "r", encoding="utf-8", newline="") as fh:
            return cls._parse(fh)

    @classmethod
    def _parse(cls, fh) -> "ConditionMap":
        reader = csv.DictReader(fh)
        expected = ["ccw_name", "caliber_name", "icd10cm_prefixes"]
        if reader.fieldnames != expected:
            raise CohortError(f"condition map header must be {expected}")
        rows = []
        for rec in reader:
            prefixes = tuple(p.strip().upper() for p in
                             rec["icd10cm_prefixes"].split(";") if p.strip())
            rows.append(ConditionRow(rec["ccw_name"].strip(),
                                     rec["caliber_name"].strip(), prefixes))
        return cls(rows)


def _window_end(target_year: int, window_months: int) -> date:
    if window_months >= 12:
        return date(target_year, 12, 31)
    first_after = date(target_year, window_months + 1, 1)
    return date.fromordinal(first_after.toordinal() - 1)


def label_chronic(timeline: PatientTimeline, cmap: ConditionMap,
                  target_year: int, window_months: int = 6) -> dict[str, int]:
    """Binary per-condition labels from diagnoses in the first months of
    the target year."""
    start = date(target_year, 1, 1)
    end = _window_end(target_year, window_months)
    codes = [normalize_code(CodeSystem.ICD10CM, e.code)
             for e in timeline.events
             if e.system is CodeSystem.ICD10CM and start <= e.date <= end]
    labels = {}
    for row in cmap.rows:
        labels[row.ccw_name] = int(any(
            c.startswith(p) for c in codes for p in row.icd10cm_prefixes))
    return labels


def patient_seed(base_seed: int, patient_id: str) -> int:
    """Stable per-patient simulation seed, independent of cohort order."""
    digest = hashlib.sha256(f"{base_seed}:{patient_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass
class SimDefaults:
    n_futures: int = 64
    temperature: float = 1.0
    top_k: int = 0
    base_seed: int = 0
    workers: int = 1


@dataclass
class CostEvalResult:
    report: MetricReport                     # uncensored
    censored_report: MetricReport | None
    baseline_nmae: float                     # constant-mean prediction
    filter_report: FilterReport
    skipped: int
    pairs: list[EvalPair] = field(default_factory=list)

    def to_json(self) -> str:
        body = {
            "report": asdict(self.report),
            "censored_report": (None if self.censored_report is None
                                else asdict(self.censored_report)),
            "baseline_nmae": self.baseline_nmae,
            "filter": {"included": self.filter_report.included,
                       "excluded": self.filter_report.excluded},
            "skipped": self.skipped,
        }
        return json.dumps(body, sort_keys=True, indent=2)


def _prompt_for(timeline: PatientTimeline, cutoff: date, vocab: Vocabulary,
                context_len: int, strict: bool = True) -> TokenSequence:
    prompt, _ = split_at(timeline, cutoff, vocab, strict=strict)
    return truncate(prompt, context_len - 1, vocab)


def run_cost_eval(decoder, vocab: Vocabulary, timelines: list[PatientTimeline],
                  criteria: SoaCohortCriteria,
                  sim: SimDefaults | None = None,
                  horizon_days: int = 365,
                  censor_threshold: float = 250_000.0,
                  log=None) -> CostEvalResult:
    """Predict each included patient's target-year cost as the mean over
    simulated futures and score it against the actual paid total."""
    sim = sim or SimDefaults()
    included, freport = soa_filter(timelines, criteria)
    cutoff = date(criteria.baseline_year, 12, 31)
    pairs = []
    skipped = 0
    for idx, t in enumerate(included):
        try:
            prompt = _prompt_for(t, cutoff, vocab, decoder.context_len)
            request = SimulationRequest(
                prompt=prompt, n_futures=sim.n_futures,
                horizon_days=horizon_days, temperature=sim.temperature,
                top_k=sim.top_k, base_seed=patient_seed(sim.base_seed, t.patient_id))
            bundle = simulate_futures(decoder, vocab, request, workers=sim.workers)
        except Exception:
            skipped += 1
            continue
        actual = math.fsum(e.paid for e in t.events
                           if e.paid is not None
                           and e.date.year == criteria.target_year)
        age = criteria.baseline_year - t.birth_year
        pairs.append(EvalPair(actual=actual, predicted=bundle.predicted_cost,
                              age_band=age_band(age), sex=t.sex))
        if log is not None and (idx + 1) % 200 == 0:
            log(f"cost eval {idx + 1}/{len(included)} patients")

    report = metrics.build_report(pairs, label="medseq")
    kept, removed = metrics.censor(pairs, censor_threshold)
    censored_report = None
    if removed and len(kept) >= 2:
        censored_report = metrics.build_report(kept, label="medseq-censored",
                                               censored_count=removed)
    mean_actual = math.fsum(p.actual for p in pairs) / len(pairs)
    baseline = [EvalPair(p.actual, mean_actual, p.age_band, p.sex) for p in pairs]
    return CostEvalResult(report=report, censored_report=censored_report,
                          baseline_nmae=metrics.nmae(baseline),
                          filter_report=freport, skipped=skipped, pairs=pairs)


@dataclass
class ConditionEvalRow:
    condition: str
    caliber: str
    n_positive: int
    occurrence_ratio: float
    auroc: float | None
    auprc: float | None


@dataclass
class ConditionEvalResult:
    rows: list[ConditionEvalRow]
    macro_auroc: float                     # over mapped, two-class conditions
    n_evaluated: int
    n_single_class: int

    def to_json(self) -> str:
        return json.dumps({
            "rows": [asdict(r) for r in self.rows],
            "macro_auroc": self.macro_auroc,
            "n_evaluated": self.n_evaluated,
            "n_single_class": self.n_single_class,
        }, sort_keys=True, indent=2)


def run_condition_eval(decoder, vocab: Vocabulary,
                       timelines: list[PatientTimeline],
                       cmap: ConditionMap, target_year: int,
                       window_months: int = 6,
                       sim: SimDefaults | None = None,
                       log=None) -> ConditionEvalResult:
    """Score every condition with the simulated probability of a matching
    diagnosis within the first window months of the target year."""
    sim = sim or SimDefaults()
    cutoff = date(target_year - 1, 12, 31)
    window_days = (_window_end(target_year, window_months)
                   - date(target_year, 1, 1)).days + 1
    match_ids = {}
    for row in cmap.rows:
        prefixes = tuple(f"DX:{p}" for p in row.icd10cm_prefixes)
        match_ids[row.ccw_name] = _predicate_ids(vocab, prefixes)[1]

    scores: dict[str, list[float]] = {r.ccw_name: [] for r in cmap.rows}
    labels: dict[str, list[int]] = {r.ccw_name: [] for r in cmap.rows}
    for idx, t in enumerate(timelines):
        prompt = _prompt_for(t, cutoff, vocab, decoder.context_len)
        request = SimulationRequest(
            prompt=prompt, n_futures=sim.n_futures, horizon_days=window_days,
            temperature=sim.temperature, top_k=sim.top_k,
            base_seed=patient_seed(sim.base_seed, t.patient_id))
        bundle = simulate_futures(decoder, vocab, request, workers=sim.workers)
        lab = label_chronic(t, cmap, target_year, window_months)
        for row in cmap.rows:
            ids = match_ids[row.ccw_name]
            hits = 0
            if ids:
                for f in bundle.futures:
                    d = first_match_days(f, vocab, ids)
                    if d is not None and d <= window_days:
                        hits += 1
            scores[row.ccw_name].append(hits / len(bundle.futures))
            labels[row.ccw_name].append(lab[row.ccw_name])
        if log is not None and (idx + 1) % 200 == 0:
            log(f"condition eval {idx + 1}/{len(timelines)} patients")

    rows = []
    single_class = 0
    n = len(timelines)
    for row in cmap.rows:
        pos = sum(labels[row.ccw_name])
        pairs = list(zip(scores[row.ccw_name], labels[row.ccw_name]))
        try:
            roc = metrics.auroc(pairs)
            ap = metrics.auprc(pairs)
        except SingleClass:
            roc = ap = None
            single_class += 1
        rows.append(ConditionEvalRow(
            condition=row.ccw_name, caliber=row.caliber_name, n_positive=pos,
            occurrence_ratio=pos / n if n else 0.0, auroc=roc, auprc=ap))
    rows.sort(key=lambda r: -r.occurrence_ratio)
    mapped_names = {r.ccw_name for r in cmap.mapped_rows}
    macro_vals = [r.auroc for r in rows
                  if r.condition in mapped_names and r.auroc is not None]
    macro = math.fsum(macro_vals) / len(macro_vals) if macro_vals else math.nan
    return ConditionEvalResult(rows=rows, macro_auroc=macro,
                               n_evaluated=len(macro_vals),
                               n_single_class=single_class)
