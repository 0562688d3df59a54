"""Synthetic patient cohorts from a known monthly Markov ground truth.

Each patient walks a condition-state chain month by month; states emit
dated coded claims with lognormal paid amounts. Because the chain is
fully specified, expected annual cost has an exact dynamic-programming
oracle, which the model-based predictions are tested against. The module
also parses external claims files (CSV/JSONL) into timelines.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import date

import numpy as np

from .vocab import CodeSystem, MedicalEvent, SAME_DAY_PRIORITY


class SynthError(Exception):
    pass


class InvalidSpec(SynthError):
    pass


class UnreadableFile(SynthError):
    pass


class FormatError(SynthError):
    pass


@dataclass
class Emission:
    system: CodeSystem
    code: str
    prob: float


@dataclass
class StateSpec:
    name: str
    dx_codes: tuple[str, ...]        # ICD-10 CM variants, drawn uniformly per visit
    visit_prob: float                # monthly probability of a billable visit
    cost_mu: float                   # lognormal params of the visit's paid amount
    cost_sigma: float
    emissions: tuple[Emission, ...] = ()
    pos_code: str | None = None      # place-of-service emitted with each visit
    silent: bool = False             # never emits anything (deceased)


@dataclass
class BackgroundEvent:
    """State-independent acute event; the designed no-signal condition."""

    dx_code: str
    monthly_prob: float
    cost_mu: float
    cost_sigma: float


@dataclass
class GeneratorSpec:
    states: list[StateSpec]
    init_probs: list[float]
    transition: list[list[float]]              # base monthly matrix, rows sum to 1
    age_hazard: dict[tuple[int, int], float] = field(default_factory=dict)
    init_age_hazard: dict[int, float] = field(default_factory=dict)
    background: list[BackgroundEvent] = field(default_factory=list)
    horizon_months: int = 24
    start: date = date(2017, 1, 1)
    age_range: tuple[int, int] = (0, 90)
    male_prob: float = 0.5
    enrollment_gap_prob: float = 0.08
    no_rx_prob: float = 0.05
    capitation_prob: float = 0.03

    def validate(self) -> None:
        n = len(self.states)
        if n == 0:
            raise InvalidSpec("spec needs at least one state")
        if len(self.init_probs) != n:
            raise InvalidSpec("init_probs length must match states")
        if abs(sum(self.init_probs) - 1.0) > 1e-12 or min(self.init_probs) < 0:
            raise InvalidSpec("init_probs must be a distribution")
        t = np.asarray(self.transition, dtype=np.float64)
        if t.shape != (n, n):
            raise InvalidSpec("transition must be S x S")
        if (t < 0).any():
            raise InvalidSpec("transition probabilities must be >= 0")
        if np.abs(t.sum(axis=1) - 1.0).max() > 1e-12:
            raise InvalidSpec("every transition row must sum to 1 within 1e-12")
        for st in self.states:
            if not 0.0 <= st.visit_prob <= 1.0:
                raise InvalidSpec(f"state {st.name}: visit_prob out of [0,1]")
            if st.cost_sigma <= 0:
                raise InvalidSpec(f"state {st.name}: cost_sigma must be > 0")
            for em in st.emissions:
                if not 0.0 <= em.prob <= 1.0:
                    raise InvalidSpec(f"state {st.name}: emission prob out of [0,1]")
        for bg in self.background:
            if not 0.0 <= bg.monthly_prob <= 1.0:
                raise InvalidSpec("background monthly_prob out of [0,1]")
            if bg.cost_sigma <= 0:
                raise InvalidSpec("background cost_sigma must be > 0")
        for age in (self.age_range[0], 50, self.age_range[1]):
            m = self.transition_for(age)
            if (np.diag(m) < -1e-15).any():
                raise InvalidSpec(f"age hazard leaves no self-mass at age {age}")

    # -- demographic-modulated chain parameters ---------------------------

    def _age_mult(self, slope: float, age: int) -> float:
        return math.exp(slope * (age - 50) / 10.0)

    def init_for(self, age: int) -> np.ndarray:
        q = np.asarray(self.init_probs, dtype=np.float64).copy()
        for s, slope in self.init_age_hazard.items():
            q[s] *= self._age_mult(slope, age)
        return q / q.sum()

    def transition_for(self, age: int) -> np.ndarray:
        t = np.asarray(self.transition, dtype=np.float64).copy()
        for (i, j), slope in self.age_hazard.items():
            t[i, j] *= self._age_mult(slope, age)
        # Self-transition absorbs the adjustment so rows still sum to 1.
        for i in range(t.shape[0]):
            off = t[i].sum() - t[i, i]
            t[i, i] = 1.0 - off
            if t[i, i] < 0:
                raise InvalidSpec(
                    f"row {i} over-allocated at age {age}: off-diagonal mass {off:.4f}")
        return t


@dataclass
class EnrollmentYear:
    months: int = 12
    rx: bool = True
    capitated: bool = False


@dataclass
class PatientTimeline:
    patient_id: str
    sex: str
    birth_year: int
    events: list[MedicalEvent]
    enrollment: dict[int, EnrollmentYear] = field(default_factory=dict)
    as_of: date | None = None        # demographics anchor when events is empty


@dataclass
class Cohort:
    timelines: list[PatientTimeline]
    state_paths: list[list[int]]     # ground truth, test oracle only


@dataclass
class ClaimRecord:
    patient_id: str
    service_date: date
    system: CodeSystem
    code: str
    paid: float | None
    capitated: bool
    has_rx_coverage: bool
    sex: str
    birth_year: int
    enrollment_months: int | None = None


def patient_stream(seed: int, index: int) -> np.random.Generator:
    """Independent per-patient RNG stream; order-independent under parallelism."""
    return np.random.Generator(np.random.Philox(key=seed).jumped(index))


def _month_date(start: date, m: int) -> date:
    y, mo = divmod(start.month - 1 + m, 12)
    return date(start.year + y, mo + 1, start.day)


def _round_paid(x: float) -> float:
    return round(float(x), 2)


def generate_cohort(spec: GeneratorSpec, n: int, seed: int) -> Cohort:
    """Sample `n` independent patient trajectories.

    Deterministic given (spec, n, seed); patient i draws only from
    `patient_stream(seed, i)` so any generation order gives the same cohort.
    """
    if n < 1:
        raise InvalidSpec("n must be >= 1")
    spec.validate()
    n_states = len(spec.states)
    timelines, paths = [], []
    for i in range(n):
        rng = patient_stream(seed, i)
        sex = "M" if rng.random() < spec.male_prob else "F"
        age = int(rng.integers(spec.age_range[0], spec.age_range[1] + 1))
        birth_year = spec.start.year - age
        init = spec.init_for(age)
        trans = spec.transition_for(age)
        cum_trans = np.cumsum(trans, axis=1)
        state = int(np.searchsorted(np.cumsum(init), rng.random(), side="right"))
        state = min(state, n_states - 1)

        enrollment: dict[int, EnrollmentYear] = {}
        rx = rng.random() >= spec.no_rx_prob
        capitated = rng.random() < spec.capitation_prob
        short_baseline = rng.random() < spec.enrollment_gap_prob
        for m in range(spec.horizon_months):
            y = _month_date(spec.start, m).year
            if y not in enrollment:
                months = 12
                if short_baseline and y == spec.start.year:
                    months = int(rng.integers(0, 12))
                enrollment[y] = EnrollmentYear(months=months, rx=rx, capitated=capitated)

        events: list[MedicalEvent] = []
        path: list[int] = []
        for m in range(spec.horizon_months):
            d = _month_date(spec.start, m)
            st = spec.states[state]
            if not st.silent and rng.random() < st.visit_prob:
                if st.pos_code is not None:
                    events.append(MedicalEvent(d, CodeSystem.PLACE_OF_SERVICE, st.pos_code))
                dx = st.dx_codes[int(rng.integers(len(st.dx_codes)))]
                paid = _round_paid(rng.lognormal(st.cost_mu, st.cost_sigma))
                events.append(MedicalEvent(d, CodeSystem.ICD10CM, dx, paid=paid))
                for em in st.emissions:
                    if rng.random() < em.prob:
                        events.append(MedicalEvent(d, em.system, em.code))
            # Background events fire in every state, deceased included: the
            # no-signal condition must stay independent of the whole history.
            for bg in spec.background:
                if rng.random() < bg.monthly_prob:
                    paid = _round_paid(rng.lognormal(bg.cost_mu, bg.cost_sigma))
                    events.append(MedicalEvent(d, CodeSystem.ICD10CM, bg.dx_code, paid=paid))
            path.append(state)
            state = int(np.searchsorted(cum_trans[state], rng.random(), side="right"))
            state = min(state, n_states - 1)

        events.sort(key=_event_order)
        timelines.append(PatientTimeline(
            patient_id=f"P{i:07d}", sex=sex, birth_year=birth_year,
            events=events, enrollment=enrollment, as_of=spec.start))
        paths.append(path)
    return Cohort(timelines, paths)


def expected_annual_cost(spec: GeneratorSpec, sex: str, age: int,
                         start_month: int = 0) -> float:
    """Exact expected cost of 12 months starting at `start_month`.

    Forward DP over the monthly state occupancy; the per-state monthly
    expectation is visit_prob * E[lognormal] plus background events while
    the patient is in any non-silent state.
    """
    spec.validate()
    del sex  # hazards are age-driven; kept for the call signature's symmetry
    pi = spec.init_for(age)
    trans = spec.transition_for(age)
    visit_cost = np.array([
        st.visit_prob * math.exp(st.cost_mu + st.cost_sigma ** 2 / 2.0)
        if not st.silent else 0.0
        for st in spec.states])
    bg_cost = sum(bg.monthly_prob * math.exp(bg.cost_mu + bg.cost_sigma ** 2 / 2.0)
                  for bg in spec.background)
    total = 0.0
    for m in range(start_month + 12):
        if m >= start_month:
            total += float(pi @ visit_cost) + bg_cost
        pi = pi @ trans
    return total


def monthly_occupancy(spec: GeneratorSpec, age: int, months: int) -> np.ndarray:
    """DP state-occupancy marginals, shape (months, S). Test oracle."""
    pi = spec.init_for(age)
    trans = spec.transition_for(age)
    out = np.empty((months, len(spec.states)))
    for m in range(months):
        out[m] = pi
        pi = pi @ trans
    return out


# -- default desk-scale world ---------------------------------------------

def default_spec(horizon_months: int = 24, start: date = date(2017, 1, 1)) -> GeneratorSpec:
    """Eight-condition chronic-disease world used by the experiments.

    Transitions are monthly; chronic states persist, so last year's claims
    carry real signal about next year's. Stroke multiplies the hazard of
    the parkinsons state, which the what-if intervention tests lean on.
    The acute URI background event is independent of everything - the
    designed no-signal condition.
    """
    S = dict(HEALTHY=0, HTN=1, DIA=2, COPD=3, CHF=4, STROKE=5, PARK=6, DEAD=7)
    states = [
        StateSpec("healthy", ("Z00.00",), 0.15, math.log(120), 0.45,
                  pos_code="11"),
        StateSpec("hypertension", ("I10", "I11.9"), 0.45, math.log(260), 0.55,
                  emissions=(Emission(CodeSystem.CPT4, "99213", 0.7),
                             Emission(CodeSystem.NDC, "00071015523", 0.6)),
                  pos_code="11"),
        StateSpec("diabetes", ("E11.9", "E11.65"), 0.5, math.log(420), 0.6,
                  emissions=(Emission(CodeSystem.CPT4, "83036", 0.5),
                             Emission(CodeSystem.NDC, "00093104801", 0.7)),
                  pos_code="11"),
        StateSpec("copd", ("J44.1", "J44.9"), 0.5, math.log(640), 0.65,
                  emissions=(Emission(CodeSystem.CPT4, "94010", 0.4),
                             Emission(CodeSystem.NDC, "00173068220", 0.6)),
                  pos_code="11"),
        StateSpec("heart_failure", ("I50.9", "I50.22"), 0.6, math.log(1500), 0.8,
                  emissions=(Emission(CodeSystem.CPT4, "93306", 0.35),
                             Emission(CodeSystem.NDC, "00054429725", 0.6)),
                  pos_code="21"),
        StateSpec("stroke", ("I63.9",), 0.6, math.log(2800), 0.8,
                  emissions=(Emission(CodeSystem.CPT4, "70450", 0.45),),
                  pos_code="21"),
        StateSpec("parkinsons", ("G20",), 0.55, math.log(900), 0.7,
                  emissions=(Emission(CodeSystem.NDC, "00078058561", 0.7),),
                  pos_code="11"),
        StateSpec("deceased", (), 0.0, 0.0, 1.0, silent=True),
    ]
    n = len(states)
    t = np.zeros((n, n))
    t[S["HEALTHY"], S["HTN"]] = 0.010
    t[S["HEALTHY"], S["DIA"]] = 0.008
    t[S["HEALTHY"], S["COPD"]] = 0.004
    t[S["HEALTHY"], S["CHF"]] = 0.0015
    t[S["HEALTHY"], S["STROKE"]] = 0.0012
    t[S["HEALTHY"], S["PARK"]] = 0.0008
    t[S["HEALTHY"], S["DEAD"]] = 0.0004
    t[S["HTN"], S["CHF"]] = 0.005
    t[S["HTN"], S["STROKE"]] = 0.004
    t[S["HTN"], S["DEAD"]] = 0.0012
    t[S["DIA"], S["CHF"]] = 0.004
    t[S["DIA"], S["STROKE"]] = 0.003
    t[S["DIA"], S["DEAD"]] = 0.0015
    t[S["COPD"], S["CHF"]] = 0.004
    t[S["COPD"], S["DEAD"]] = 0.003
    t[S["CHF"], S["DEAD"]] = 0.009
    t[S["STROKE"], S["PARK"]] = 0.008   # the lifted hazard behind the what-if demo
    t[S["STROKE"], S["DEAD"]] = 0.007
    t[S["PARK"], S["DEAD"]] = 0.004
    for i in range(n):
        t[i, i] = 1.0 - t[i].sum()
    init = [0.70, 0.12, 0.08, 0.04, 0.02, 0.015, 0.015, 0.01]
    return GeneratorSpec(
        states=states,
        init_probs=init,
        transition=t.tolist(),
        age_hazard={
            (S["HEALTHY"], S["CHF"]): 0.55,
            (S["HEALTHY"], S["STROKE"]): 0.6,
            (S["HEALTHY"], S["DEAD"]): 0.7,
            (S["HTN"], S["STROKE"]): 0.45,
            (S["CHF"], S["DEAD"]): 0.4,
        },
        init_age_hazard={S["HTN"]: 0.5, S["DIA"]: 0.4, S["CHF"]: 0.6,
                         S["COPD"]: 0.4, S["STROKE"]: 0.5, S["PARK"]: 0.6},
        background=[BackgroundEvent("J06.9", 0.035, math.log(90), 0.4)],
        horizon_months=horizon_months,
        start=start,
    )


def spec_code_lists(spec: GeneratorSpec) -> dict[CodeSystem, list[str]]:
    """All codes the generator can emit, grouped by system, sorted."""
    out: dict[CodeSystem, set[str]] = {}
    for st in spec.states:
        for c in st.dx_codes:
            out.setdefault(CodeSystem.ICD10CM, set()).add(c)
        for em in st.emissions:
            out.setdefault(em.system, set()).add(em.code)
        if st.pos_code is not None:
            out.setdefault(CodeSystem.PLACE_OF_SERVICE, set()).add(st.pos_code)
    for bg in spec.background:
        out.setdefault(CodeSystem.ICD10CM, set()).add(bg.dx_code)
    return {k: sorted(v) for k, v in out.items()}


# -- claims file ingestion --------------------------------------------------

CSV_V1_HEADER = ["patient_id", "sex", "birth_year", "service_date", "system",
                 "code", "paid", "capitated", "rx"]
CSV_V1_HEADER_EXT = CSV_V1_HEADER + ["enrollment_months"]

_PRIORITY_RANK = {s: i for i, s in enumerate(SAME_DAY_PRIORITY)}


def _event_order(e: MedicalEvent):
    """Canonical event order: date, same-day system priority, code, paid."""
    return (e.date, _PRIORITY_RANK.get(e.system, 99), e.code,
            -1.0 if e.paid is None else e.paid)


@dataclass
class IngestResult:
    timelines: list[PatientTimeline]
    rejects: list[tuple[int, str]]   # (1-based line number, reason)

    def write_rejects(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["line_no", "reason"])
            w.writerows(self.rejects)


def _parse_record(fields: dict, line_no: int) -> ClaimRecord:
    sex = str(fields["sex"]).strip().upper()
    if sex not in ("F", "M", "U"):
        raise FormatError("BAD_SEX")
    try:
        birth_year = int(fields["birth_year"])
    except (TypeError, ValueError):
        raise FormatError("BAD_BIRTH_YEAR") from None
    if not 1880 <= birth_year <= 2100:
        raise FormatError("BAD_BIRTH_YEAR")
    try:
        service = date.fromisoformat(str(fields["service_date"]).strip())
    except ValueError:
        raise FormatError("BAD_DATE") from None
    raw_system = str(fields["system"]).strip().upper()
    try:
        system = CodeSystem(raw_system)
    except ValueError:
        raise FormatError("UNKNOWN_SYSTEM") from None
    code = str(fields["code"]).strip()
    if not code and system is not CodeSystem.COST:
        raise FormatError("EMPTY_CODE")
    paid_raw = fields.get("paid")
    paid = None
    if paid_raw not in (None, ""):
        try:
            paid = float(paid_raw)
        except (TypeError, ValueError):
            raise FormatError("BAD_PAID") from None
        if not math.isfinite(paid) or paid < 0:
            raise FormatError("BAD_PAID")
    flags = {}
    for name in ("capitated", "rx"):
        v = fields[name]
        if isinstance(v, bool):
            flags[name] = v
        elif str(v).strip() in ("0", "1"):
            flags[name] = str(v).strip() == "1"
        else:
            raise FormatError("BAD_FLAG")
    months = fields.get("enrollment_months")
    if months in (None, ""):
        months_val = None
    else:
        try:
            months_val = int(months)
        except (TypeError, ValueError):
            raise FormatError("BAD_ENROLLMENT") from None
        if not 0 <= months_val <= 12:
            raise FormatError("BAD_ENROLLMENT")
    pid = str(fields["patient_id"]).strip()
    if not pid:
        raise FormatError("EMPTY_PATIENT_ID")
    return ClaimRecord(pid, service, system, code, paid, flags["capitated"],
                       flags["rx"], sex, birth_year, months_val)


def ingest_claims(path, fmt: str = "CSV_V1") -> IngestResult:
    """Stream a claims file into per-patient timelines.

    Malformed lines land in the rejects list with their line number and a
    reason code; they never abort the run. Raises UnreadableFile if the
    file cannot be opened, FormatError on a bad header.
    """
    if fmt not in ("CSV_V1", "JSONL_V1"):
        raise FormatError(f"unknown claims format {fmt!r}")
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as e:
        raise UnreadableFile(str(e)) from None

    per_patient: dict[str, dict] = {}
    rejects: list[tuple[int, str]] = []

    def absorb(rec: ClaimRecord, line_no: int) -> None:
        slot = per_patient.get(rec.patient_id)
        if slot is None:
            slot = per_patient[rec.patient_id] = {
                "sex": rec.sex, "birth_year": rec.birth_year,
                "events": [], "years": {}}
        elif slot["sex"] != rec.sex or slot["birth_year"] != rec.birth_year:
            rejects.append((line_no, "DEMOGRAPHIC_CONFLICT"))
            return
        slot["events"].append(MedicalEvent(rec.service_date, rec.system,
                                           rec.code, paid=rec.paid))
        y = slot["years"].setdefault(rec.service_date.year, EnrollmentYear(rx=rec.has_rx_coverage))
        y.rx = y.rx and rec.has_rx_coverage
        y.capitated = y.capitated or rec.capitated
        if rec.enrollment_months is not None:
            y.months = rec.enrollment_months

    with fh:
        if fmt == "CSV_V1":
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise FormatError("empty file, missing header") from None
            if header not in (CSV_V1_HEADER, CSV_V1_HEADER_EXT):
                raise FormatError(f"unexpected CSV_V1 header: {header}")
            for line_no, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    rejects.append((line_no, "BAD_COLUMNS"))
                    continue
                try:
                    absorb(_parse_record(dict(zip(header, row)), line_no), line_no)
                except FormatError as e:
                    rejects.append((line_no, str(e)))
        else:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError:
                    rejects.append((line_no, "BAD_JSON"))
                    continue
                if not isinstance(obj, dict):
                    rejects.append((line_no, "BAD_JSON"))
                    continue
                missing = [k for k in CSV_V1_HEADER if k not in obj]
                if missing:
                    rejects.append((line_no, "MISSING_FIELDS"))
                    continue
                try:
                    absorb(_parse_record(obj, line_no), line_no)
                except FormatError as e:
                    rejects.append((line_no, str(e)))

    timelines = []
    for pid in sorted(per_patient):
        slot = per_patient[pid]
        events = sorted(slot["events"], key=_event_order)
        timelines.append(PatientTimeline(
            patient_id=pid, sex=slot["sex"], birth_year=slot["birth_year"],
            events=events, enrollment=dict(sorted(slot["years"].items()))))
    return IngestResult(timelines, rejects)


def serialize_timelines(timelines: list[PatientTimeline], path,
                        fmt: str = "CSV_V1") -> None:
    """Write timelines back out as a claims file (deterministic bytes)."""
    if fmt not in ("CSV_V1", "JSONL_V1"):
        raise FormatError(f"unknown claims format {fmt!r}")

    def rows(t: PatientTimeline):
        ordered = sorted(t.events, key=_event_order)
        for e in ordered:
            enr = t.enrollment.get(e.date.year, EnrollmentYear())
            yield {
                "patient_id": t.patient_id, "sex": t.sex,
                "birth_year": t.birth_year,
                "service_date": e.date.isoformat(),
                "system": e.system.value, "code": e.code,
                "paid": "" if e.paid is None else f"{e.paid:.2f}",
                "capitated": int(enr.capitated), "rx": int(enr.rx),
                "enrollment_months": enr.months,
            }

    with open(path, "w", newline="", encoding="utf-8") as fh:
        if fmt == "CSV_V1":
            w = csv.DictWriter(fh, fieldnames=CSV_V1_HEADER_EXT)
            w.writeheader()
            for t in timelines:
                for row in rows(t):
                    w.writerow(row)
        else:
            for t in timelines:
                for row in rows(t):
                    row["paid"] = None if row["paid"] == "" else float(row["paid"])
                    fh.write(json.dumps(row, sort_keys=True) + "\n")
