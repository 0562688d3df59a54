"""Typed medical-event vocabulary.

Maps coded clinical concepts (diagnoses, procedures, drugs, place of
service), demographics, dollar amounts, and inter-visit time gaps to a
flat integer token space. Diagnosis codes are split hierarchically
(3-char category + per-character extensions) so one concept always fits
in 1 to 4 tokens; costs and gaps are quantized to fixed bucket tokens.
"""

from __future__ import annotations

import math
import re
from bisect import bisect_right
from dataclasses import dataclass
from datetime import date
from enum import Enum
from typing import Iterable


class CodeSystem(Enum):
    ICD10CM = "ICD10CM"
    ICD10PCS = "ICD10PCS"
    CPT4 = "CPT4"
    HCPCS = "HCPCS"
    NDC = "NDC"
    PLACE_OF_SERVICE = "PLACE_OF_SERVICE"
    DEMOGRAPHIC = "DEMOGRAPHIC"
    COST = "COST"
    TIME_GAP = "TIME_GAP"
    STRUCTURAL = "STRUCTURAL"


# Kind order used for deterministic id assignment (structural ids are pinned).
_KIND_ORDER = {k: i for i, k in enumerate(CodeSystem)}

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3

PAD_SURFACE = "PAD"
BOS_SURFACE = "BOS"
EOS_SURFACE = "EOS"
UNK_SURFACE = "UNK"

SEXES = ("F", "M", "U")
AGE_MAX = 110

# Cost buckets: B0 is exactly $0, Bk covers [10^((k-1)/2), 10^(k/2)) dollars,
# and the last bucket is open-ended from $1e6 up. Representative value is the
# geometric mean of the bucket edges (lower edge * 10^0.25), $0 for B0.
COST_BUCKET_COUNT = 14  # B0 .. B13

# Gap buckets in days: (lo, hi) inclusive; hi=None means open-ended.
GAP_BUCKETS = (
    (0, 0, "D0"),
    (1, 3, "D1_3"),
    (4, 7, "D4_7"),
    (8, 14, "D8_14"),
    (15, 30, "D15_30"),
    (31, 90, "D31_90"),
    (91, 365, "D91_365"),
    (366, None, "D365P"),
)

# Canonical day count assigned to each gap bucket when a token sequence is
# mapped back onto a timeline; requantizing the representative must return
# the same bucket.
GAP_REPRESENTATIVE_DAYS = (0, 2, 5, 11, 22, 60, 228, 548)

_EXTENSION_ALPHABET = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ"

_SURFACE_PREFIX = {
    CodeSystem.ICD10CM: "DX:",
    CodeSystem.ICD10PCS: "PCS:",
    CodeSystem.CPT4: "CPT:",
    CodeSystem.HCPCS: "HCPCS:",
    CodeSystem.NDC: "NDC:",
    CodeSystem.PLACE_OF_SERVICE: "POS:",
    CodeSystem.DEMOGRAPHIC: "DEM:",
    CodeSystem.COST: "COST:",
    CodeSystem.TIME_GAP: "GAP:",
}

# Same-day ordering of claim lines inside a linearized sequence.
SAME_DAY_PRIORITY = (
    CodeSystem.PLACE_OF_SERVICE,
    CodeSystem.ICD10CM,
    CodeSystem.ICD10PCS,
    CodeSystem.CPT4,
    CodeSystem.HCPCS,
    CodeSystem.NDC,
    CodeSystem.COST,
)

_CODE_PATTERNS = {
    CodeSystem.ICD10CM: re.compile(r"^[A-Z][0-9][0-9A-Z]\.?[0-9A-Z]{0,3}$"),
    CodeSystem.ICD10PCS: re.compile(r"^[0-9A-Z]{7}$"),
    CodeSystem.CPT4: re.compile(r"^[0-9]{4}[0-9A-Z]$"),
    CodeSystem.HCPCS: re.compile(r"^[A-Z][0-9]{4}$"),
    CodeSystem.NDC: re.compile(r"^[0-9]{11}$"),
    CodeSystem.PLACE_OF_SERVICE: re.compile(r"^[0-9]{2}$"),
}

CODED_SYSTEMS = tuple(_CODE_PATTERNS)


class VocabError(Exception):
    pass


class DuplicateCode(VocabError):
    pass


class MalformedCode(VocabError):
    pass


class UnknownCode(VocabError):
    pass


class NegativeCost(VocabError):
    pass


@dataclass(frozen=True)
class Token:
    id: int
    kind: CodeSystem
    surface: str


@dataclass(frozen=True)
class MedicalEvent:
    """One dated, coded clinical or financial fact.

    `paid` is a dollar amount; for coded systems it is the claim line's
    paid amount, for COST events it is the whole fact (code is empty).
    """

    date: date
    system: CodeSystem
    code: str
    paid: float | None = None


@dataclass
class VocabConfig:
    age_max: int = AGE_MAX
    cost_bucket_count: int = COST_BUCKET_COUNT


@dataclass
class EncodeStats:
    """Mutable side channel counting lenient-mode UNK substitutions."""

    unknown_count: int = 0


def normalize_code(system: CodeSystem, code: str) -> str:
    """Uppercase and strip the decimal point from diagnosis codes."""
    code = code.strip().upper()
    if system is CodeSystem.ICD10CM:
        code = code.replace(".", "")
    return code


def canonical_code(system: CodeSystem, code: str) -> str:
    """Printable form: ICD-10 CM gets its dot back after the category."""
    code = normalize_code(system, code)
    if system is CodeSystem.ICD10CM and len(code) > 3:
        return code[:3] + "." + code[3:]
    return code


def validate_code(system: CodeSystem, code: str) -> str:
    """Return the normalized code or raise MalformedCode."""
    pattern = _CODE_PATTERNS.get(system)
    if pattern is None:
        raise MalformedCode(f"system {system.value} has no code grammar")
    raw = code.strip().upper()
    if not pattern.match(raw):
        raise MalformedCode(f"{system.value} code {code!r} fails syntax check")
    return normalize_code(system, raw)


def cost_lower_edges(bucket_count: int = COST_BUCKET_COUNT) -> list[float]:
    """Lower edges (dollars) of buckets B1..B{n-1}; B0 is the $0 bucket."""
    return [10.0 ** ((k - 1) / 2.0) for k in range(1, bucket_count)]


class Vocabulary:
    """Immutable token table with bidirectional lookups.

    Build once with `build_vocab`; safe for concurrent reads afterwards.
    """

    def __init__(self, tokens: list[Token], cost_edges: list[float],
                 gap_buckets: tuple = GAP_BUCKETS):
        self.tokens = tokens
        self.cost_edges = list(cost_edges)
        self.gap_buckets = gap_buckets
        self.by_surface = {t.surface: t.id for t in tokens}
        if len(self.by_surface) != len(tokens):
            raise DuplicateCode("duplicate surface in token table")
        self._kinds = [t.kind for t in tokens]
        self._surfaces = [t.surface for t in tokens]
        # Cached decode tables for hot paths.
        self._gap_days = {}
        self._cost_value = {}
        for t in tokens:
            if t.kind is CodeSystem.TIME_GAP:
                name = t.surface[len("GAP:"):]
                idx = next(i for i, (_, _, n) in enumerate(gap_buckets) if n == name)
                self._gap_days[t.id] = GAP_REPRESENTATIVE_DAYS[idx]
            elif t.kind is CodeSystem.COST:
                k = int(t.surface[len("COST:B"):])
                self._cost_value[t.id] = self._bucket_representative(k)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def surface(self, token_id: int) -> str:
        return self._surfaces[token_id]

    def kind(self, token_id: int) -> CodeSystem:
        return self._kinds[token_id]

    def id_of(self, surface: str) -> int:
        try:
            return self.by_surface[surface]
        except KeyError:
            raise UnknownCode(f"surface {surface!r} not in vocabulary") from None

    def has_surface(self, surface: str) -> bool:
        return surface in self.by_surface

    # -- quantization ------------------------------------------------------

    def cost_bucket(self, dollars: float) -> int:
        if not math.isfinite(dollars) or dollars < 0:
            raise NegativeCost(f"paid amount must be finite and >= 0, got {dollars}")
        if dollars < self.cost_edges[0]:
            return 0
        k = bisect_right(self.cost_edges, dollars)
        return min(k, len(self.cost_edges))

    def quantize_cost(self, dollars: float) -> int:
        """Token id of the cost bucket covering `dollars`."""
        return self.id_of(f"COST:B{self.cost_bucket(dollars)}")

    def _bucket_representative(self, k: int) -> float:
        if k == 0:
            return 0.0
        return self.cost_edges[k - 1] * 10.0 ** 0.25

    def dequantize_cost(self, token_id: int) -> float:
        """Bucket representative in dollars (geometric mean of the edges)."""
        try:
            return self._cost_value[token_id]
        except KeyError:
            raise UnknownCode(f"token {token_id} is not a cost token") from None

    def gap_bucket(self, days: int) -> int:
        if days < 0:
            raise VocabError(f"gap days must be >= 0, got {days}")
        for i, (lo, hi, _) in enumerate(self.gap_buckets):
            if days >= lo and (hi is None or days <= hi):
                return i
        raise AssertionError("gap buckets must cover all non-negative days")

    def quantize_gap(self, days: int) -> int:
        """Token id of the day-gap bucket covering `days`."""
        _, _, name = self.gap_buckets[self.gap_bucket(days)]
        return self.id_of(f"GAP:{name}")

    def gap_days(self, token_id: int) -> int:
        """Representative day count of a gap token."""
        try:
            return self._gap_days[token_id]
        except KeyError:
            raise UnknownCode(f"token {token_id} is not a gap token") from None

    def is_gap(self, token_id: int) -> bool:
        return token_id in self._gap_days

    def is_cost(self, token_id: int) -> bool:
        return token_id in self._cost_value

    # -- demographics ------------------------------------------------------

    def sex_token(self, sex: str) -> int:
        if sex not in SEXES:
            raise UnknownCode(f"sex must be one of {SEXES}, got {sex!r}")
        return self.id_of(f"DEM:SEX_{sex}")

    def age_token(self, years: int) -> int:
        years = max(0, min(int(years), AGE_MAX))
        return self.id_of(f"DEM:AGE_{years}")

    # -- event encoding ----------------------------------------------------

    def encode_event(self, event: MedicalEvent, strict: bool = True,
                     stats: EncodeStats | None = None) -> list[int]:
        """Encode one concept into 1..4 token ids.

        Coded systems split per the hierarchy rules; DEMOGRAPHIC events
        carry their token name in `code` (e.g. "SEX_F", "AGE_47"); COST
        events quantize their paid amount. In lenient mode unknown pieces
        become UNK and `stats.unknown_count` is bumped.
        """
        system = event.system
        if system is CodeSystem.COST:
            if event.paid is None:
                raise VocabError("COST event requires a paid amount")
            return [self.quantize_cost(event.paid)]
        if system is CodeSystem.DEMOGRAPHIC:
            return [self._lookup(f"DEM:{event.code.strip().upper()}", strict, stats)]
        if system is CodeSystem.TIME_GAP:
            return [self._lookup(f"GAP:{event.code.strip().upper()}", strict, stats)]
        if system not in CODED_SYSTEMS:
            raise VocabError(f"cannot encode system {system}")

        code = normalize_code(system, event.code)
        pattern = _CODE_PATTERNS[system]
        if not pattern.match(canonical_code(system, code) if system is CodeSystem.ICD10CM else code):
            return self._unknown(event, strict, stats)

        if system is CodeSystem.ICD10CM:
            ids = []
            cat = self._lookup_or_none(f"DX:{code[:3]}")
            if cat is None:
                return self._unknown(event, strict, stats)
            ids.append(cat)
            for ch in code[3:6]:
                ext = self._lookup_or_none(f"DX-X:{ch}")
                if ext is None:
                    return self._unknown(event, strict, stats)
                ids.append(ext)
            return ids
        return [self._lookup(_SURFACE_PREFIX[system] + code, strict, stats)]

    def _lookup_or_none(self, surface: str) -> int | None:
        return self.by_surface.get(surface)

    def _lookup(self, surface: str, strict: bool, stats: EncodeStats | None) -> int:
        tid = self.by_surface.get(surface)
        if tid is not None:
            return tid
        if strict:
            raise UnknownCode(f"surface {surface!r} not in vocabulary")
        if stats is not None:
            stats.unknown_count += 1
        return UNK_ID

    def _unknown(self, event: MedicalEvent, strict: bool,
                 stats: EncodeStats | None) -> list[int]:
        if strict:
            raise UnknownCode(
                f"{event.system.value} code {event.code!r} not encodable")
        if stats is not None:
            stats.unknown_count += 1
        return [UNK_ID]

    # -- decoding ----------------------------------------------------------

    def starts_code_group(self, token_id: int) -> CodeSystem | None:
        """The code system if this token opens a coded-event group."""
        kind = self._kinds[token_id]
        if kind in CODED_SYSTEMS:
            surf = self._surfaces[token_id]
            if surf.startswith("DX-X:"):
                return None
            return kind
        return None

    def is_extension(self, token_id: int) -> bool:
        return self._surfaces[token_id].startswith("DX-X:")

    def code_of(self, token_ids: list[int]) -> tuple[CodeSystem, str]:
        """Reassemble a code group (category + extensions) into its code."""
        first = self._surfaces[token_ids[0]]
        system = self._kinds[token_ids[0]]
        body = first.split(":", 1)[1]
        for tid in token_ids[1:]:
            surf = self._surfaces[tid]
            if not surf.startswith("DX-X:"):
                raise VocabError(f"token {surf!r} is not an extension")
            body += surf.split(":", 1)[1]
        return system, canonical_code(system, body)

    # -- serialization -----------------------------------------------------

    FILE_VERSION = "medseq-vocab v1"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.FILE_VERSION + "\n")
            fh.write("cost_edges\t" + ",".join(repr(e) for e in self.cost_edges) + "\n")
            gaps = ",".join(
                f"{lo}:{'' if hi is None else hi}:{name}" for lo, hi, name in self.gap_buckets)
            fh.write("gap_buckets\t" + gaps + "\n")
            for t in self.tokens:
                fh.write(f"{t.id}\t{t.kind.value}\t{t.surface}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
            if header != cls.FILE_VERSION:
                raise VocabError(f"unsupported vocabulary file header {header!r}")
            key, _, val = fh.readline().rstrip("\n").partition("\t")
            if key != "cost_edges":
                raise VocabError("missing cost_edges header line")
            cost_edges = [float(x) for x in val.split(",")] if val else []
            key, _, val = fh.readline().rstrip("\n").partition("\t")
            if key != "gap_buckets":
                raise VocabError("missing gap_buckets header line")
            gaps = []
            for part in val.split(","):
                lo, hi, name = part.split(":")
                gaps.append((int(lo), None if hi == "" else int(hi), name))
            tokens = []
            for line in fh:
                tid, kind, surface = line.rstrip("\n").split("\t")
                tokens.append(Token(int(tid), CodeSystem(kind), surface))
            for i, t in enumerate(tokens):
                if t.id != i:
                    raise VocabError("token ids must be dense and ascending")
        return cls(tokens, cost_edges, tuple(gaps))


def build_vocab(code_lists: dict[CodeSystem, Iterable[str]] | None = None,
                config: VocabConfig | None = None) -> Vocabulary:
    """Assemble the full token table from per-system code lists.

    Ids are deterministic: structural tokens take 0..3, everything else is
    sorted by (kind order, surface). Two builds from identical inputs are
    byte-identical after `save`.
    """
    code_lists = code_lists or {}
    config = config or VocabConfig()
    edges = cost_lower_edges(config.cost_bucket_count)

    surfaces: dict[str, CodeSystem] = {}

    def add(surface: str, kind: CodeSystem, *, dedup: bool = False):
        if surface in surfaces:
            if dedup:
                return
            raise DuplicateCode(f"surface {surface!r} registered twice")
        surfaces[surface] = kind

    for sex in SEXES:
        add(f"DEM:SEX_{sex}", CodeSystem.DEMOGRAPHIC)
    for age in range(config.age_max + 1):
        add(f"DEM:AGE_{age}", CodeSystem.DEMOGRAPHIC)
    for k in range(config.cost_bucket_count):
        add(f"COST:B{k}", CodeSystem.COST)
    for _, _, name in GAP_BUCKETS:
        add(f"GAP:{name}", CodeSystem.TIME_GAP)

    seen: dict[CodeSystem, set[str]] = {}
    for system, codes in code_lists.items():
        if system not in CODED_SYSTEMS:
            raise VocabError(f"code list for non-coded system {system}")
        for raw in codes:
            code = validate_code(system, raw)
            if code in seen.setdefault(system, set()):
                raise DuplicateCode(f"{system.value} code {raw!r} registered twice")
            seen[system].add(code)
            if system is CodeSystem.ICD10CM:
                add(f"DX:{code[:3]}", system, dedup=True)
            else:
                add(_SURFACE_PREFIX[system] + code, system, dedup=True)
    if seen.get(CodeSystem.ICD10CM):
        for ch in _EXTENSION_ALPHABET:
            add(f"DX-X:{ch}", CodeSystem.ICD10CM, dedup=True)

    ordered = sorted(surfaces.items(), key=lambda kv: (_KIND_ORDER[kv[1]], kv[0]))
    tokens = [
        Token(PAD_ID, CodeSystem.STRUCTURAL, PAD_SURFACE),
        Token(BOS_ID, CodeSystem.STRUCTURAL, BOS_SURFACE),
        Token(EOS_ID, CodeSystem.STRUCTURAL, EOS_SURFACE),
        Token(UNK_ID, CodeSystem.STRUCTURAL, UNK_SURFACE),
    ]
    for offset, (surface, kind) in enumerate(ordered):
        tokens.append(Token(4 + offset, kind, surface))
    return Vocabulary(tokens, edges)
