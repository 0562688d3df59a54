"""Timeline <-> token sequence conversion.

A linearized sequence is BOS, an age token at the anchor date, a sex
token, then date-ordered claim groups separated by gap tokens. Within a
date, claim lines sort by system priority then code; a line's cost token
immediately follows its code tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from datetime import date, timedelta

from .vocab import (BOS_ID, EOS_ID, UNK_ID, CodeSystem, EncodeStats,
                    MedicalEvent, Vocabulary)
from .synth import PatientTimeline, _event_order


class SequencerError(Exception):
    pass


@dataclass
class TokenSequence:
    tokens: list[int]
    anchor_date: date | None
    patient_id: str

    def __len__(self) -> int:
        return len(self.tokens)

    def surfaces(self, vocab: Vocabulary) -> list[str]:
        return [vocab.surface(t) for t in self.tokens]


def event_group_tokens(event: MedicalEvent, vocab: Vocabulary,
                       strict: bool = True,
                       stats: EncodeStats | None = None) -> list[int]:
    """One claim line's tokens: concept tokens plus its cost token, if paid."""
    ids = vocab.encode_event(event, strict=strict, stats=stats)
    if event.paid is not None and event.system is not CodeSystem.COST:
        ids = ids + [vocab.quantize_cost(event.paid)]
    return ids


def _annotated_tokens(timeline: PatientTimeline, vocab: Vocabulary,
                      strict: bool, stats: EncodeStats | None):
    """(token_id, event_date) pairs for the complete sequence, incl. EOS."""
    events = sorted(timeline.events, key=_event_order)
    anchor = events[0].date if events else timeline.as_of
    if anchor is None:
        raise SequencerError(
            f"timeline {timeline.patient_id}: no events and no as_of anchor")
    age = anchor.year - timeline.birth_year
    out = [(BOS_ID, anchor), (vocab.age_token(age), anchor),
           (vocab.sex_token(timeline.sex), anchor)]
    prev_date = None
    for e in events:
        if prev_date is not None and e.date != prev_date:
            gap = (e.date - prev_date).days
            out.append((vocab.quantize_gap(gap), e.date))
        prev_date = e.date
        for tid in event_group_tokens(e, vocab, strict=strict, stats=stats):
            out.append((tid, e.date))
    out.append((EOS_ID, prev_date if prev_date is not None else anchor))
    return out, anchor


def linearize(timeline: PatientTimeline, vocab: Vocabulary,
              strict: bool = True,
              stats: EncodeStats | None = None) -> TokenSequence:
    """Complete EOS-terminated sequence for a timeline."""
    annotated, anchor = _annotated_tokens(timeline, vocab, strict, stats)
    return TokenSequence([t for t, _ in annotated], anchor, timeline.patient_id)


def split_at(timeline: PatientTimeline, cutoff: date, vocab: Vocabulary,
             strict: bool = True,
             stats: EncodeStats | None = None) -> tuple[TokenSequence, TokenSequence]:
    """Split the full linearization at a date boundary.

    The prompt holds everything dated <= cutoff (no EOS); the target is the
    remaining suffix, starting at the junction gap token, and keeps the EOS.
    Prompt + target always reassemble the full sequence exactly.
    """
    annotated, anchor = _annotated_tokens(timeline, vocab, strict, stats)
    tokens = [t for t, _ in annotated]
    first_group = _prefix_len(tokens, vocab)   # demographics always stay
    idx = len(annotated)
    for i in range(first_group, len(annotated)):
        if annotated[i][1] > cutoff:
            idx = i
            break
    if idx == len(annotated):          # nothing after cutoff: drop only the EOS
        return (TokenSequence(tokens[:-1], anchor, timeline.patient_id),
                TokenSequence([], anchor, timeline.patient_id))
    return (TokenSequence(tokens[:idx], anchor, timeline.patient_id),
            TokenSequence(tokens[idx:], anchor, timeline.patient_id))


def _group_spans(tokens: list[int], start: int, vocab: Vocabulary) -> list[tuple[int, int]]:
    """Atomic [lo, hi) spans after the demographic prefix.

    A span is a gap token, a code group (category + extensions + trailing
    cost), a bare cost token, UNK, or EOS. Truncation only drops whole spans.
    """
    spans = []
    i = start
    n = len(tokens)
    while i < n:
        t = tokens[i]
        if t == EOS_ID or t == UNK_ID or vocab.is_gap(t) or vocab.is_cost(t):
            spans.append((i, i + 1))
            i += 1
            continue
        if vocab.starts_code_group(t) is not None:
            j = i + 1
            while j < n and vocab.is_extension(tokens[j]):
                j += 1
            if j < n and vocab.is_cost(tokens[j]):
                j += 1
            spans.append((i, j))
            i = j
            continue
        spans.append((i, i + 1))       # defensive: unknown shape, atomic
        i += 1
    return spans


def _prefix_len(tokens: list[int], vocab: Vocabulary) -> int:
    i = 0
    if i < len(tokens) and tokens[i] == BOS_ID:
        i += 1
    while i < len(tokens) and vocab.kind(tokens[i]) is CodeSystem.DEMOGRAPHIC:
        i += 1
    return i


def truncate(seq: TokenSequence, max_len: int, vocab: Vocabulary) -> TokenSequence:
    """Recency-preserving truncation.

    Keeps BOS + demographics and as many of the most recent whole token
    groups as fit; strips any gap token left dangling at the front.
    """
    if max_len < 8:
        raise SequencerError("max_len must be >= 8")
    if len(seq.tokens) <= max_len:
        return seq
    p = _prefix_len(seq.tokens, vocab)
    spans = _group_spans(seq.tokens, p, vocab)
    budget = max_len - p
    kept: list[tuple[int, int]] = []
    total = 0
    for lo, hi in reversed(spans):
        if total + (hi - lo) > budget:
            break
        kept.append((lo, hi))
        total += hi - lo
    kept.reverse()
    while kept and vocab.is_gap(seq.tokens[kept[0][0]]):
        kept.pop(0)
    tokens = seq.tokens[:p]
    for lo, hi in kept:
        tokens.extend(seq.tokens[lo:hi])
    return replace(seq, tokens=tokens)


def decode_sequence(seq: TokenSequence, vocab: Vocabulary,
                    patient_id: str | None = None) -> PatientTimeline:
    """Parse a token sequence back into a timeline.

    Dates are reconstructed from gap-bucket representative days, costs from
    bucket representatives; a cost token directly after a code group becomes
    that claim's paid amount, otherwise it is a standalone COST event.
    """
    tokens = seq.tokens
    i = 0
    if i < len(tokens) and tokens[i] == BOS_ID:
        i += 1
    age = None
    sex = "U"
    while i < len(tokens) and vocab.kind(tokens[i]) is CodeSystem.DEMOGRAPHIC:
        surf = vocab.surface(tokens[i])
        if surf.startswith("DEM:AGE_"):
            age = int(surf[len("DEM:AGE_"):])
        elif surf.startswith("DEM:SEX_"):
            sex = surf[len("DEM:SEX_"):]
        i += 1
    anchor = seq.anchor_date or date(2000, 1, 1)
    cur = anchor
    events: list[MedicalEvent] = []
    open_group: int | None = None      # index into events of the current claim
    while i < len(tokens):
        t = tokens[i]
        if t == EOS_ID:
            break
        if vocab.is_gap(t):
            cur = cur + timedelta(days=vocab.gap_days(t))
            open_group = None
            i += 1
            continue
        if vocab.is_cost(t):
            value = vocab.dequantize_cost(t)
            if open_group is not None and events[open_group].paid is None:
                e = events[open_group]
                events[open_group] = MedicalEvent(e.date, e.system, e.code, paid=value)
            else:
                events.append(MedicalEvent(cur, CodeSystem.COST, "", paid=value))
            open_group = None
            i += 1
            continue
        system = vocab.starts_code_group(t)
        if system is not None:
            j = i + 1
            while j < len(tokens) and vocab.is_extension(tokens[j]):
                j += 1
            _, code = vocab.code_of(tokens[i:j])
            events.append(MedicalEvent(cur, system, code))
            open_group = len(events) - 1
            i = j
            continue
        open_group = None                # UNK or stray token: skip
        i += 1
    birth_year = anchor.year - age if age is not None else anchor.year
    return PatientTimeline(
        patient_id=patient_id or seq.patient_id, sex=sex, birth_year=birth_year,
        events=events, enrollment={}, as_of=anchor)


def dump_sequences(sequences: list[TokenSequence], vocab: Vocabulary, path) -> None:
    """Debug dump: one sequence per line, surfaces space-separated."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in sequences:
            fh.write(" ".join(s.surfaces(vocab)) + "\n")
