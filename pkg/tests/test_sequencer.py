from datetime import date, timedelta

import pytest
from hypothesis import given, settings, strategies as st

from medseq.vocab import (CodeSystem, MedicalEvent, build_vocab,
                          normalize_code)
from medseq.synth import PatientTimeline
from medseq.sequencer import (SequencerError, decode_sequence,
                              dump_sequences, event_group_tokens, linearize,
                              split_at, truncate)

VOCAB = build_vocab({
    CodeSystem.ICD10CM: ["C50.919", "I10", "E11.9", "I63.9", "Z00"],
    CodeSystem.CPT4: ["99213"],
    CodeSystem.NDC: ["00093104801"],
    CodeSystem.PLACE_OF_SERVICE: ["11"],
})


def _timeline(events, sex="F", birth_year=1970, as_of=date(2017, 1, 1)):
    return PatientTimeline("T1", sex, birth_year, list(events), {}, as_of=as_of)


def test_demographics_only():
    seq = linearize(_timeline([]), VOCAB)
    assert seq.surfaces(VOCAB) == ["BOS", "DEM:AGE_47", "DEM:SEX_F", "EOS"]
    assert seq.anchor_date == date(2017, 1, 1)


def test_no_anchor_errors():
    with pytest.raises(SequencerError):
        linearize(PatientTimeline("T1", "F", 1970, [], {}, as_of=None), VOCAB)


def test_gap_between_two_claims():
    events = [MedicalEvent(date(2017, 3, 1), CodeSystem.ICD10CM, "I10"),
              MedicalEvent(date(2017, 3, 13), CodeSystem.ICD10CM, "E11.9")]
    seq = linearize(_timeline(events), VOCAB)
    surfaces = seq.surfaces(VOCAB)
    assert surfaces.count("GAP:D8_14") == 1
    assert sum(s.startswith("GAP:") for s in surfaces) == 1
    assert surfaces.index("GAP:D8_14") == surfaces.index("DX:I10") + 1


def test_same_day_priority_icd_before_cpt():
    d = date(2017, 5, 1)
    events = [MedicalEvent(d, CodeSystem.CPT4, "99213"),
              MedicalEvent(d, CodeSystem.ICD10CM, "I10")]
    surfaces = linearize(_timeline(events), VOCAB).surfaces(VOCAB)
    assert surfaces.index("DX:I10") < surfaces.index("CPT:99213")
    assert "GAP:D0" not in surfaces  # same-day events share one date group


def test_cost_token_immediately_follows_its_claim():
    d = date(2017, 5, 1)
    events = [MedicalEvent(d, CodeSystem.ICD10CM, "I10", paid=120.0),
              MedicalEvent(d, CodeSystem.CPT4, "99213", paid=80.0)]
    surfaces = linearize(_timeline(events), VOCAB).surfaces(VOCAB)
    i_dx = surfaces.index("DX:I10")
    i_cpt = surfaces.index("CPT:99213")
    assert surfaces[i_dx + 1].startswith("COST:")
    assert surfaces[i_cpt + 1].startswith("COST:")


def test_event_group_includes_cost():
    e = MedicalEvent(date(2017, 1, 1), CodeSystem.ICD10CM, "C50.919", paid=12.0)
    group = [VOCAB.surface(t) for t in event_group_tokens(e, VOCAB)]
    assert group == ["DX:C50", "DX-X:9", "DX-X:1", "DX-X:9", "COST:B3"]


def _year_fixture():
    events = [
        MedicalEvent(date(2017, 2, 1), CodeSystem.ICD10CM, "I10", paid=100.0),
        MedicalEvent(date(2017, 11, 1), CodeSystem.ICD10CM, "I10", paid=110.0),
        MedicalEvent(date(2018, 2, 1), CodeSystem.ICD10CM, "E11.9", paid=200.0),
        MedicalEvent(date(2018, 6, 1), CodeSystem.CPT4, "99213", paid=50.0),
    ]
    return _timeline(events)


def test_split_at_year_boundary():
    t = _year_fixture()
    prompt, target = split_at(t, date(2017, 12, 31), VOCAB)
    ps, ts = prompt.surfaces(VOCAB), target.surfaces(VOCAB)
    assert "DX:E11" not in ps and "CPT:99213" not in ps
    assert "EOS" not in ps
    assert ts[0].startswith("GAP:")         # junction gap belongs to the target
    assert "DX:E11" in ts and ts[-1] == "EOS"
    full = linearize(t, VOCAB)
    assert prompt.tokens + target.tokens == full.tokens


def test_split_before_all_events():
    t = _year_fixture()
    prompt, target = split_at(t, date(2016, 1, 1), VOCAB)
    assert prompt.surfaces(VOCAB) == ["BOS", "DEM:AGE_47", "DEM:SEX_F"]
    assert len(target.tokens) == len(linearize(t, VOCAB).tokens) - 3


def test_split_after_all_events():
    t = _year_fixture()
    prompt, target = split_at(t, date(2019, 1, 1), VOCAB)
    assert target.tokens == []
    assert prompt.tokens == linearize(t, VOCAB).tokens[:-1]


@given(st.integers(0, 800))
@settings(max_examples=60, deadline=None)
def test_split_concatenation_identity(offset):
    t = _year_fixture()
    cutoff = date(2016, 12, 1) + timedelta(days=offset)
    prompt, target = split_at(t, cutoff, VOCAB)
    full = linearize(t, VOCAB)
    if target.tokens:
        assert prompt.tokens + target.tokens == full.tokens
    else:
        assert prompt.tokens == full.tokens[:-1]


def test_truncate_short_unchanged():
    seq = linearize(_year_fixture(), VOCAB)
    assert truncate(seq, 256, VOCAB).tokens == seq.tokens


def test_truncate_keeps_prefix_and_recent_suffix():
    events = [MedicalEvent(date(2017, 1, 1) + timedelta(days=30 * i),
                           CodeSystem.ICD10CM, "I10", paid=100.0)
              for i in range(40)]
    seq = linearize(_timeline(events), VOCAB)
    assert len(seq.tokens) > 60
    cut = truncate(seq, 30, VOCAB)
    assert len(cut.tokens) <= 30
    assert cut.tokens[:3] == seq.tokens[:3]
    assert cut.tokens[3:] == seq.tokens[len(seq.tokens) - len(cut.tokens) + 3:]
    surfaces = cut.surfaces(VOCAB)
    assert not surfaces[3].startswith("GAP:")     # no dangling gap at the front


def test_truncate_group_atomicity():
    d = date(2017, 1, 1)
    events = [MedicalEvent(d + timedelta(days=40 * i), CodeSystem.ICD10CM,
                           "C50.919", paid=12.0) for i in range(10)]
    seq = linearize(_timeline(events), VOCAB)
    for max_len in range(8, len(seq.tokens)):
        cut = truncate(seq, max_len, VOCAB).surfaces(VOCAB)
        # a kept group is always complete: category, 3 extensions, cost
        i = 3
        while i < len(cut):
            if cut[i] == "DX:C50":
                assert cut[i + 1:i + 4] == ["DX-X:9", "DX-X:1", "DX-X:9"]
                assert cut[i + 4] == "COST:B3"
                i += 5
            else:
                assert cut[i].startswith("GAP:") or cut[i] == "EOS"
                i += 1


def test_truncate_to_prefix_only():
    events = [MedicalEvent(date(2017, 1, 1), CodeSystem.ICD10CM, "C50.919",
                           paid=12.0)] * 3
    seq = linearize(_timeline(events), VOCAB)
    cut = truncate(seq, 8, VOCAB)
    # prefix + whatever whole groups fit in 8 tokens
    assert cut.tokens[:3] == seq.tokens[:3]
    assert len(cut.tokens) <= 8


def test_truncate_min_len_guard():
    seq = linearize(_year_fixture(), VOCAB)
    with pytest.raises(SequencerError):
        truncate(seq, 7, VOCAB)


def test_dump_sequences(tmp_path):
    seqs = [linearize(_timeline([]), VOCAB)]
    out = tmp_path / "seqs.txt"
    dump_sequences(seqs, VOCAB, out)
    assert out.read_text() == "BOS DEM:AGE_47 DEM:SEX_F EOS\n"


# -- reversibility property ---------------------------------------------------

_DATES = st.integers(0, 1200)
_CODED = st.sampled_from([
    (CodeSystem.ICD10CM, "C50.919"), (CodeSystem.ICD10CM, "I10"),
    (CodeSystem.ICD10CM, "E11.9"), (CodeSystem.CPT4, "99213"),
    (CodeSystem.NDC, "00093104801"), (CodeSystem.PLACE_OF_SERVICE, "11"),
])


@st.composite
def _timelines(draw):
    n = draw(st.integers(0, 12))
    events = []
    for _ in range(n):
        system, code = draw(_CODED)
        paid = draw(st.one_of(st.none(), st.floats(0, 1e6, allow_nan=False)))
        if system is not CodeSystem.ICD10CM:
            paid = draw(st.one_of(st.none(), st.floats(0, 1e4, allow_nan=False)))
        d = date(2017, 1, 1) + timedelta(days=draw(_DATES))
        events.append(MedicalEvent(d, system, code, paid=paid))
    return _timeline(events)


def _canon(events):
    """Canonical (day-index, priority, code, quantized paid) tuples."""
    from medseq.synth import _event_order
    days = {d: i for i, d in enumerate(sorted({e.date for e in events}))}
    out = []
    for e in sorted(events, key=_event_order):
        paid = None if e.paid is None else \
            VOCAB.dequantize_cost(VOCAB.quantize_cost(e.paid))
        out.append((days[e.date], e.system,
                    normalize_code(e.system, e.code), paid))
    return out


@given(_timelines())
@settings(max_examples=120, deadline=None)
def test_linearize_decode_roundtrip(timeline):
    seq = linearize(timeline, VOCAB)
    back = decode_sequence(seq, VOCAB)
    assert back.sex == timeline.sex
    assert len(back.events) == len(timeline.events)
    # event multiset and order match at bucket/normalized precision
    assert _canon(back.events) == _canon(timeline.events)
    # inter-date gaps agree at bucket precision
    orig_days = sorted({e.date for e in timeline.events})
    back_days = sorted({e.date for e in back.events})
    assert len(orig_days) == len(back_days)
    for (a1, a2), (b1, b2) in zip(
            zip(orig_days, orig_days[1:]), zip(back_days, back_days[1:])):
        assert VOCAB.gap_bucket((a2 - a1).days) == VOCAB.gap_bucket((b2 - b1).days)


@given(_timelines())
@settings(max_examples=120, deadline=None)
def test_gap_token_invariants(timeline):
    surfaces = linearize(timeline, VOCAB).surfaces(VOCAB)
    assert surfaces[0] == "BOS" and surfaces[-1] == "EOS"
    prev_gap = False
    for i, s in enumerate(surfaces):
        is_gap = s.startswith("GAP:")
        if is_gap:
            assert i > 3, "gap cannot open the event stream"
            assert not prev_gap, "adjacent gap tokens"
        prev_gap = is_gap
