from datetime import date

import pytest
from hypothesis import given, settings, strategies as st

from medseq.vocab import (AGE_MAX, BOS_ID, CodeSystem, DuplicateCode,
                          EncodeStats, EOS_ID, MalformedCode, MedicalEvent,
                          NegativeCost, PAD_ID, Token, UNK_ID, UnknownCode,
                          Vocabulary, build_vocab, canonical_code,
                          cost_lower_edges, normalize_code, validate_code)

D = date(2017, 6, 1)


def test_structural_ids_pinned():
    v = build_vocab()
    assert v.surface(PAD_ID) == "PAD"
    assert v.surface(BOS_ID) == "BOS"
    assert v.surface(EOS_ID) == "EOS"
    assert v.surface(UNK_ID) == "UNK"
    assert all(v.kind(i) is CodeSystem.STRUCTURAL for i in range(4))


def test_empty_build_size():
    # structural + sexes + ages 0..110 + cost buckets + gap buckets
    v = build_vocab()
    assert len(v) == 4 + 3 + 111 + 14 + 8


def test_build_contains_expected_surfaces():
    v = build_vocab({CodeSystem.ICD10CM: ["C50.919"]})
    for s in ("DX:C50", "DX-X:9", "DX-X:1", "DEM:SEX_F", "DEM:AGE_47",
              "COST:B0", "GAP:D8_14"):
        assert v.has_surface(s), s


def test_build_deterministic_bytes(tmp_path):
    lists = {CodeSystem.ICD10CM: ["I10", "E11.9"], CodeSystem.CPT4: ["99213"]}
    a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    build_vocab(lists).save(a)
    build_vocab({k: list(v) for k, v in lists.items()}).save(b)
    assert a.read_bytes() == b.read_bytes()


def test_save_load_identical(tmp_path):
    v = build_vocab({CodeSystem.ICD10CM: ["C50.919", "I10"],
                     CodeSystem.NDC: ["00093104801"]})
    path = tmp_path / "v.tsv"
    v.save(path)
    w = Vocabulary.load(path)
    assert [(t.id, t.kind, t.surface) for t in v.tokens] == \
           [(t.id, t.kind, t.surface) for t in w.tokens]
    assert w.cost_edges == v.cost_edges
    w.save(tmp_path / "w.tsv")
    assert (tmp_path / "w.tsv").read_bytes() == path.read_bytes()


def test_duplicate_code_rejected():
    with pytest.raises(DuplicateCode):
        build_vocab({CodeSystem.ICD10CM: ["C50.919", "C50.919"]})
    # same code spelled differently still collides after normalization
    with pytest.raises(DuplicateCode):
        build_vocab({CodeSystem.ICD10CM: ["C50.919", "c50919"]})


def test_malformed_code_rejected():
    with pytest.raises(MalformedCode):
        build_vocab({CodeSystem.ICD10CM: ["5AB"]})
    with pytest.raises(MalformedCode):
        build_vocab({CodeSystem.NDC: ["123"]})
    with pytest.raises(MalformedCode):
        build_vocab({CodeSystem.ICD10CM: ["C50.91999"]})  # >3 extension chars


def test_encode_icd_split():
    v = build_vocab({CodeSystem.ICD10CM: ["C50.919"]})
    e = MedicalEvent(D, CodeSystem.ICD10CM, "C50.919")
    assert [v.surface(i) for i in v.encode_event(e)] == \
        ["DX:C50", "DX-X:9", "DX-X:1", "DX-X:9"]


def test_encode_demographic_single_token():
    v = build_vocab()
    e = MedicalEvent(D, CodeSystem.DEMOGRAPHIC, "SEX_F")
    assert [v.surface(i) for i in v.encode_event(e)] == ["DEM:SEX_F"]


def test_encode_unknown_strict_vs_lenient():
    v = build_vocab({CodeSystem.ICD10CM: ["C50.919"]})
    e = MedicalEvent(D, CodeSystem.ICD10CM, "Q99.ZZZ")
    with pytest.raises(UnknownCode):
        v.encode_event(e, strict=True)
    stats = EncodeStats()
    assert v.encode_event(e, strict=False, stats=stats) == [UNK_ID]
    assert stats.unknown_count == 1
    # syntax-invalid code at encode time is unknown too
    bad = MedicalEvent(D, CodeSystem.ICD10CM, "Q99.ZZZZ")
    with pytest.raises(UnknownCode):
        v.encode_event(bad, strict=True)


def test_cost_bucket_examples():
    v = build_vocab()
    assert v.surface(v.quantize_cost(0.0)) == "COST:B0"
    assert v.dequantize_cost(v.quantize_cost(0.0)) == 0.0
    assert v.surface(v.quantize_cost(12.0)) == "COST:B3"
    assert v.dequantize_cost(v.quantize_cost(12.0)) == pytest.approx(17.78, abs=0.005)
    assert v.surface(v.quantize_cost(6097.0)) == "COST:B8"
    assert v.dequantize_cost(v.quantize_cost(6097.0)) == pytest.approx(5623.41, abs=0.005)


def test_cost_bucket_edges_and_top():
    v = build_vocab()
    edges = cost_lower_edges()
    assert edges[0] == 1.0
    assert edges[-1] == pytest.approx(1e6)
    # exact edge goes to the bucket it opens
    for k, lo in enumerate(edges, start=1):
        assert v.cost_bucket(lo) == k
    assert v.cost_bucket(0.5) == 0
    assert v.cost_bucket(3.5e7) == 13
    assert v.dequantize_cost(v.quantize_cost(3.5e7)) == pytest.approx(1e6 * 10 ** 0.25)


def test_cost_negative_rejected():
    v = build_vocab()
    with pytest.raises(NegativeCost):
        v.quantize_cost(-1.0)
    with pytest.raises(NegativeCost):
        v.quantize_cost(float("nan"))
    with pytest.raises(NegativeCost):
        v.quantize_cost(float("inf"))


def test_gap_bucket_table():
    v = build_vocab()
    expect = {0: "D0", 1: "D1_3", 3: "D1_3", 4: "D4_7", 7: "D4_7", 8: "D8_14",
              12: "D8_14", 14: "D8_14", 15: "D15_30", 30: "D15_30",
              31: "D31_90", 90: "D31_90", 91: "D91_365", 365: "D91_365",
              366: "D365P", 400: "D365P", 10000: "D365P"}
    for days, name in expect.items():
        assert v.surface(v.quantize_gap(days)) == f"GAP:{name}", days


def test_gap_representative_requantizes_to_same_bucket():
    v = build_vocab()
    for lo, hi, name in v.gap_buckets:
        tid = v.id_of(f"GAP:{name}")
        rep = v.gap_days(tid)
        assert v.quantize_gap(rep) == tid
        assert rep >= lo and (hi is None or rep <= hi)


def test_normalize_and_canonical():
    assert normalize_code(CodeSystem.ICD10CM, "c50.919") == "C50919"
    assert canonical_code(CodeSystem.ICD10CM, "C50919") == "C50.919"
    assert canonical_code(CodeSystem.ICD10CM, "I10") == "I10"
    assert validate_code(CodeSystem.NDC, "00093104801") == "00093104801"


def test_sex_and_age_tokens():
    v = build_vocab()
    assert v.surface(v.sex_token("F")) == "DEM:SEX_F"
    with pytest.raises(UnknownCode):
        v.sex_token("X")
    assert v.surface(v.age_token(47)) == "DEM:AGE_47"
    assert v.surface(v.age_token(200)) == f"DEM:AGE_{AGE_MAX}"
    assert v.surface(v.age_token(-3)) == "DEM:AGE_0"


# -- property: every encodable concept takes 1..4 tokens ---------------------

_vocab_for_props = build_vocab({
    CodeSystem.ICD10CM: ["C50.919", "I10", "E11.9", "J44", "Z00.00"],
    CodeSystem.CPT4: ["99213", "83036"],
    CodeSystem.NDC: ["00093104801"],
    CodeSystem.HCPCS: ["J3490"],
    CodeSystem.PLACE_OF_SERVICE: ["11"],
})

_ext = st.text(alphabet="0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ",
               min_size=0, max_size=3)
_icd_codes = st.builds(lambda cat, ext: cat + ext,
                       st.sampled_from(["C50", "I10", "E11", "J44", "Z00"]),
                       _ext)


@st.composite
def _events(draw):
    kind = draw(st.sampled_from(["icd", "cpt", "ndc", "hcpcs", "pos",
                                 "cost", "sex", "age"]))
    if kind == "icd":
        return MedicalEvent(D, CodeSystem.ICD10CM, draw(_icd_codes))
    if kind == "cpt":
        return MedicalEvent(D, CodeSystem.CPT4, draw(st.sampled_from(["99213", "83036"])))
    if kind == "ndc":
        return MedicalEvent(D, CodeSystem.NDC, "00093104801")
    if kind == "hcpcs":
        return MedicalEvent(D, CodeSystem.HCPCS, "J3490")
    if kind == "pos":
        return MedicalEvent(D, CodeSystem.PLACE_OF_SERVICE, "11")
    if kind == "cost":
        dollars = draw(st.floats(min_value=0, max_value=1e8,
                                 allow_nan=False, allow_infinity=False))
        return MedicalEvent(D, CodeSystem.COST, "", paid=dollars)
    if kind == "sex":
        return MedicalEvent(D, CodeSystem.DEMOGRAPHIC,
                            draw(st.sampled_from(["SEX_F", "SEX_M", "SEX_U"])))
    return MedicalEvent(D, CodeSystem.DEMOGRAPHIC,
                        f"AGE_{draw(st.integers(0, 110))}")


@given(_events())
@settings(max_examples=300, deadline=None)
def test_encode_length_bound(event):
    ids = _vocab_for_props.encode_event(event, strict=True)
    assert 1 <= len(ids) <= 4


@given(st.floats(min_value=0, max_value=1e9, allow_nan=False,
                 allow_infinity=False))
@settings(max_examples=300, deadline=None)
def test_cost_roundtrip_stays_in_bucket(dollars):
    v = _vocab_for_props
    tid = v.quantize_cost(dollars)
    rep = v.dequantize_cost(tid)
    assert v.quantize_cost(rep) == tid
    if 1.0 <= dollars < 1e6:
        # closed geometric buckets: representative within a half-decade
        ratio = rep / dollars
        assert 10 ** -0.5 < ratio < 10 ** 0.5
