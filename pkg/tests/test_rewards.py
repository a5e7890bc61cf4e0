"""Extractor, entity-relation F1, label F1, and golden text-overlap metrics."""

import itertools
import json
import random

import pytest

from eastlab import rewards as R
from eastlab.catalog import (
    ABSENT,
    PRESENT,
    UNCERTAIN,
    UNMENTIONED,
    Mention,
    default_catalog,
)

from golden_data import GOLDEN_BLEU4, GOLDEN_ROUGE_L

CAT = default_catalog()


def expected_graph(mentions) -> R.EntityGraph:
    """Reference graph built directly from mention structure, not from text."""
    entities, relations = [], []
    for m in mentions:
        entities.append(R.Entity((m.condition,), R.CONDITION, m.attribute))
        cond_idx = len(entities) - 1
        if m.location:
            entities.append(R.Entity((m.location,), R.LOCATION, None))
            relations.append(R.Relation(cond_idx, len(entities) - 1, R.LOCATED_AT))
    return R.EntityGraph(entities, relations)


# ---------------------------------------------------------------------------
# extraction

def test_extract_bare_condition_is_present():
    g = R.extract_graph("there is cardiomegaly .", CAT)
    assert g.entities == [R.Entity(("cardiomegaly",), R.CONDITION, PRESENT)]
    assert g.relations == []


def test_extract_condition_with_location():
    g = R.extract_graph("there is effusion in the left zone .", CAT)
    assert g.entities == [
        R.Entity(("effusion",), R.CONDITION, PRESENT),
        R.Entity(("left",), R.LOCATION, None),
    ]
    assert g.relations == [R.Relation(0, 1, R.LOCATED_AT)]


def test_extract_cue_words():
    g = R.extract_graph("no edema is seen .", CAT)
    assert g.entities[0].attribute == ABSENT
    g = R.extract_graph("possible nodule is noted .", CAT)
    assert g.entities[0].attribute == UNCERTAIN


def test_extract_empty_and_unrecognized():
    assert R.extract_graph("", CAT).is_empty
    assert R.extract_graph(None, CAT).is_empty
    assert R.extract_graph("no acute findings .", CAT).is_empty
    assert R.extract_graph("zone the is there", CAT).is_empty


def test_cue_resets_at_sentence_boundary():
    g = R.extract_graph("no edema is seen . effusion is seen .", CAT)
    assert [e.attribute for e in g.entities] == [ABSENT, PRESENT]


def test_location_without_condition_ignored():
    assert R.extract_graph("in the left zone .", CAT).is_empty


def test_location_links_to_nearest_preceding_condition():
    g = R.extract_graph("no edema is seen . there is effusion in the right zone .", CAT)
    conds = [e for e in g.entities if e.category == R.CONDITION]
    assert len(conds) == 2 and len(g.relations) == 1
    rel = g.relations[0]
    assert g.entities[rel.source].surface == ("effusion",)
    assert g.entities[rel.target].surface == ("right",)


def test_extractor_inverts_renderer_exhaustively():
    """Every (condition, attribute, location, template) renders and extracts back."""
    cases = 0
    for cond in CAT.conditions:
        for attr in (PRESENT, ABSENT, UNCERTAIN):
            for loc in CAT.allowed_locations[cond]:
                for ti in range(len(CAT.template_pool(attr))):
                    m = Mention(cond, attr, loc)
                    text = CAT.render_finding(m, ti)
                    assert R.er_f1(R.extract_graph(text, CAT), expected_graph([m])) == 1.0
                    cases += 1
    assert cases == 12 * 4 * 7  # template pool sizes: 2 + 1 + 1 per location slot


def test_extractor_inverts_renderer_on_multi_mention_reports():
    rng = random.Random(3)
    for _ in range(200):
        conds = rng.sample(CAT.conditions, rng.randint(1, 5))
        mentions = [
            Mention(
                c,
                rng.choice((PRESENT, ABSENT, UNCERTAIN)),
                rng.choice(CAT.allowed_locations[c]),
            )
            for c in conds
        ]
        t_idx = [rng.randint(0, 1) for _ in mentions]
        text = CAT.render_findings(mentions, t_idx)
        assert R.er_f1(R.extract_graph(text, CAT), expected_graph(mentions)) == 1.0


# ---------------------------------------------------------------------------
# er_f1

def test_er_f1_identical_and_disjoint():
    g1 = expected_graph([Mention("effusion", PRESENT, "left")])
    g2 = expected_graph([Mention("edema", ABSENT)])
    assert R.er_f1(g1, g1) == 1.0
    assert R.er_f1(g1, g2) == 0.0


def test_er_f1_empty_conventions():
    empty = R.EntityGraph([], [])
    g = expected_graph([Mention("edema", PRESENT)])
    assert R.er_f1(empty, empty) == 1.0
    assert R.er_f1(empty, g) == 0.0
    assert R.er_f1(g, empty) == 0.0


def test_er_f1_hand_case_precision_one_recall_two_thirds():
    ref = expected_graph(
        [Mention("edema", PRESENT), Mention("effusion", ABSENT), Mention("nodule", PRESENT)]
    )
    hyp = expected_graph([Mention("edema", PRESENT), Mention("nodule", PRESENT)])
    assert R.er_f1(hyp, ref) == pytest.approx(0.8, abs=1e-12)


def test_er_f1_attribute_mismatch_not_matched():
    ref = expected_graph([Mention("edema", PRESENT)])
    hyp = expected_graph([Mention("edema", ABSENT)])
    assert R.er_f1(hyp, ref) == 0.0


def test_er_f1_relation_counts_in_pool():
    # same entities, hyp misses the relation: matched 2 of ref 3, hyp 2
    ref = expected_graph([Mention("effusion", PRESENT, "left")])
    hyp_entities = [
        R.Entity(("effusion",), R.CONDITION, PRESENT),
        R.Entity(("left",), R.LOCATION, None),
    ]
    hyp = R.EntityGraph(hyp_entities, [])
    # P = 2/2, R = 2/3 -> 0.8
    assert R.er_f1(hyp, ref) == pytest.approx(0.8, abs=1e-12)


def test_er_f1_symmetric_match_counts():
    rng = random.Random(11)
    for _ in range(100):
        def rand_graph():
            ms = [
                Mention(
                    rng.choice(CAT.conditions),
                    rng.choice((PRESENT, ABSENT, UNCERTAIN)),
                    rng.choice(CAT.allowed_locations[CAT.conditions[0]]),
                )
                for _ in range(rng.randint(0, 4))
            ]
            return expected_graph(ms)

        a, b = rand_graph(), rand_graph()
        assert R.er_f1(a, b) == pytest.approx(R.er_f1(b, a), abs=1e-15)


# ---------------------------------------------------------------------------
# report_reward

def test_report_reward_identical_is_one():
    ref = R.TextSections("there is effusion .", "effusion remains .")
    assert R.report_reward(ref, ref, CAT) == 1.0


def test_report_reward_skips_missing_reference_section():
    ref = R.TextSections("no edema is seen . there is effusion . nodule is seen .", None)
    hyp = R.TextSections("no edema is seen . there is effusion .", "nodule remains .")
    # findings: hyp has 2 of ref's 3 entities -> 0.8; impression not applicable
    assert R.report_reward(hyp, ref, CAT) == pytest.approx(0.8, abs=1e-12)


def test_report_reward_missing_hyp_section_scores_by_empty_rule():
    ref = R.TextSections("there is effusion .", "effusion remains .")
    hyp = R.TextSections(None, "effusion remains .")
    assert R.report_reward(hyp, ref, CAT) == pytest.approx(0.5)
    ref2 = R.TextSections("no acute findings .", "no acute abnormality .")
    hyp2 = R.TextSections(None, None)
    assert R.report_reward(hyp2, ref2, CAT) == 1.0  # both sections extract empty


def test_report_reward_requires_some_reference_section():
    with pytest.raises(ValueError):
        R.report_reward(R.TextSections(None, None), R.TextSections(None, None), CAT)


def test_report_reward_fuzz_equals_hand_combination():
    rng = random.Random(23)
    pool = [
        "there is effusion in the left zone .",
        "no edema is seen .",
        "possible nodule is noted .",
        "no acute findings .",
        "effusion remains .",
        "cardiomegaly is seen .",
        None,
    ]
    for _ in range(500):
        hyp = R.TextSections(rng.choice(pool), rng.choice(pool))
        ref = R.TextSections(rng.choice(pool), rng.choice(pool))
        if ref.findings is None and ref.impression is None:
            continue
        parts = []
        if ref.findings is not None:
            parts.append(
                R.er_f1(R.extract_graph(hyp.findings, CAT), R.extract_graph(ref.findings, CAT))
            )
        if ref.impression is not None:
            parts.append(
                R.er_f1(R.extract_graph(hyp.impression, CAT), R.extract_graph(ref.impression, CAT))
            )
        assert R.report_reward(hyp, ref, CAT) == pytest.approx(
            sum(parts) / len(parts), abs=1e-15
        )


# ---------------------------------------------------------------------------
# label metrics

def test_labels_from_texts_first_mention_wins():
    labels = R.labels_from_texts(
        ["no effusion is seen .", "effusion remains ."], CAT
    )
    idx = CAT.condition_index["effusion"]
    assert labels[idx] == ABSENT
    assert all(c == UNMENTIONED for i, c in enumerate(labels) if i != idx)


def test_label_macro_f1_identical_with_presents_is_one():
    batch = [
        tuple(PRESENT if i % 3 == s % 3 else UNMENTIONED for i in range(3))
        for s in range(6)
    ]
    assert R.label_macro_f1(batch, batch) == 1.0


def test_label_macro_f1_all_unmentioned_vs_mixed_is_zero():
    ref = [
        (PRESENT, ABSENT, UNMENTIONED),
        (UNMENTIONED, PRESENT, PRESENT),
        (PRESENT, UNCERTAIN, PRESENT),
    ]
    hyp = [(UNMENTIONED,) * 3] * 3
    assert R.label_macro_f1(hyp, ref) == 0.0


def test_label_macro_f1_hand_case():
    ref = [
        (PRESENT, UNMENTIONED, ABSENT),
        (PRESENT, UNMENTIONED, PRESENT),
        (UNMENTIONED, PRESENT, UNMENTIONED),
    ]
    hyp = [
        (PRESENT, UNMENTIONED, UNMENTIONED),
        (UNMENTIONED, PRESENT, PRESENT),
        (UNMENTIONED, PRESENT, UNMENTIONED),
    ]
    # class F1s: 2/3, 2/3, 1 -> macro 7/9
    assert R.label_macro_f1(hyp, ref) == pytest.approx(7 / 9, abs=1e-12)


def test_label_macro_f1_rejects_mismatch():
    with pytest.raises(ValueError):
        R.label_macro_f1([(PRESENT,)], [(PRESENT, ABSENT)])
    with pytest.raises(ValueError):
        R.label_macro_f1([], [])


# ---------------------------------------------------------------------------
# golden overlap metrics

@pytest.mark.parametrize("name,hyp,ref,want", GOLDEN_BLEU4, ids=[c[0] for c in GOLDEN_BLEU4])
def test_bleu4_golden(name, hyp, ref, want):
    got = R.bleu4(hyp.split(), ref.split())
    assert abs(got - want) <= 1e-9


@pytest.mark.parametrize("name,hyp,ref,want", GOLDEN_ROUGE_L, ids=[c[0] for c in GOLDEN_ROUGE_L])
def test_rouge_l_golden(name, hyp, ref, want):
    got = R.rouge_l(hyp.split(), ref.split())
    assert abs(got - want) <= 1e-9


def test_metrics_pure_and_batch_order_invariant():
    pairs = [(h.split(), r.split()) for _, h, r, _ in GOLDEN_BLEU4]
    fwd = [R.bleu4(h, r) for h, r in pairs]
    rev = [R.bleu4(h, r) for h, r in reversed(pairs)]
    assert fwd == rev[::-1]


# ---------------------------------------------------------------------------
# score rows and report emission

def test_score_study_marks_missing_reference_na():
    ref = R.TextSections("there is effusion .", None)
    hyp = R.TextSections("there is effusion .", "effusion remains .")
    row = R.score_study("s1", hyp, ref, CAT)
    assert row["impression_er_f1"] is None
    assert row["impression_bleu4"] is None
    assert row["findings_er_f1"] == 1.0


def test_aggregate_is_mean_of_per_study_rows(tmp_path):
    refs = [
        R.TextSections("there is effusion .", "effusion remains ."),
        R.TextSections("no edema is seen .", None),
        R.TextSections("possible nodule is noted .", "no acute abnormality ."),
    ]
    hyps = [
        R.TextSections("there is effusion .", "effusion remains ."),
        R.TextSections("no acute findings .", "no acute abnormality ."),
        R.TextSections(None, "no acute abnormality ."),
    ]
    rows = [
        R.score_study(f"s{i}", h, r, CAT) for i, (h, r) in enumerate(zip(hyps, refs))
    ]
    agg = R.aggregate_rows(rows)
    for col in R.SCORE_COLUMNS:
        vals = [row[col] for row in rows if row[col] is not None]
        want = sum(vals) / len(vals)
        assert abs(agg[col] - want) <= 1e-9

    csv_path, jsonl_path = tmp_path / "scores.csv", tmp_path / "scores.jsonl"
    returned = R.write_score_report(rows, csv_path, jsonl_path)
    assert returned == agg
    csv_lines = csv_path.read_text().splitlines()
    assert len(csv_lines) == 1 + len(rows) + 1
    assert "NA" in csv_lines[2]  # study s1 has a missing impression reference
    parsed = [json.loads(line) for line in jsonl_path.read_text().splitlines()]
    assert parsed[-1]["study_id"] == "aggregate"
    assert parsed[1]["impression_er_f1"] is None
