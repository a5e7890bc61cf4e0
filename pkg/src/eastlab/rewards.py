"""Grammar-based entity/relation reward and text-overlap metrics.

The extractor is the exact inverse of the catalog renderer: a single pass
over tokens recognizes condition words (attribute taken from a preceding cue
word in the same sentence: "no" -> absent, "possible" -> uncertain, bare
-> present) and location words, linking each location to the nearest
preceding condition in its sentence. The entity-relation F1 over extracted
graphs is the RL reward; a per-condition label F1 is the checkpoint monitor;
BLEU-4 and ROUGE-L cover surface overlap.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import NamedTuple

from .catalog import (
    ABSENT,
    NEGATION_CUE,
    PERIOD,
    PRESENT,
    UNCERTAIN,
    UNCERTAINTY_CUE,
    UNMENTIONED,
    ConditionCatalog,
)
from .vocab import normalize

CONDITION = "condition"
LOCATION = "location"
LOCATED_AT = "located_at"

BLEU_EPS = 1e-9


class Entity(NamedTuple):
    surface: tuple
    category: str
    attribute: str | None  # conditions carry an attribute, locations do not


class Relation(NamedTuple):
    source: int  # entity index of the condition
    target: int  # entity index of the location
    kind: str


@dataclass
class EntityGraph:
    entities: list
    relations: list

    @property
    def is_empty(self) -> bool:
        return not self.entities and not self.relations

    def __post_init__(self):
        for rel in self.relations:
            if not (0 <= rel.source < len(self.entities) and 0 <= rel.target < len(self.entities)):
                raise ValueError(f"relation {rel} has out-of-range endpoints")


def extract_graph(text: str | None, catalog: ConditionCatalog) -> EntityGraph:
    """Deterministic single-pass extraction; unrecognized tokens are ignored.

    A location word with no preceding condition in its sentence is ignored
    entirely (the grammar never produces one, and a dangling location entity
    would have no relation to carry it).
    """
    entities: list[Entity] = []
    relations: list[Relation] = []
    if not text:
        return EntityGraph(entities, relations)
    conditions = set(catalog.conditions)
    locations = set(catalog.locations)
    pending = PRESENT
    anchor = None  # index of the nearest preceding condition in this sentence
    for tok in normalize(text).split(" "):
        if tok == PERIOD:
            pending = PRESENT
            anchor = None
        elif tok == NEGATION_CUE:
            pending = ABSENT
        elif tok == UNCERTAINTY_CUE:
            pending = UNCERTAIN
        elif tok in conditions:
            entities.append(Entity((tok,), CONDITION, pending))
            anchor = len(entities) - 1
            pending = PRESENT
        elif tok in locations and anchor is not None:
            entities.append(Entity((tok,), LOCATION, None))
            relations.append(Relation(anchor, len(entities) - 1, LOCATED_AT))
    return EntityGraph(entities, relations)


def _multiset_overlap(a: list, b: list) -> int:
    counts: dict = {}
    for item in a:
        counts[item] = counts.get(item, 0) + 1
    matched = 0
    for item in b:
        if counts.get(item, 0) > 0:
            counts[item] -= 1
            matched += 1
    return matched


def _relation_keys(graph: EntityGraph) -> list:
    return [
        (graph.entities[r.source], graph.entities[r.target], r.kind)
        for r in graph.relations
    ]


def er_f1(hyp: EntityGraph, ref: EntityGraph) -> float:
    """Micro-pooled F1 over entity and relation matches.

    Entities match on (surface, category, attribute); relations match on
    (source entity key, target entity key, kind), counted as multisets.
    Both graphs empty -> 1.0 (correct silence); exactly one empty -> 0.0.
    """
    if hyp.is_empty and ref.is_empty:
        return 1.0
    if hyp.is_empty or ref.is_empty:
        return 0.0
    matched = _multiset_overlap(hyp.entities, ref.entities)
    matched += _multiset_overlap(_relation_keys(hyp), _relation_keys(ref))
    hyp_total = len(hyp.entities) + len(hyp.relations)
    ref_total = len(ref.entities) + len(ref.relations)
    if matched == 0:
        return 0.0
    precision = matched / hyp_total
    recall = matched / ref_total
    return 2.0 * precision * recall / (precision + recall)


class TextSections(NamedTuple):
    """Section texts of one report; None marks a missing section."""

    findings: str | None
    impression: str | None


def section_er_f1(hyp_text: str | None, ref_text: str, catalog: ConditionCatalog) -> float:
    return er_f1(extract_graph(hyp_text, catalog), extract_graph(ref_text, catalog))


def report_reward(hyp: TextSections, ref: TextSections, catalog: ConditionCatalog) -> float:
    """Mean entity-relation F1 over the sections the reference has.

    Reference-missing sections are excluded; a hypothesis missing a section
    the reference has is scored through the empty-graph rule (0 unless the
    reference section itself extracts to an empty graph).
    """
    scores = []
    if ref.findings is not None:
        scores.append(section_er_f1(hyp.findings, ref.findings, catalog))
    if ref.impression is not None:
        scores.append(section_er_f1(hyp.impression, ref.impression, catalog))
    if not scores:
        raise ValueError("reference has no sections; such studies are excluded upstream")
    return sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# label vectors (checkpoint-selection monitor)

def labels_from_texts(texts, catalog: ConditionCatalog) -> tuple:
    """Per-condition class vector from up to two section texts.

    The first extracted mention of a condition fixes its class; conditions
    never mentioned are unmentioned.
    """
    classes = {}
    for text in texts:
        if text is None:
            continue
        for ent in extract_graph(text, catalog).entities:
            if ent.category == CONDITION and ent.surface[0] not in classes:
                classes[ent.surface[0]] = ent.attribute
    return tuple(classes.get(c, UNMENTIONED) for c in catalog.conditions)


def label_macro_f1(hyp_labels: list, ref_labels: list) -> float:
    """Macro-averaged binary F1 on "mentioned as present", one class per condition.

    Inputs are batches of equal-length class vectors. A class with no
    positives anywhere (tp = fp = fn = 0) scores 0, so the metric is
    conservative on small batches.
    """
    if len(hyp_labels) != len(ref_labels):
        raise ValueError(f"batch sizes differ: {len(hyp_labels)} vs {len(ref_labels)}")
    if not hyp_labels:
        raise ValueError("empty batch")
    width = len(ref_labels[0])
    for h, r in zip(hyp_labels, ref_labels):
        if len(h) != width or len(r) != width:
            raise ValueError("label vectors have inconsistent lengths")
    per_class = []
    for c in range(width):
        tp = fp = fn = 0
        for h, r in zip(hyp_labels, ref_labels):
            hp = h[c] == PRESENT
            rp = r[c] == PRESENT
            tp += hp and rp
            fp += hp and not rp
            fn += rp and not hp
        denom = 2 * tp + fp + fn
        per_class.append(2 * tp / denom if denom else 0.0)
    return sum(per_class) / width


# ---------------------------------------------------------------------------
# text-overlap metrics

def _ngram_counts(tokens, n: int) -> dict:
    counts: dict = {}
    for i in range(len(tokens) - n + 1):
        key = tuple(tokens[i : i + n])
        counts[key] = counts.get(key, 0) + 1
    return counts


def bleu4(hyp_tokens, ref_tokens) -> float:
    """BLEU with modified n-gram precisions (n=1..4) and brevity penalty.

    The geometric mean runs over the orders at least one side can form, so
    identical sentences score 1.0 regardless of length. At an included
    order, zero clipped matches contribute an epsilon (1e-9) numerator; an
    order only the reference can form contributes a bare epsilon.
    """
    hyp = list(hyp_tokens)
    ref = list(ref_tokens)
    if not hyp:
        return 0.0
    log_precisions = []
    for n in range(1, 5):
        total = max(len(hyp) - n + 1, 0)
        if total == 0:
            if len(ref) - n + 1 <= 0:
                continue  # neither side forms n-grams: order unattainable
            log_precisions.append(math.log(BLEU_EPS))
            continue
        hyp_counts = _ngram_counts(hyp, n)
        ref_counts = _ngram_counts(ref, n)
        clipped = sum(min(c, ref_counts.get(g, 0)) for g, c in hyp_counts.items())
        log_precisions.append(math.log((clipped or BLEU_EPS) / total))
    brevity = math.exp(min(0.0, 1.0 - len(ref) / len(hyp)))
    return brevity * math.exp(sum(log_precisions) / len(log_precisions))


def _lcs_length(a: list, b: list) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(hyp_tokens, ref_tokens) -> float:
    """LCS-based F1; zero when either side is empty or nothing aligns."""
    hyp = list(hyp_tokens)
    ref = list(ref_tokens)
    if not hyp or not ref:
        return 0.0
    lcs = _lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(hyp)
    recall = lcs / len(ref)
    return 2.0 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# per-study scoring and report emission

SCORE_COLUMNS = (
    "findings_er_f1",
    "findings_bleu4",
    "findings_rouge_l",
    "impression_er_f1",
    "impression_bleu4",
    "impression_rouge_l",
    "label_f1",
    "wellformed",
)


def score_study(study_id: str, hyp: TextSections, ref: TextSections,
                catalog: ConditionCatalog, wellformed: bool = True) -> dict:
    """One score row; sections the reference lacks are None (not applicable)."""
    row: dict = {"study_id": study_id}
    for section in ("findings", "impression"):
        ref_text = getattr(ref, section)
        hyp_text = getattr(hyp, section)
        if ref_text is None:
            row[f"{section}_er_f1"] = None
            row[f"{section}_bleu4"] = None
            row[f"{section}_rouge_l"] = None
            continue
        row[f"{section}_er_f1"] = section_er_f1(hyp_text, ref_text, catalog)
        hyp_tok = normalize(hyp_text).split(" ") if hyp_text else []
        ref_tok = normalize(ref_text).split(" ")
        row[f"{section}_bleu4"] = bleu4(hyp_tok, ref_tok)
        row[f"{section}_rouge_l"] = rouge_l(hyp_tok, ref_tok)
    hyp_labels = labels_from_texts([hyp.findings, hyp.impression], catalog)
    ref_labels = labels_from_texts([ref.findings, ref.impression], catalog)
    row["label_f1"] = label_macro_f1([hyp_labels], [ref_labels])
    row["wellformed"] = 1.0 if wellformed else 0.0
    return row


def aggregate_rows(rows: list) -> dict:
    """Column means over applicable (non-None) entries."""
    agg: dict = {"study_id": "aggregate"}
    for col in SCORE_COLUMNS:
        values = [r[col] for r in rows if r.get(col) is not None]
        agg[col] = sum(values) / len(values) if values else None
    return agg


def write_score_report(rows: list, csv_path, jsonl_path) -> dict:
    """Emit per-study rows plus an aggregate row as CSV and JSON lines."""
    aggregate = aggregate_rows(rows)
    all_rows = rows + [aggregate]
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("study_id",) + SCORE_COLUMNS)
        for row in all_rows:
            writer.writerow(
                [row["study_id"]]
                + [("NA" if row[c] is None else repr(float(row[c]))) for c in SCORE_COLUMNS]
            )
    with open(jsonl_path, "w", encoding="utf-8") as fh:
        for row in all_rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return aggregate
