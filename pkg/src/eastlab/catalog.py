"""Closed sentence grammar for synthetic sectioned reports.

Each mentioned condition renders as one findings sentence whose attribute is
signalled by a cue word: "no" -> absent, "possible" -> uncertain, bare
mention -> present. An optional location renders as "in the <loc> zone" and
always follows its condition within the sentence, so a single-pass reader
can link each location to the nearest preceding condition. The impression
summarizes the conditions whose attribute is present. Sentences end with the
period token, which doubles as the sentence boundary for extraction.

The grammar is exactly invertible: rendering a (condition, attribute,
location) triple and extracting it back recovers the triple, for every
template in every pool.
"""

from __future__ import annotations

from dataclasses import dataclass

from .vocab import RESERVED, Vocabulary

PRESENT = "present"
ABSENT = "absent"
UNCERTAIN = "uncertain"
UNMENTIONED = "unmentioned"

ATTRIBUTES = (PRESENT, ABSENT, UNCERTAIN)
LABEL_CLASSES = (UNMENTIONED, PRESENT, ABSENT, UNCERTAIN)

NEGATION_CUE = "no"
UNCERTAINTY_CUE = "possible"
PERIOD = "."

CONDITIONS = (
    "cardiomegaly",
    "effusion",
    "edema",
    "pneumonia",
    "atelectasis",
    "pneumothorax",
    "consolidation",
    "opacity",
    "fracture",
    "emphysema",
    "fibrosis",
    "nodule",
)

LOCATIONS = ("left", "right", "upper", "lower", "central", "bilateral")

# findings templates; {c} = condition, {l} = "in the <loc> zone" or ""
_FINDINGS_TEMPLATES = {
    PRESENT: (
        "there is {c}{l} .",
        "{c} is seen{l} .",
    ),
    ABSENT: ("no {c} is seen{l} .",),
    UNCERTAIN: ("possible {c} is noted{l} .",),
}

_EMPTY_FINDINGS = "no acute findings ."
_IMPRESSION_TEMPLATE = "{c} remains ."
_EMPTY_IMPRESSION = "no acute abnormality ."

_FILLER_WORDS = (
    "there", "is", "in", "the", "zone", "seen", "noted", "remains",
    "acute", "findings", "abnormality", NEGATION_CUE, UNCERTAINTY_CUE, PERIOD,
)


@dataclass(frozen=True)
class Mention:
    """One latent fact: a condition with its attribute and optional location."""

    condition: str
    attribute: str
    location: str | None = None


class ConditionCatalog:
    """The condition/location inventory plus renderers for both sections."""

    def __init__(self, conditions=CONDITIONS, locations=LOCATIONS):
        self.conditions = tuple(conditions)
        self.locations = tuple(locations)
        if len(set(self.conditions)) != len(self.conditions):
            raise ValueError("duplicate condition names")
        if set(self.conditions) & set(self.locations):
            raise ValueError("condition and location word sets must be disjoint")
        # every condition admits all three attributes; the unlocated form is
        # always allowed, so the location draw is uniform over (None + all)
        self.allowed_attributes = {c: ATTRIBUTES for c in self.conditions}
        self.allowed_locations = {c: (None,) + self.locations for c in self.conditions}
        self.num_conditions = len(self.conditions)
        self.condition_index = {c: i for i, c in enumerate(self.conditions)}

    # ----- rendering -------------------------------------------------------

    def template_pool(self, attribute: str) -> tuple[str, ...]:
        return _FINDINGS_TEMPLATES[attribute]

    def render_finding(self, mention: Mention, template_index: int = 0) -> str:
        pool = self.template_pool(mention.attribute)
        template = pool[template_index % len(pool)]
        loc = f" in the {mention.location} zone" if mention.location else ""
        return template.format(c=mention.condition, l=loc)

    def render_findings(self, mentions, template_indices=None) -> str:
        """One sentence per mention, in the given order; fixed text if empty."""
        mentions = list(mentions)
        if not mentions:
            return _EMPTY_FINDINGS
        if template_indices is None:
            template_indices = [0] * len(mentions)
        return " ".join(
            self.render_finding(m, ti) for m, ti in zip(mentions, template_indices)
        )

    def render_impression(self, mentions) -> str:
        """Deterministic summary: one sentence per present condition, catalog order."""
        present = [m.condition for m in mentions if m.attribute == PRESENT]
        present.sort(key=self.condition_index.__getitem__)
        if not present:
            return _EMPTY_IMPRESSION
        return " ".join(_IMPRESSION_TEMPLATE.format(c=c) for c in present)

    # ----- vocabulary closure ----------------------------------------------

    def all_words(self) -> tuple[str, ...]:
        """Every non-reserved word any renderer can emit, in a fixed order."""
        words = list(self.conditions) + list(self.locations)
        for w in _FILLER_WORDS:
            if w not in words:
                words.append(w)
        return tuple(words)

    def build_vocabulary(self) -> Vocabulary:
        return Vocabulary(RESERVED + self.all_words())


def default_catalog() -> ConditionCatalog:
    return ConditionCatalog()
