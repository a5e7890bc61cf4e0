"""Fixed whole-word vocabulary, control tokens, and two-section sequence layout.

Target sequences are laid out as [BOS] F* [SEP] I* [EOS], where F* is the
findings body or the single token [NF] (no findings) and I* is the impression
body or the single token [NI] (no impression). The language is closed, so a
whitespace tokenizer over whole words is exact.

Vocabulary file format (version 1): plain text, one token per line, line
number = token id, nothing else. Line 0 must be the pad token and lines 1-5
the control tokens in the order below.
"""

from __future__ import annotations

from dataclasses import dataclass

VOCAB_FILE_VERSION = 1

PAD_TOKEN = "[PAD]"
BOS_TOKEN = "[BOS]"
EOS_TOKEN = "[EOS]"
SEP_TOKEN = "[SEP]"
NF_TOKEN = "[NF]"
NI_TOKEN = "[NI]"

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
SEP_ID = 3
NF_ID = 4
NI_ID = 5

CONTROL_TOKENS = (BOS_TOKEN, EOS_TOKEN, SEP_TOKEN, NF_TOKEN, NI_TOKEN)
CONTROL_IDS = frozenset((BOS_ID, EOS_ID, SEP_ID, NF_ID, NI_ID))
RESERVED = (PAD_TOKEN,) + CONTROL_TOKENS

# source-type channels for additive type embeddings
SOURCE_IMAGE = 0
SOURCE_FINDINGS = 1
SOURCE_IMPRESSION = 2

MAX_TARGET_LEN = 512


class OutOfVocabularyError(KeyError):
    pass


def normalize(text: str) -> str:
    """Collapse all whitespace runs to single spaces and strip the ends."""
    return " ".join(text.split())


class Vocabulary:
    """Immutable token<->id bijection with the reserved layout above."""

    def __init__(self, tokens):
        tokens = tuple(tokens)
        if len(tokens) < len(RESERVED):
            raise ValueError(f"vocabulary needs at least {len(RESERVED)} tokens")
        if tokens[: len(RESERVED)] != RESERVED:
            raise ValueError(
                f"tokens 0..{len(RESERVED) - 1} must be {RESERVED}, got {tokens[:len(RESERVED)]}"
            )
        if len(set(tokens)) != len(tokens):
            seen = set()
            dup = next(t for t in tokens if t in seen or seen.add(t))
            raise ValueError(f"duplicate token {dup!r}")
        self._tokens = tokens
        self._ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._tokens

    def id_of(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise OutOfVocabularyError(f"token {token!r} is not in the vocabulary") from None

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self._tokens):
            raise OutOfVocabularyError(f"id {idx} outside vocabulary of size {len(self._tokens)}")
        return self._tokens[idx]

    def encode(self, text: str) -> list[int]:
        return [self.id_of(t) for t in normalize(text).split(" ") if t]

    def decode(self, ids) -> str:
        return " ".join(self.token_of(int(i)) for i in ids)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for token in self._tokens:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        while tokens and tokens[-1] == "":
            tokens.pop()
        return cls(tokens)


MISSING = None  # a missing section is represented by None


@dataclass
class SectionedReport:
    """Token-id bodies of the two sections; None marks a missing section."""

    findings: list[int] | None
    impression: list[int] | None
    wellformed: bool = True

    @property
    def sections(self) -> tuple[list[int] | None, list[int] | None]:
        return (self.findings, self.impression)


@dataclass
class TargetSequence:
    ids: list[int]
    section_type_ids: list[int]
    truncated: bool = False

    def __post_init__(self):
        if len(self.ids) != len(self.section_type_ids):
            raise ValueError("ids and section_type_ids lengths differ")
        if len(self.ids) > MAX_TARGET_LEN:
            raise ValueError(f"target length {len(self.ids)} exceeds {MAX_TARGET_LEN}")

    def __len__(self) -> int:
        return len(self.ids)


def _check_body(name: str, body: list[int] | None) -> None:
    if body is None:
        return
    if len(body) == 0:
        raise ValueError(f"{name} section is present but empty; use None for a missing section")
    bad = [i for i in body if i in CONTROL_IDS or i == PAD_ID]
    if bad:
        raise ValueError(f"{name} section contains control/pad ids {bad}")


def assemble_target(report: SectionedReport, max_len: int = MAX_TARGET_LEN) -> TargetSequence:
    """Build [BOS] F* [SEP] I* [EOS] with section types, truncating if needed.

    Over-length sequences lose body tokens from the right, impression first
    (findings carries more reward weight), each body keeping at least one
    token; the result is flagged truncated.
    """
    _check_body("findings", report.findings)
    _check_body("impression", report.impression)
    findings = list(report.findings) if report.findings is not None else [NF_ID]
    impression = list(report.impression) if report.impression is not None else [NI_ID]

    overhead = 3  # [BOS], [SEP], [EOS]
    truncated = False
    budget = max_len - overhead
    if budget < 2:
        raise ValueError(f"max_len {max_len} cannot hold two sections plus layout tokens")
    if len(findings) + len(impression) > budget:
        truncated = True
        impression = impression[: max(1, budget - len(findings))]
        if len(findings) + len(impression) > budget:
            findings = findings[: budget - len(impression)]

    ids = [BOS_ID] + findings + [SEP_ID] + impression + [EOS_ID]
    types = (
        [SOURCE_FINDINGS] * (1 + len(findings))
        + [SOURCE_IMPRESSION] * (1 + len(impression) + 1)
    )
    return TargetSequence(ids=ids, section_type_ids=types, truncated=truncated)


def section_type_ids_for(ids) -> list[int]:
    """Assign FINDINGS to positions before the first [SEP], IMPRESSION from it on."""
    types = []
    seen_sep = False
    for i in ids:
        if int(i) == SEP_ID:
            seen_sep = True
        types.append(SOURCE_IMPRESSION if seen_sep else SOURCE_FINDINGS)
    return types


def _clean_body(span: list[int], missing_marker: int) -> tuple[list[int] | None, bool]:
    """Interpret a raw section span; returns (body-or-None, span_wellformed)."""
    if span == [missing_marker]:
        return None, True
    body = [i for i in span if i not in CONTROL_IDS and i != PAD_ID]
    clean = len(body) == len(span)
    if not body:
        return None, False
    return body, clean


def split_sections(ids) -> SectionedReport:
    """Parse arbitrary model output into sections (total; never raises).

    Wellformed output is exactly [BOS] F* [SEP] I* [EOS]. Fallbacks: a
    missing [BOS] starts the findings span at position 0; the first [SEP]
    governs; a missing [SEP] makes everything findings and the impression
    MISSING; a missing [EOS] lets the sequence end act as [EOS]; stray
    control tokens are dropped from bodies; an empty span is MISSING. Any
    fallback clears the wellformed flag.
    """
    seq = [int(i) for i in ids]
    wellformed = True

    if seq and seq[0] == BOS_ID:
        start = 1
    else:
        start = 0
        wellformed = False

    if EOS_ID in seq[start:]:
        end = seq.index(EOS_ID, start)
        if end != len(seq) - 1:
            wellformed = False  # trailing tokens after [EOS]
    else:
        end = len(seq)
        wellformed = False

    body = seq[start:end]
    if SEP_ID in body:
        cut = body.index(SEP_ID)
        f_span, i_span = body[:cut], body[cut + 1 :]
        if SEP_ID in i_span:
            wellformed = False  # extra separators; first one governs
        f_body, f_ok = _clean_body(f_span, NF_ID)
        i_body, i_ok = _clean_body(i_span, NI_ID)
        wellformed = wellformed and f_ok and i_ok
        return SectionedReport(f_body, i_body, wellformed)

    f_body, f_ok = _clean_body(body, NF_ID)
    return SectionedReport(f_body, None, False)
