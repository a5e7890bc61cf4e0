"""Deterministic synthetic study generator and corpus file I/O.

Each study holds latent per-condition labels, K patch-feature grids encoding
those labels linearly (plus Gaussian noise), and grammar-rendered section
texts. Generation is driven by spawned children of one root seed sequence,
one independent stream per study, so identical (seed, version, sizes)
reproduce byte-identical corpora and studies can be generated in parallel.

Corpus file format (schema version 1): JSON lines. Line 1 is a header
object {schema_version, seed, generator_version, counts}; every following
line is one study {split, study_id, labels, findings_text, impression_text,
images}. Feature values are quantized to 4 decimals at generation time so
their JSON float representation is short and round-trips exactly.
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field

import numpy as np

from .catalog import (
    ABSENT,
    LABEL_CLASSES,
    PRESENT,
    UNCERTAIN,
    UNMENTIONED,
    ConditionCatalog,
    Mention,
    default_catalog,
)

SCHEMA_VERSION = 1
GENERATOR_VERSION = "1"

# scalar code per label class, used by the linear image encoding; adjacent
# codes are 1.0 apart so a pooled linear probe separates them easily at the
# default noise scale
LABEL_CODES = {UNMENTIONED: 0.0, PRESENT: 1.0, ABSENT: -1.0, UNCERTAIN: 2.0}

_ENCODING_SEED = 0xEA57C0DE

# image-count distribution for max_images=8: most studies have 1-2 views,
# one in ten has more than the model's 5-image cap
_IMAGE_COUNT_WEIGHTS = (0.35, 0.35, 0.10, 0.05, 0.05, 0.04, 0.03, 0.03)


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    train_size: int = 20000
    validation_size: int = 2000
    test_size: int = 2000
    p_mention: float = 0.35
    p_nf: float = 0.10
    p_ni: float = 0.15
    noise_sigma: float = 0.10
    patches_per_side: int = 4
    feature_dim: int = 16
    max_images: int = 8

    def validate(self, catalog: ConditionCatalog) -> None:
        for name in ("p_mention", "p_nf", "p_ni"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.p_nf + self.p_ni > 1.0:
            raise ValueError("p_nf + p_ni must not exceed 1 (sections are never both missing)")
        if catalog.num_conditions < 2:
            raise ValueError("catalog needs at least 2 conditions")
        for name in ("train_size", "validation_size", "test_size"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if min(self.patches_per_side, self.feature_dim, self.max_images) < 1:
            raise ValueError("patches_per_side, feature_dim, max_images must be >= 1")


@dataclass
class StudyRecord:
    study_id: str
    images: list  # K arrays of shape (patches, feature_dim), float64
    findings_text: str | None
    impression_text: str | None
    labels: tuple  # per-condition class names, length C

    def __eq__(self, other):
        return (
            isinstance(other, StudyRecord)
            and self.study_id == other.study_id
            and self.findings_text == other.findings_text
            and self.impression_text == other.impression_text
            and tuple(self.labels) == tuple(other.labels)
            and len(self.images) == len(other.images)
            and all(np.array_equal(a, b) for a, b in zip(self.images, other.images))
        )


@dataclass
class CorpusSplit:
    train: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    test: list = field(default_factory=list)
    seed: int = 0
    generator_version: str = GENERATOR_VERSION

    def split(self, name: str) -> list:
        if name not in ("train", "validation", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    @property
    def counts(self) -> dict:
        return {
            "train": len(self.train),
            "validation": len(self.validation),
            "test": len(self.test),
        }


@functools.lru_cache(maxsize=8)
def _encoding_matrices(patches: int, feature_dim: int, num_conditions: int):
    """Fixed linear maps shared by every corpus: grid[p] = (E + B[p]) @ codes.

    E has orthonormal columns when the feature dim allows, so mean-pooled
    grids recover the code vector by least squares; the per-patch offsets
    B[p] sum to zero over patches, leaving the pooled encoding exact.
    """
    rng = np.random.default_rng(_ENCODING_SEED)
    a = rng.standard_normal((feature_dim, num_conditions))
    if feature_dim >= num_conditions:
        e, _ = np.linalg.qr(a)
    else:
        e = a / np.sqrt(feature_dim)
    b = rng.standard_normal((patches, feature_dim, num_conditions)) * 0.25
    b -= b.mean(axis=0, keepdims=True)
    return e, b


def label_codes_vector(labels) -> np.ndarray:
    return np.array([LABEL_CODES[c] for c in labels], dtype=np.float64)


def encode_labels_to_grid(labels, rng, config: GenConfig) -> np.ndarray:
    """One image: deterministic linear encoding of the labels plus noise."""
    patches = config.patches_per_side**2
    e, b = _encoding_matrices(patches, config.feature_dim, len(labels))
    v = label_codes_vector(labels)
    grid = (e + b) @ v  # (patches, feature_dim, C) @ (C,) -> (patches, feature_dim)
    if config.noise_sigma > 0:
        grid = grid + rng.standard_normal(grid.shape) * config.noise_sigma
    return np.round(grid, 4)


def generate_study(rng, config: GenConfig, catalog: ConditionCatalog, study_id: str) -> StudyRecord:
    """Sample one study from an independent random stream."""
    labels = []
    mentions = []
    template_indices = []
    for cond in catalog.conditions:
        if rng.random() >= config.p_mention:
            labels.append(UNMENTIONED)
            continue
        attrs = catalog.allowed_attributes[cond]
        attribute = attrs[rng.integers(len(attrs))]
        locs = catalog.allowed_locations[cond]
        location = locs[rng.integers(len(locs))]
        labels.append(attribute)
        mentions.append(Mention(cond, attribute, location))
        template_indices.append(int(rng.integers(len(catalog.template_pool(attribute)))))

    findings_text = catalog.render_findings(mentions, template_indices)
    impression_text = catalog.render_impression(mentions)

    u = rng.random()
    if u < config.p_nf:
        findings_text = None
    elif u < config.p_nf + config.p_ni:
        impression_text = None

    if config.max_images == len(_IMAGE_COUNT_WEIGHTS):
        k = int(rng.choice(np.arange(1, config.max_images + 1), p=_IMAGE_COUNT_WEIGHTS))
    else:
        k = int(rng.integers(1, config.max_images + 1))
    images = [encode_labels_to_grid(labels, rng, config) for _ in range(k)]

    return StudyRecord(
        study_id=study_id,
        images=images,
        findings_text=findings_text,
        impression_text=impression_text,
        labels=tuple(labels),
    )


def generate_corpus(config: GenConfig, catalog: ConditionCatalog | None = None) -> CorpusSplit:
    catalog = catalog or default_catalog()
    config.validate(catalog)
    root = np.random.SeedSequence(config.seed)
    split_seeds = root.spawn(3)
    corpus = CorpusSplit(seed=config.seed)
    sizes = {
        "train": config.train_size,
        "validation": config.validation_size,
        "test": config.test_size,
    }
    for split_seed, (name, size) in zip(split_seeds, sizes.items()):
        streams = split_seed.spawn(size)
        studies = corpus.split(name)
        for i, stream in enumerate(streams):
            rng = np.random.default_rng(stream)
            studies.append(generate_study(rng, config, catalog, f"{name}-{i:06d}"))
    return corpus


# ---------------------------------------------------------------------------
# file I/O

class CorpusFormatError(ValueError):
    pass


def _study_to_json(split_name: str, study: StudyRecord) -> str:
    record = {
        "split": split_name,
        "study_id": study.study_id,
        "labels": list(study.labels),
        "findings_text": study.findings_text,
        "impression_text": study.impression_text,
        "images": [img.tolist() for img in study.images],
    }
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def _study_from_json(obj: dict, line_no: int) -> tuple[str, StudyRecord]:
    try:
        split_name = obj["split"]
        labels = tuple(obj["labels"])
        for c in labels:
            if c not in LABEL_CLASSES:
                raise CorpusFormatError(f"line {line_no}: unknown label class {c!r}")
        images = [np.asarray(img, dtype=np.float64) for img in obj["images"]]
        study = StudyRecord(
            study_id=obj["study_id"],
            images=images,
            findings_text=obj["findings_text"],
            impression_text=obj["impression_text"],
            labels=labels,
        )
    except KeyError as exc:
        raise CorpusFormatError(f"line {line_no}: missing field {exc.args[0]!r}") from None
    if split_name not in ("train", "validation", "test"):
        raise CorpusFormatError(f"line {line_no}: unknown split {split_name!r}")
    return split_name, study


def write_corpus(corpus: CorpusSplit, path) -> None:
    header = {
        "schema_version": SCHEMA_VERSION,
        "seed": corpus.seed,
        "generator_version": corpus.generator_version,
        "counts": corpus.counts,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for name in ("train", "validation", "test"):
            for study in corpus.split(name):
                fh.write(_study_to_json(name, study) + "\n")


def read_corpus(path) -> CorpusSplit:
    with open(path, encoding="utf-8") as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError:
            raise CorpusFormatError("line 1: malformed header") from None
        if not isinstance(header, dict) or "schema_version" not in header:
            raise CorpusFormatError("line 1: header missing schema_version")
        if header["schema_version"] != SCHEMA_VERSION:
            raise CorpusFormatError(
                f"schema_version {header['schema_version']} != supported {SCHEMA_VERSION}"
            )
        corpus = CorpusSplit(
            seed=header.get("seed", 0),
            generator_version=header.get("generator_version", "unknown"),
        )
        for line_no, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                raise CorpusFormatError(f"line {line_no}: malformed JSON") from None
            split_name, study = _study_from_json(obj, line_no)
            corpus.split(split_name).append(study)
    expected = header.get("counts")
    if expected is not None and expected != corpus.counts:
        raise CorpusFormatError(f"header counts {expected} != file contents {corpus.counts}")
    return corpus
