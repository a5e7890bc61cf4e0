"""Command-line pipeline: corpus generation, training, evaluation, generation.

One executable with four subcommands sharing config resolution and run
manifests:

    eastlab gen-data  --out DIR [--config FILE] [--seed N ...]
    eastlab train     --stage tf|scst|east --corpus PATH --out DIR [...]
    eastlab evaluate  --checkpoint CKPT --corpus PATH --out DIR [...]
    eastlab generate  --checkpoint CKPT --study FILE [--section MODE ...]

Config precedence is defaults < JSON config file < command-line flags.
Every command that writes an output directory leaves exactly one
``manifest.json`` there recording the resolved config, seeds, input hashes,
and timing, so a run can be reproduced from its manifest alone.

Exit codes: 0 success, 1 run failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .catalog import default_catalog
from .corpus import (
    CorpusFormatError,
    CorpusSplit,
    GenConfig,
    generate_corpus,
    read_corpus,
    write_corpus,
)
from .decoding import beam_search, constraints_for_section, prompt_values
from .model import (
    CheckpointError,
    ModelConfig,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .rewards import (
    label_macro_f1,
    labels_from_texts,
    write_score_report,
    score_study,
)
from .tensor import NonFiniteError
from .training import (
    EventLog,
    TrainConfig,
    TrainingError,
    reference_sections,
    rl_train,
    sections_to_text,
    tf_train,
)
from .vocab import EOS_ID, NI_ID, SEP_ID, split_sections

SPLIT_NAMES = ("train", "validation", "test")


class UsageError(ValueError):
    """Bad invocation or bad config: reported with exit status 2."""


# ---------------------------------------------------------------------------
# config resolution and manifests


def _load_config_file(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return data


def resolve_config(defaults: dict, config_path, flag_values: dict,
                   context: str) -> dict:
    """defaults < config file < flags; unknown keys are usage errors."""
    resolved = dict(defaults)
    if config_path is not None:
        for key, value in _load_config_file(config_path).items():
            if key not in defaults:
                raise UsageError(f"unknown {context} config key {key!r}")
            resolved[key] = value
    for key, value in flag_values.items():
        if value is not None:
            if key not in defaults:
                raise UsageError(f"unknown {context} config key {key!r}")
            resolved[key] = value
    return resolved


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def corpus_hash(paths) -> str:
    """Order-independent digest over named corpus files."""
    digest = hashlib.sha256()
    for path in sorted(Path(p) for p in paths):
        digest.update(path.name.encode("utf-8"))
        digest.update(bytes.fromhex(file_sha256(path)))
    return digest.hexdigest()


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    corpus_hash: str | None
    checkpoint_hashes: dict
    tool_version: str
    timing: dict

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        payload = dataclasses.asdict(self)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
        return path


def prepare_out_dir(out) -> Path:
    """Create the output directory; refuse one that already has a manifest."""
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if (out_dir / "manifest.json").exists():
        raise UsageError(
            f"output directory {out_dir} already contains a run manifest; "
            "use a fresh directory"
        )
    return out_dir


def started_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# corpus loading


def load_corpus_arg(path) -> tuple[CorpusSplit, str]:
    """Read a corpus file, or a directory of per-split files, plus its hash."""
    root = Path(path)
    if root.is_dir():
        files = [root / f"{name}.jsonl" for name in SPLIT_NAMES
                 if (root / f"{name}.jsonl").exists()]
        if not files:
            raise UsageError(
                f"{root} contains none of train.jsonl/validation.jsonl/test.jsonl"
            )
        merged = CorpusSplit()
        for file in files:
            part = read_corpus(file)
            merged.train.extend(part.train)
            merged.validation.extend(part.validation)
            merged.test.extend(part.test)
            merged.seed = part.seed
            merged.generator_version = part.generator_version
        return merged, corpus_hash(files)
    if not root.exists():
        raise UsageError(f"corpus path {root} does not exist")
    return read_corpus(root), corpus_hash([root])


def require_split(corpus: CorpusSplit, name: str):
    studies = corpus.split(name)
    if not studies:
        raise UsageError(f"corpus has an empty {name!r} split")
    return studies


def check_compat(params, studies, vocab) -> None:
    """Reject checkpoint/corpus shape disagreements with both manifests."""
    config = params.config
    image = studies[0].images[0]
    problems = []
    if image.shape != (config.patches, config.feature_dim):
        problems.append(
            f"model expects images of shape {(config.patches, config.feature_dim)}, "
            f"corpus provides {tuple(image.shape)}"
        )
    if config.vocab_size != len(vocab):
        problems.append(
            f"model vocab_size={config.vocab_size}, tokenizer has {len(vocab)} tokens"
        )
    if problems:
        raise UsageError(
            "checkpoint/corpus mismatch: " + "; ".join(problems)
            + f"; checkpoint tensor manifest: {json.dumps(params.manifest())}"
        )


# ---------------------------------------------------------------------------
# gen-data


def add_gen_data_parser(subparsers) -> None:
    p = subparsers.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON config file (keys mirror the flags)")
    p.add_argument("--seed", type=int)
    p.add_argument("--train-size", type=int, dest="train_size")
    p.add_argument("--validation-size", type=int, dest="validation_size")
    p.add_argument("--test-size", type=int, dest="test_size")
    p.add_argument("--p-mention", type=float, dest="p_mention")
    p.add_argument("--p-nf", type=float, dest="p_nf")
    p.add_argument("--p-ni", type=float, dest="p_ni")
    p.add_argument("--noise-sigma", type=float, dest="noise_sigma")
    p.add_argument("--patches-per-side", type=int, dest="patches_per_side")
    p.add_argument("--feature-dim", type=int, dest="feature_dim")
    p.add_argument("--max-images", type=int, dest="max_images")
    p.set_defaults(handler=cmd_gen_data)


def cmd_gen_data(args) -> int:
    t0 = time.monotonic()
    started = started_now()
    defaults = dataclasses.asdict(GenConfig())
    flags = {key: getattr(args, key, None) for key in defaults}
    resolved = resolve_config(defaults, args.config, flags, "generation")
    catalog = default_catalog()
    try:
        config = GenConfig(**resolved)
        config.validate(catalog)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc

    out_dir = prepare_out_dir(args.out)
    corpus = generate_corpus(config, catalog)
    files = []
    for name in SPLIT_NAMES:
        single = CorpusSplit(seed=corpus.seed,
                             generator_version=corpus.generator_version)
        setattr(single, name, corpus.split(name))
        path = out_dir / f"{name}.jsonl"
        write_corpus(single, path)
        files.append(path)

    RunManifest(
        command="gen-data",
        config=resolved,
        seeds={"seed": config.seed},
        corpus_hash=corpus_hash(files),
        checkpoint_hashes={},
        tool_version=__version__,
        timing={"started_utc": started,
                "elapsed_seconds": round(time.monotonic() - t0, 3)},
    ).write(out_dir)
    counts = corpus.counts
    print(f"wrote {counts['train']}/{counts['validation']}/{counts['test']} "
          f"studies to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# train


TRAIN_FLAG_KEYS = (
    "lr", "batch_size", "epochs", "entropy_weight", "entropy_sign", "top_k",
    "validation_events", "seed", "max_new_tokens",
)


def add_train_parser(subparsers) -> None:
    p = subparsers.add_parser("train", help="run one training stage")
    p.add_argument("--stage", required=True, choices=("tf", "scst", "east"))
    p.add_argument("--corpus", required=True,
                   help="corpus file or gen-data output directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--init", help="initial checkpoint (required for scst/east)")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--entropy-weight", type=float, dest="entropy_weight")
    p.add_argument("--entropy-sign", choices=("bonus", "penalty"),
                   dest="entropy_sign")
    p.add_argument("--top-k", type=int, dest="top_k")
    p.add_argument("--validation-events", type=int, dest="validation_events")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-new-tokens", type=int, dest="max_new_tokens")
    p.add_argument("--no-freeze-encoder", action="store_true",
                   help="fine-tune the image encoder as well (scst/east)")
    p.set_defaults(handler=cmd_train)


def cmd_train(args) -> int:
    t0 = time.monotonic()
    started = started_now()

    defaults = {f.name: getattr(TrainConfig(stage=args.stage), f.name)
                for f in dataclasses.fields(TrainConfig)}
    defaults["model"] = {}
    flags = {key: getattr(args, key) for key in TRAIN_FLAG_KEYS}
    flags["stage"] = args.stage
    if args.no_freeze_encoder:
        flags["freeze_encoder"] = False
    resolved = resolve_config(defaults, args.config, flags, "training")
    model_overrides = resolved.pop("model")
    try:
        config = TrainConfig(**resolved)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc

    is_rl = config.is_rl
    if is_rl and not args.init:
        raise UsageError(
            f"stage {config.stage!r} fine-tunes an existing model: "
            "pass --init with a likelihood-stage checkpoint"
        )
    if args.init and model_overrides:
        raise UsageError(
            "model config comes from the --init checkpoint; "
            "drop the 'model' section"
        )

    catalog = default_catalog()
    vocab = catalog.build_vocabulary()
    corpus, data_hash = load_corpus_arg(args.corpus)
    train_studies = require_split(corpus, "train")
    val_studies = require_split(corpus, "validation")

    checkpoint_hashes = {}
    if args.init:
        if not Path(args.init).exists():
            raise UsageError(f"init checkpoint {args.init} does not exist")
        params = load_checkpoint(args.init)
        checkpoint_hashes["init"] = file_sha256(args.init)
    else:
        if "vocab_size" in model_overrides:
            raise UsageError(
                "model.vocab_size is fixed by the token catalog; remove it"
            )
        desk = ModelConfig(vocab_size=len(vocab))
        model_defaults = {f.name: getattr(desk, f.name)
                          for f in dataclasses.fields(ModelConfig)}
        model_resolved = resolve_config(
            model_defaults, None, model_overrides, "model")
        try:
            model_config = ModelConfig(**model_resolved)
        except (TypeError, ValueError) as exc:
            raise UsageError(str(exc)) from exc
        params = init_params(model_config, seed=config.seed)
    check_compat(params, train_studies, vocab)

    out_dir = prepare_out_dir(args.out)
    checkpoint_path = out_dir / "model.ckpt"
    event_log = EventLog(out_dir / "events.jsonl")
    try:
        if is_rl:
            best, trace = rl_train(
                params, train_studies, val_studies, vocab, catalog, config,
                event_log=event_log, checkpoint_path=checkpoint_path,
            )
            monitor = max(t["label_macro_f1"] for t in trace)
            summary = f"best validation label macro F1 {monitor:.4f}"
        else:
            best, trace = tf_train(
                params, train_studies, val_studies, vocab, config,
                event_log=event_log, checkpoint_path=checkpoint_path,
            )
            summary = f"best validation loss {min(trace):.4f}"
    finally:
        event_log.close()
    if not checkpoint_path.exists():  # no improving event fired
        save_checkpoint(best, checkpoint_path)
    checkpoint_hashes["best"] = file_sha256(checkpoint_path)

    manifest_config = dict(resolved)
    manifest_config["model"] = {
        f.name: getattr(best.config, f.name)
        for f in dataclasses.fields(ModelConfig)
    }
    RunManifest(
        command="train",
        config=manifest_config,
        seeds={"seed": config.seed},
        corpus_hash=data_hash,
        checkpoint_hashes=checkpoint_hashes,
        tool_version=__version__,
        timing={"started_utc": started,
                "elapsed_seconds": round(time.monotonic() - t0, 3)},
    ).write(out_dir)
    print(f"stage {config.stage}: {summary}; checkpoint at {checkpoint_path}")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def add_evaluate_parser(subparsers) -> None:
    p = subparsers.add_parser("evaluate", help="score a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True,
                   help="corpus file or gen-data output directory")
    p.add_argument("--split", choices=SPLIT_NAMES, default="test")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--beam-width", type=int, default=4, dest="beam_width")
    p.add_argument("--max-new-tokens", type=int, dest="max_new_tokens",
                   help="decode budget (default: the model's own cap)")
    p.set_defaults(handler=cmd_evaluate)


def decode_study_sections(params, study, vocab, constraints, beam_width):
    prompt, _ = prompt_values(params, study.images)
    result = beam_search(params, prompt, constraints, beam_width)
    report = split_sections(result.ids)
    return sections_to_text(report, vocab), report.wellformed


def cmd_evaluate(args) -> int:
    t0 = time.monotonic()
    started = started_now()
    if args.beam_width < 1:
        raise UsageError("beam width must be >= 1")
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint {args.checkpoint} does not exist")

    catalog = default_catalog()
    vocab = catalog.build_vocabulary()
    params = load_checkpoint(args.checkpoint)
    corpus, data_hash = load_corpus_arg(args.corpus)
    studies = require_split(corpus, args.split)
    check_compat(params, studies, vocab)

    max_new = args.max_new_tokens or params.config.max_new_tokens
    if not 2 <= max_new <= params.config.max_new_tokens:
        raise UsageError(
            f"max-new-tokens must be in [2, {params.config.max_new_tokens}]"
        )
    constraints = constraints_for_section("both", max_new_tokens=max_new)

    out_dir = prepare_out_dir(args.out)
    rows = []
    hyp_labels = []
    ref_labels = []
    for study in studies:
        hyp, wellformed = decode_study_sections(
            params, study, vocab, constraints, args.beam_width)
        ref = reference_sections(study)
        rows.append(score_study(study.study_id, hyp, ref, catalog,
                                wellformed=wellformed))
        hyp_labels.append(labels_from_texts([hyp.findings, hyp.impression],
                                            catalog))
        ref_labels.append(tuple(study.labels))

    aggregate = write_score_report(rows, out_dir / "scores.csv",
                                   out_dir / "scores.jsonl")
    summary = {
        "split": args.split,
        "count": len(rows),
        "beam_width": args.beam_width,
        "max_new_tokens": max_new,
        "aggregate": aggregate,
        "label_macro_f1": label_macro_f1(hyp_labels, ref_labels),
    }
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    resolved = {"split": args.split, "beam_width": args.beam_width,
                "max_new_tokens": max_new}
    RunManifest(
        command="evaluate",
        config=resolved,
        seeds={},
        corpus_hash=data_hash,
        checkpoint_hashes={"checkpoint": file_sha256(args.checkpoint)},
        tool_version=__version__,
        timing={"started_utc": started,
                "elapsed_seconds": round(time.monotonic() - t0, 3)},
    ).write(out_dir)
    print(json.dumps(summary, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# generate


def add_generate_parser(subparsers) -> None:
    p = subparsers.add_parser("generate",
                              help="decode one study with section control")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--study", required=True, help="corpus-format study file")
    p.add_argument("--study-id", dest="study_id",
                   help="pick one study when the file holds several")
    p.add_argument("--section", choices=("both", "findings", "impression"),
                   default="both")
    p.add_argument("--beam-width", type=int, default=4, dest="beam_width")
    p.add_argument("--max-new-tokens", type=int, dest="max_new_tokens")
    p.add_argument("--out", help="optional output directory")
    p.set_defaults(handler=cmd_generate)


def pick_study(corpus: CorpusSplit, study_id):
    studies = corpus.train + corpus.validation + corpus.test
    if not studies:
        raise UsageError("study file holds no study records")
    if study_id is None:
        if len(studies) > 1:
            raise UsageError(
                f"study file holds {len(studies)} records; pass --study-id"
            )
        return studies[0]
    for study in studies:
        if study.study_id == study_id:
            return study
    raise UsageError(f"study id {study_id!r} not found in the study file")


def cmd_generate(args) -> int:
    t0 = time.monotonic()
    started = started_now()
    if args.beam_width < 1:
        raise UsageError("beam width must be >= 1")
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint {args.checkpoint} does not exist")
    if not Path(args.study).exists():
        raise UsageError(f"study file {args.study} does not exist")

    catalog = default_catalog()
    vocab = catalog.build_vocabulary()
    params = load_checkpoint(args.checkpoint)
    corpus = read_corpus(args.study)
    study = pick_study(corpus, args.study_id)
    check_compat(params, [study], vocab)

    max_new = args.max_new_tokens or params.config.max_new_tokens
    if not 2 <= max_new <= params.config.max_new_tokens:
        raise UsageError(
            f"max-new-tokens must be in [2, {params.config.max_new_tokens}]"
        )
    constraints = constraints_for_section(args.section, max_new_tokens=max_new)

    prompt, _ = prompt_values(params, study.images)
    result = beam_search(params, prompt, constraints, args.beam_width)
    ids = list(result.ids)
    if args.section == "findings" and ids and ids[-1] == SEP_ID:
        # close the layout: the impression slot is explicitly marked empty
        ids.extend([NI_ID, EOS_ID])
    report = split_sections(ids)
    texts = sections_to_text(report, vocab)

    payload = {
        "study_id": study.study_id,
        "section": args.section,
        "findings": texts.findings,
        "impression": texts.impression,
        "wellformed": report.wellformed,
        "token_count": len(ids),
    }
    print(json.dumps(payload, sort_keys=True))

    if args.out:
        out_dir = prepare_out_dir(args.out)
        (out_dir / "generation.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
        RunManifest(
            command="generate",
            config={"section": args.section, "beam_width": args.beam_width,
                    "max_new_tokens": max_new, "study_id": study.study_id},
            seeds={},
            corpus_hash=corpus_hash([args.study]),
            checkpoint_hashes={"checkpoint": file_sha256(args.checkpoint)},
            tool_version=__version__,
            timing={"started_utc": started,
                    "elapsed_seconds": round(time.monotonic() - t0, 3)},
        ).write(out_dir)
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eastlab",
        description="Synthetic sectioned-report lab: data, training, scoring.",
    )
    parser.add_argument("--version", action="version",
                        version=f"eastlab {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    add_gen_data_parser(subparsers)
    add_train_parser(subparsers)
    add_evaluate_parser(subparsers)
    add_generate_parser(subparsers)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports its own message
        return 0 if exc.code in (0, None) else 2
    try:
        return args.handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, CorpusFormatError, CheckpointError, NonFiniteError,
            OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
