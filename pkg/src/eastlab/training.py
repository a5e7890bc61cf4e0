"""Two-stage training: likelihood pretraining, then reward-driven fine-tuning.

Stage one ("tf") teaches the report distribution by teacher forcing: the mean
negative log-likelihood of the next target token over every position in the
batch, minimized with AdamW.

Stage two ("scst"/"east") fine-tunes against the model's own greedy output:
for each study a report w_s is sampled with top-k sampling and a baseline
w_b is decoded greedily without gradients; with r the section-level
entity-relation reward, the per-study loss is

    L = -(r(w_s) - r(w_b)) * meanLogProb(w_s)

so sampled reports that beat the baseline are reinforced. The "east" stage
adds an entropy term over the sampler's full next-token distributions:
entropy_sign="bonus" subtracts entropy_weight * H from the minimized loss
(pushing the policy to keep entropy up, the default), "penalty" adds it
(the sign-flipped variant, kept for comparison studies).

During the fine-tuning epoch the validation split is decoded greedily at a
fixed number of evenly spaced points and scored with the label macro F1
monitor; the best-scoring parameters are restored at the end. The encoder is
frozen during fine-tuning by default: its states are computed outside the
gradient tape and only the projection and decoder receive updates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .catalog import ConditionCatalog
from .decoding import ModelStepper, constraints_for_section, decode_batch
from .model import (
    ModelParams,
    PromptBatch,
    encode_images,
    encode_one_image,
    encoder_states_numpy,
    log_prob_of,
    project_prompt,
    save_checkpoint,
    select_images,
)
from .rewards import TextSections, label_macro_f1, labels_from_texts, report_reward
from .vocab import (
    SOURCE_IMAGE,
    SectionedReport,
    TargetSequence,
    Vocabulary,
    assemble_target,
    split_sections,
)

STAGES = ("tf", "scst", "east")
ENTROPY_SIGNS = ("bonus", "penalty")
VALIDATION_DECODE_CHUNK = 64


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Stage-resolved hyperparameters; None fields take the stage default."""

    stage: str = "tf"
    lr: float | None = None  # 5e-5 likelihood stage, 5e-6 fine-tuning
    batch_size: int | None = None  # 16 likelihood stage, 8 fine-tuning
    epochs: int | None = None  # up to 32 likelihood stage, exactly 1 fine-tuning
    entropy_weight: float = 0.05
    entropy_sign: str = "bonus"
    top_k: int = 50
    validation_events: int = 50  # per fine-tuning epoch
    freeze_encoder: bool = True  # applies to the fine-tuning stage
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    max_new_tokens: int = 512
    max_skipped_fraction: float = 0.01

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.lr is None:
            self.lr = 5e-5 if self.stage == "tf" else 5e-6
        if self.batch_size is None:
            self.batch_size = 16 if self.stage == "tf" else 8
        if self.epochs is None:
            self.epochs = 32 if self.stage == "tf" else 1
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.stage == "tf" and not 1 <= self.epochs <= 32:
            raise ValueError("likelihood-stage epochs must be in [1, 32]")
        if self.is_rl and self.epochs != 1:
            raise ValueError("fine-tuning runs exactly one epoch")
        if self.entropy_weight < 0:
            raise ValueError("entropy_weight must be >= 0")
        if self.entropy_sign not in ENTROPY_SIGNS:
            raise ValueError(f"entropy_sign must be one of {ENTROPY_SIGNS}")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.validation_events < 1:
            raise ValueError("validation_events must be >= 1")
        if not 2 <= self.max_new_tokens <= 512:
            raise ValueError("max_new_tokens must be in [2, 512]")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    @property
    def is_rl(self) -> bool:
        return self.stage in ("scst", "east")


class EventLog:
    """Append-only JSON-lines run log; a None path makes it a no-op."""

    def __init__(self, path=None):
        self._fh = open(path, "w", encoding="utf-8") if path is not None else None

    def write(self, payload: dict) -> None:
        if self._fh is None:
            return
        self._fh.write(json.dumps(payload, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    The decay is applied directly to the parameter (scaled by lr), not
    through the gradient moments. A missing gradient counts as zero. Any
    non-finite gradient rejects the whole step atomically.
    """

    def __init__(self, names, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.names = list(names)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: ModelParams) -> None:
        tensors = [(name, params[name]) for name in self.names]
        for name, tensor in tensors:
            if tensor.grad is not None and not np.isfinite(tensor.grad).all():
                raise TrainingError(f"non-finite gradient in {name}")
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for name, tensor in tensors:
            if name not in self.m:
                self.m[name] = np.zeros_like(tensor.values)
                self.v[name] = np.zeros_like(tensor.values)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            v *= self.beta2
            if tensor.grad is not None:
                m += (1.0 - self.beta1) * tensor.grad
                v += (1.0 - self.beta2) * np.square(tensor.grad)
            m_hat = m / bias1
            v_hat = v / bias2
            tensor.values = tensor.values - self.lr * (
                m_hat / (np.sqrt(v_hat) + self.eps)
                + self.weight_decay * tensor.values
            )


# ---------------------------------------------------------------------------
# losses


def entropy_of_distribution(dist) -> float:
    """Entropy -sum p ln p of one probability vector, with 0 ln 0 = 0."""
    d = np.asarray(dist, dtype=np.float64)
    if d.ndim != 1:
        raise ValueError(f"need a 1-d distribution, got shape {d.shape}")
    if (d < 0).any():
        raise ValueError("probabilities must be nonnegative")
    if abs(d.sum() - 1.0) > 1e-6:
        raise ValueError(f"distribution sums to {d.sum()!r}, not 1")
    nz = d[d > 0]
    return float(-(nz * np.log(nz)).sum())


def sequence_entropy(log_dists: T.Tensor) -> T.Tensor:
    """Tape-connected mean over steps of each full distribution's entropy."""
    steps = log_dists.shape[0]
    p_log_p = T.mul(T.exp(log_dists), log_dists)
    return T.scale(T.sum_all(p_log_p), -1.0 / steps)


def sequence_entropy_value(log_dists_values: np.ndarray) -> float:
    """Plain-number twin of sequence_entropy for diagnostics."""
    ld = np.asarray(log_dists_values, dtype=np.float64)
    return float(-(np.exp(ld) * ld).sum() / ld.shape[0])


def scst_loss(mean_lp: T.Tensor, advantage: float) -> T.Tensor:
    """-(advantage) * meanLogProb; zero advantage gives a zero gradient."""
    return T.scale(mean_lp, -float(advantage))


def east_loss(mean_lp: T.Tensor, log_dists: T.Tensor, advantage: float,
              entropy_weight: float, entropy_sign: str = "bonus") -> T.Tensor:
    if entropy_sign not in ENTROPY_SIGNS:
        raise ValueError(f"entropy_sign must be one of {ENTROPY_SIGNS}")
    base = scst_loss(mean_lp, advantage)
    term = T.scale(sequence_entropy(log_dists), float(entropy_weight))
    return T.sub(base, term) if entropy_sign == "bonus" else T.add(base, term)


# ---------------------------------------------------------------------------
# study plumbing


def target_for_study(study, vocab: Vocabulary) -> TargetSequence:
    report = SectionedReport(
        findings=vocab.encode(study.findings_text)
        if study.findings_text is not None
        else None,
        impression=vocab.encode(study.impression_text)
        if study.impression_text is not None
        else None,
    )
    return assemble_target(report)


def sections_to_text(report: SectionedReport, vocab: Vocabulary) -> TextSections:
    return TextSections(
        findings=vocab.decode(report.findings) if report.findings is not None else None,
        impression=vocab.decode(report.impression)
        if report.impression is not None
        else None,
    )


def reference_sections(study) -> TextSections:
    return TextSections(study.findings_text, study.impression_text)


# ---------------------------------------------------------------------------
# likelihood stage


def tf_batch_loss(params: ModelParams, studies, vocab: Vocabulary, rng=None):
    """Position-mean next-token NLL over the batch; tape-connected.

    Control tokens are ordinary predictable targets; every position of every
    study weighs equally (studies contribute in proportion to their length).
    """
    if not studies:
        raise ValueError("empty batch")
    total = None
    count = 0
    for study in studies:
        prompt = encode_images(params, study.images, training=rng is not None, rng=rng)
        target = target_for_study(study, vocab)
        mean_lp, _ = log_prob_of(params, prompt, target.ids, target.section_type_ids)
        steps = len(target.ids) - 1
        nll = T.scale(mean_lp, -float(steps))
        total = nll if total is None else T.add(total, nll)
        count += steps
    return T.scale(total, 1.0 / count), count


def tf_step(params: ModelParams, studies, optimizer: AdamW, vocab: Vocabulary,
            rng=None) -> float:
    """One teacher-forcing update; raises TrainingError on non-finite loss/grads."""
    params.zero_grads()
    with T.Tape() as tape:
        loss, _ = tf_batch_loss(params, studies, vocab, rng)
    value = float(loss.values)
    if not np.isfinite(value):
        raise TrainingError(f"non-finite teacher-forcing loss {value!r}")
    tape.backward(loss)
    optimizer.step(params)
    return value


def tf_validation_loss(params: ModelParams, studies, vocab: Vocabulary) -> float:
    """Position-mean NLL on held-out studies, without gradients or sampling."""
    total = 0.0
    count = 0
    for study in studies:
        prompt = encode_images(params, study.images, training=False)
        target = target_for_study(study, vocab)
        mean_lp, _ = log_prob_of(params, prompt, target.ids, target.section_type_ids)
        steps = len(target.ids) - 1
        total += -float(mean_lp.values) * steps
        count += steps
    if count == 0:
        raise ValueError("validation split is empty")
    return total / count


def _batches(order, batch_size):
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def tf_train(params: ModelParams, train_studies, val_studies, vocab: Vocabulary,
             config: TrainConfig, event_log: EventLog | None = None,
             checkpoint_path=None):
    """Likelihood pretraining; returns (best params, per-epoch validation trace)."""
    if config.stage != "tf":
        raise ValueError(f"tf_train needs stage 'tf', got {config.stage!r}")
    if not train_studies:
        raise ValueError("empty training split")
    log = event_log or EventLog(None)
    rng = np.random.default_rng(config.seed)
    optimizer = AdamW(
        params.trainable_names(freeze_encoder=False), config.lr, config.beta1,
        config.beta2, config.eps, config.weight_decay,
    )
    best_value = math.inf
    best_params = params.copy()
    trace = []
    step = 0
    skipped = 0

    for epoch in range(config.epochs):
        order = rng.permutation(len(train_studies))
        for chunk in _batches(order, config.batch_size):
            studies = [train_studies[i] for i in chunk]
            step += 1
            try:
                loss = tf_step(params, studies, optimizer, vocab, rng)
            except TrainingError as err:
                skipped += 1
                log.write({"event": "tf_step_skipped", "step": step,
                           "epoch": epoch, "reason": str(err)})
                continue
            log.write({"event": "tf_step", "step": step, "epoch": epoch,
                       "loss": loss})
        if val_studies:
            val = tf_validation_loss(params, val_studies, vocab)
            trace.append(val)
            improved = val < best_value
            if improved:
                best_value = val
                best_params = params.copy()
                if checkpoint_path is not None:
                    save_checkpoint(best_params, checkpoint_path)
            log.write({"event": "tf_validation", "epoch": epoch, "loss": val,
                       "best": improved})
        else:
            best_params = params.copy()

    if step and skipped > config.max_skipped_fraction * step:
        raise TrainingError(
            f"{skipped} of {step} steps skipped for non-finite values"
        )
    return best_params, trace


# ---------------------------------------------------------------------------
# fine-tuning stage


@dataclass
class Rollout:
    """One study's sampled report, greedy baseline, and reward bookkeeping."""

    study_id: str
    sample_ids: list
    baseline_ids: list
    sample_step_log_probs: list
    r_sample: float
    r_baseline: float
    advantage: float
    selected: tuple  # image indices shared by sample and baseline
    encoder_states: np.ndarray  # frozen-encoder prompt input
    mean_step_entropy: float | None = None  # filled during the update pass

    def __post_init__(self):
        for name in ("r_sample", "r_baseline"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")
        if abs(self.advantage - (self.r_sample - self.r_baseline)) > 1e-12:
            raise ValueError("advantage must equal r_sample - r_baseline")


def _decode_constraints(params: ModelParams, config: TrainConfig):
    cap = min(config.max_new_tokens, params.config.max_new_tokens)
    return constraints_for_section("both", max_new_tokens=cap)


def _clamped_k(params: ModelParams, config: TrainConfig, constraints) -> int:
    vocab = params.config.vocab_size
    forbidden = set(constraints.forbidden_tokens) & set(range(vocab))
    return min(config.top_k, vocab - len(forbidden))


def _prompt_inputs(params: ModelParams, study, rng):
    selected = select_images(
        len(study.images), params.config.max_images, training=True, rng=rng
    )
    states = encoder_states_numpy(params, study.images, selected)
    values = states @ params["proj"].values
    values = values + params["decoder.type_embed"].values[SOURCE_IMAGE]
    return selected, states, values


def rollout_batch(params: ModelParams, studies, vocab: Vocabulary,
                  catalog: ConditionCatalog, config: TrainConfig, rng) -> list:
    """Greedy baselines and top-k samples for a batch, without gradients."""
    constraints = _decode_constraints(params, config)
    k = _clamped_k(params, config, constraints)
    selected_all, states_all, prompts = [], [], []
    for study in studies:
        selected, states, values = _prompt_inputs(params, study, rng)
        selected_all.append(selected)
        states_all.append(states)
        prompts.append(values)

    baselines = decode_batch(ModelStepper(params, prompts), constraints, mode="greedy")
    samples = decode_batch(
        ModelStepper(params, prompts), constraints, mode="topk", k=k, rng=rng
    )

    rollouts = []
    for study, base, sample, selected, states in zip(
        studies, baselines, samples, selected_all, states_all
    ):
        ref = reference_sections(study)
        r_b = report_reward(sections_to_text(split_sections(base.ids), vocab), ref, catalog)
        r_s = report_reward(sections_to_text(split_sections(sample.ids), vocab), ref, catalog)
        rollouts.append(
            Rollout(
                study_id=study.study_id,
                sample_ids=list(sample.ids),
                baseline_ids=list(base.ids),
                sample_step_log_probs=list(sample.step_log_probs),
                r_sample=r_s,
                r_baseline=r_b,
                advantage=r_s - r_b,
                selected=selected,
                encoder_states=states,
            )
        )
    return rollouts


def prompt_for_update(params: ModelParams, study, rollout: Rollout,
                      freeze_encoder: bool) -> PromptBatch:
    """The tape-side prompt for scoring the sampled sequence.

    Frozen encoder: the stored states enter as constants, so gradients stop
    at the projection. Unfrozen: the encoder re-runs on the tape with the
    same image selection the rollout used.
    """
    if freeze_encoder:
        states = T.Tensor(rollout.encoder_states)
    else:
        blocks = [
            encode_one_image(params, np.asarray(study.images[i]))
            for i in rollout.selected
        ]
        states = blocks[0] if len(blocks) == 1 else T.concat(blocks, axis=0)
    embeds = project_prompt(params, states)
    return PromptBatch(embeds=embeds, selected=rollout.selected, p_len=embeds.shape[0])


def rollout_update(params: ModelParams, studies, rollouts, optimizer: AdamW,
                   config: TrainConfig) -> float:
    """One fine-tuning update over prepared rollouts; returns the batch loss.

    Raises TrainingError (leaving parameters untouched) on non-finite loss
    or gradients. Gradients flow only through the sampled sequences'
    log-probabilities and distributions, never through the baselines.
    """
    params.zero_grads()
    with T.Tape() as tape:
        total = None
        for study, rollout in zip(studies, rollouts):
            prompt = prompt_for_update(params, study, rollout, config.freeze_encoder)
            mean_lp, log_dists = log_prob_of(params, prompt, rollout.sample_ids)
            if config.stage == "east":
                loss = east_loss(mean_lp, log_dists, rollout.advantage,
                                 config.entropy_weight, config.entropy_sign)
            else:
                loss = scst_loss(mean_lp, rollout.advantage)
            rollout.mean_step_entropy = sequence_entropy_value(log_dists.values)
            total = loss if total is None else T.add(total, loss)
        batch_loss = T.scale(total, 1.0 / len(rollouts))
    value = float(batch_loss.values)
    if not np.isfinite(value):
        raise TrainingError(f"non-finite fine-tuning loss {value!r}")
    tape.backward(batch_loss)
    optimizer.step(params)
    return value


def greedy_decode_sections(params: ModelParams, studies, vocab: Vocabulary,
                           max_new_tokens: int) -> list:
    """Greedy batched decode of many studies into section texts."""
    constraints = constraints_for_section("both", max_new_tokens=max_new_tokens)
    out = []
    for start in range(0, len(studies), VALIDATION_DECODE_CHUNK):
        chunk = studies[start : start + VALIDATION_DECODE_CHUNK]
        prompts = []
        for study in chunk:
            selected = select_images(
                len(study.images), params.config.max_images, training=False, rng=None
            )
            states = encoder_states_numpy(params, study.images, selected)
            values = states @ params["proj"].values
            values = values + params["decoder.type_embed"].values[SOURCE_IMAGE]
            prompts.append(values)
        results = decode_batch(ModelStepper(params, prompts), constraints, mode="greedy")
        out.extend(sections_to_text(split_sections(r.ids), vocab) for r in results)
    return out


def validation_label_f1(params: ModelParams, studies, vocab: Vocabulary,
                        catalog: ConditionCatalog, max_new_tokens: int) -> float:
    """Label macro F1 of greedy decodes against the studies' true labels."""
    decoded = greedy_decode_sections(params, studies, vocab, max_new_tokens)
    hyp = [labels_from_texts((d.findings, d.impression), catalog) for d in decoded]
    ref = [tuple(s.labels) for s in studies]
    return label_macro_f1(hyp, ref)


def rl_train(params: ModelParams, train_studies, val_studies, vocab: Vocabulary,
             catalog: ConditionCatalog, config: TrainConfig,
             event_log: EventLog | None = None, checkpoint_path=None):
    """One fine-tuning epoch; returns (best params, validation trace).

    The monitored metric is label macro F1 of greedy decodes of the
    validation split, measured at config.validation_events evenly spaced
    points; the parameters from the best event are returned. Batches whose
    loss or gradients go non-finite are skipped; more than
    max_skipped_fraction of them fails the run.
    """
    if not config.is_rl:
        raise ValueError(f"rl_train needs stage 'scst' or 'east', got {config.stage!r}")
    if not train_studies:
        raise ValueError("empty training split")
    if not val_studies:
        raise ValueError("fine-tuning needs a validation split for the monitor")
    log = event_log or EventLog(None)
    rng = np.random.default_rng(config.seed)
    optimizer = AdamW(
        params.trainable_names(freeze_encoder=config.freeze_encoder), config.lr,
        config.beta1, config.beta2, config.eps, config.weight_decay,
    )

    order = rng.permutation(len(train_studies))
    batches = _batches(order, config.batch_size)
    total_batches = len(batches)
    # event j fires after batch ceil(j * B / events); duplicates share one decode
    event_after = {}
    for j in range(1, config.validation_events + 1):
        boundary = math.ceil(j * total_batches / config.validation_events)
        event_after.setdefault(boundary, []).append(j)

    best_value = -math.inf
    best_params = params.copy()
    trace = []
    skipped = 0
    entropy_window = []

    for index, chunk in enumerate(batches, start=1):
        studies = [train_studies[i] for i in chunk]
        try:
            rollouts = rollout_batch(params, studies, vocab, catalog, config, rng)
            loss = rollout_update(params, studies, rollouts, optimizer, config)
        # non-finite parameters surface inside decoding as ValueError
        # (sampling probabilities), not only as a non-finite loss
        except (TrainingError, ValueError) as err:
            skipped += 1
            log.write({"event": "rl_step_skipped", "step": index,
                       "stage": config.stage, "reason": str(err)})
        else:
            entropies = [r.mean_step_entropy for r in rollouts]
            entropy_mean = float(np.mean(entropies))
            entropy_window.append(entropy_mean)
            log.write({
                "event": "rl_step",
                "step": index,
                "stage": config.stage,
                "loss": loss,
                "reward_sample_mean": float(np.mean([r.r_sample for r in rollouts])),
                "reward_baseline_mean": float(np.mean([r.r_baseline for r in rollouts])),
                "advantage_mean": float(np.mean([r.advantage for r in rollouts])),
                "entropy_mean": entropy_mean,
            })

        for j in event_after.get(index, []):
            value = validation_label_f1(
                params, val_studies, vocab, catalog, config.max_new_tokens
            )
            rollout_entropy = float(np.mean(entropy_window)) if entropy_window else None
            entropy_window = []
            improved = value > best_value
            if improved:
                best_value = value
                best_params = params.copy()
                if checkpoint_path is not None:
                    save_checkpoint(best_params, checkpoint_path)
            record = {
                "event": "validation",
                "index": j,
                "step": index,
                "stage": config.stage,
                "label_macro_f1": value,
                "rollout_entropy": rollout_entropy,
                "best": improved,
            }
            trace.append(record)
            log.write(record)

    if skipped > config.max_skipped_fraction * total_batches:
        raise TrainingError(
            f"{skipped} of {total_batches} batches skipped for non-finite values"
        )
    return best_params, trace
