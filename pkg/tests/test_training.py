"""Tests for the two-stage trainer: optimizer arithmetic, loss surfaces,
gradient routing, and the epoch mechanics of both stages."""

import json

import numpy as np
import pytest

import eastlab.tensor as T
from eastlab.catalog import default_catalog
from eastlab.corpus import GenConfig, StudyRecord, generate_corpus
from eastlab.decoding import constraints_for_section, greedy, prompt_values
from eastlab.model import ModelConfig, encode_images, init_params, log_prob_of
from eastlab.training import (
    AdamW,
    EventLog,
    Rollout,
    TrainConfig,
    TrainingError,
    east_loss,
    entropy_of_distribution,
    rl_train,
    rollout_batch,
    rollout_update,
    scst_loss,
    sections_to_text,
    sequence_entropy,
    sequence_entropy_value,
    target_for_study,
    tf_batch_loss,
    tf_step,
    tf_train,
    tf_validation_loss,
    validation_label_f1,
)
from eastlab.vocab import BOS_ID, RESERVED, Vocabulary, split_sections

CATALOG = default_catalog()
VOCAB = CATALOG.build_vocabulary()

MICRO_WORDS = tuple(f"word{i}" for i in range(6))
MICRO_VOCAB = Vocabulary(RESERVED + MICRO_WORDS)


def micro_model(seed=0, dtype=np.float64):
    config = ModelConfig(
        vocab_size=len(MICRO_VOCAB),
        patches=1,
        feature_dim=4,
        encoder_layers=1,
        encoder_width=4,
        encoder_ffn=8,
        decoder_layers=1,
        hidden=8,
        heads=2,
        ffn=16,
        max_positions=24,
        max_new_tokens=12,
        max_images=1,
    )
    return init_params(config, seed=seed).to_dtype(dtype)


def micro_study(seed=0, findings="word0 word1", impression="word2"):
    rng = np.random.default_rng(seed)
    return StudyRecord(
        study_id=f"micro-{seed}",
        images=[rng.standard_normal((1, 4))],
        findings_text=findings,
        impression_text=impression,
        labels=(),
    )


def small_model(seed=0, dtype=np.float32):
    config = ModelConfig(
        vocab_size=len(VOCAB),
        patches=4,
        feature_dim=8,
        encoder_layers=1,
        encoder_width=8,
        encoder_ffn=16,
        decoder_layers=1,
        hidden=16,
        heads=2,
        ffn=32,
        max_positions=256,
        max_new_tokens=64,
        max_images=3,
    )
    params = init_params(config, seed=seed)
    return params if dtype == np.float32 else params.to_dtype(dtype)


def small_corpus(seed=0, train=16, val=6):
    gen = GenConfig(
        seed=seed,
        train_size=train,
        validation_size=val,
        test_size=0,
        p_mention=0.2,
        patches_per_side=2,
        feature_dim=8,
        max_images=3,
        noise_sigma=0.05,
    )
    return generate_corpus(gen, CATALOG)


def micro_tape(params, study, build, seq=None):
    """Run one likelihood pass, build a loss from it, and backprop."""
    if seq is None:
        seq = target_for_study(study, MICRO_VOCAB).ids
    params.zero_grads()
    with T.Tape() as tape:
        prompt = encode_images(params, study.images)
        mean_lp, log_dists = log_prob_of(params, prompt, seq)
        loss = build(mean_lp, log_dists)
    tape.backward(loss)
    return loss, mean_lp, log_dists


def grad_snapshot(params):
    return {
        n: (None if t.grad is None else t.grad.copy()) for n, t in params.items()
    }


# ---------------------------------------------------------------------------
# configuration


class TestTrainConfig:
    def test_stage_defaults(self):
        tf = TrainConfig(stage="tf")
        assert (tf.lr, tf.batch_size, tf.epochs) == (5e-5, 16, 32)
        rl = TrainConfig(stage="scst")
        assert (rl.lr, rl.batch_size, rl.epochs) == (5e-6, 8, 1)
        east = TrainConfig(stage="east")
        assert east.entropy_weight == 0.05
        assert east.entropy_sign == "bonus"
        assert east.top_k == 50
        assert east.validation_events == 50
        assert east.freeze_encoder

    def test_explicit_values_survive(self):
        c = TrainConfig(stage="tf", lr=1e-3, batch_size=4, epochs=2)
        assert (c.lr, c.batch_size, c.epochs) == (1e-3, 4, 2)

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(stage="ppo"),
            dict(stage="scst", epochs=2),
            dict(stage="tf", epochs=33),
            dict(stage="tf", epochs=0),
            dict(stage="east", entropy_weight=-0.1),
            dict(stage="east", entropy_sign="up"),
            dict(stage="tf", lr=0.0),
            dict(stage="scst", top_k=0),
            dict(stage="scst", max_new_tokens=1),
            dict(stage="scst", max_new_tokens=513),
            dict(stage="tf", batch_size=0),
            dict(stage="tf", beta1=1.0),
            dict(stage="tf", weight_decay=-1e-3),
        ],
    )
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


# ---------------------------------------------------------------------------
# optimizer


def hand_adamw(value, grads, lr, beta1, beta2, eps, wd):
    """Reference loop in plain python floats."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        value = value - lr * (m_hat / (v_hat**0.5 + eps) + wd * value)
    return value


class TestAdamW:
    def scalar_param(self, value=1.0):
        return {"w": T.Tensor(np.array([value], dtype=np.float64), requires_grad=True)}

    def step_once(self, opt_kwargs, value, grad):
        from eastlab.model import ModelParams  # reuse the name->tensor container

        params = ModelParams(None, self.scalar_param(value))
        opt = AdamW(["w"], **opt_kwargs)
        params["w"].grad = np.array([grad], dtype=np.float64)
        opt.step(params)
        return params, opt

    def test_single_step_matches_hand_arithmetic(self):
        params, _ = self.step_once(
            dict(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0),
            value=1.0,
            grad=0.5,
        )
        expected = hand_adamw(1.0, [0.5], 0.1, 0.9, 0.999, 1e-8, 0.0)
        assert abs(float(params["w"].values[0]) - expected) < 1e-12

    def test_multi_step_with_decay_matches_hand_arithmetic(self):
        params, opt = self.step_once(
            dict(lr=0.05, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01),
            value=2.0,
            grad=0.3,
        )
        params["w"].grad = np.array([-0.7], dtype=np.float64)
        opt.step(params)
        params["w"].grad = np.array([0.1], dtype=np.float64)
        opt.step(params)
        expected = hand_adamw(2.0, [0.3, -0.7, 0.1], 0.05, 0.9, 0.999, 1e-8, 0.01)
        assert abs(float(params["w"].values[0]) - expected) < 1e-12

    def test_zero_grads_zero_decay_leave_params_unchanged(self):
        params, opt = self.step_once(
            dict(lr=0.1, weight_decay=0.0), value=1.5, grad=0.0
        )
        assert float(params["w"].values[0]) == 1.5
        params["w"].grad = None  # missing gradient counts as zero
        opt.step(params)
        assert float(params["w"].values[0]) == 1.5

    def test_decay_alone_shrinks_magnitude(self):
        for start in (2.0, -2.0):
            params, _ = self.step_once(
                dict(lr=0.1, weight_decay=0.05), value=start, grad=0.0
            )
            end = float(params["w"].values[0])
            assert abs(end) < abs(start)
            assert np.sign(end) == np.sign(start)

    def test_non_finite_gradient_rejected_atomically(self):
        params, opt = self.step_once(dict(lr=0.1, weight_decay=0.0), 1.0, 0.5)
        after_one = float(params["w"].values[0])
        params["w"].grad = np.array([np.nan], dtype=np.float64)
        with pytest.raises(TrainingError, match="non-finite"):
            opt.step(params)
        assert float(params["w"].values[0]) == after_one
        assert opt.t == 1  # the rejected step did not advance time


# ---------------------------------------------------------------------------
# entropy


class TestEntropy:
    def test_uniform_over_four(self):
        assert np.isclose(entropy_of_distribution([0.25] * 4), np.log(4), atol=1e-12)

    def test_one_hot_is_zero(self):
        assert entropy_of_distribution([0.0, 1.0, 0.0]) == 0.0

    def test_half_half_with_zeros(self):
        assert np.isclose(
            entropy_of_distribution([0.5, 0.5, 0.0, 0.0]), np.log(2), atol=1e-12
        )

    def test_invalid_distributions_rejected(self):
        with pytest.raises(ValueError, match="nonnegative"):
            entropy_of_distribution([1.1, -0.1])
        with pytest.raises(ValueError, match="sums to"):
            entropy_of_distribution([0.7, 0.2])
        with pytest.raises(ValueError, match="1-d"):
            entropy_of_distribution([[0.5, 0.5]])

    def test_sequence_entropy_matches_per_row_entropy(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((5, 7))
        log_dists = T.log_softmax_values(logits)
        expected = np.mean(
            [entropy_of_distribution(np.exp(row)) for row in log_dists]
        )
        got = sequence_entropy(T.Tensor(log_dists)).values
        assert np.isclose(got, expected, atol=1e-12)
        assert np.isclose(sequence_entropy_value(log_dists), expected, atol=1e-12)

    def test_sequence_entropy_gradient_passes_finite_difference(self):
        rng = np.random.default_rng(1)
        x = T.Tensor(rng.standard_normal((3, 5)), requires_grad=True)

        def objective():
            return sequence_entropy(T.log_softmax_lastdim(x))

        report = T.finite_difference_check(objective, {"x": x}, h=1e-5, tol=1e-4)
        assert report.passed, report.summary()


# ---------------------------------------------------------------------------
# loss forms


class TestLossForms:
    def test_scst_substitution(self):
        mean_lp = T.Tensor(np.float64(-2.0))
        assert float(scst_loss(mean_lp, 1.0).values) == 2.0
        assert float(scst_loss(mean_lp, -0.5).values) == -1.0

    def test_zero_advantage_gives_zero_loss_and_gradients(self):
        params = micro_model(seed=0)
        study = micro_study(seed=1)
        loss, _, _ = micro_tape(params, study, lambda lp, ld: scst_loss(lp, 0.0))
        assert float(loss.values) == 0.0
        grads = grad_snapshot(params)
        assert grads["head"] is not None
        for name, g in grads.items():
            if g is not None:
                assert np.all(g == 0.0), name

    def test_east_at_zero_weight_is_bitwise_scst(self):
        params = micro_model(seed=2)
        study = micro_study(seed=3)
        loss_a, _, _ = micro_tape(params, study, lambda lp, ld: scst_loss(lp, 0.4))
        grads_a = grad_snapshot(params)
        loss_b, _, _ = micro_tape(
            params, study, lambda lp, ld: east_loss(lp, ld, 0.4, 0.0, "bonus")
        )
        grads_b = grad_snapshot(params)
        assert float(loss_a.values) == float(loss_b.values)
        for name in grads_a:
            a, b = grads_a[name], grads_b[name]
            if a is None:
                assert b is None or np.all(b == 0.0), name
            else:
                assert np.array_equal(a, b), name

    def test_east_with_uniform_dists_is_entropy_term_only(self):
        params = micro_model(seed=4)
        params["head"].values[:] = 0.0
        study = micro_study(seed=5)
        loss, _, _ = micro_tape(
            params, study, lambda lp, ld: east_loss(lp, ld, 0.0, 0.05, "bonus")
        )
        expected = -0.05 * np.log(len(MICRO_VOCAB))
        assert np.isclose(float(loss.values), expected, atol=1e-12)

    def test_zero_advantage_east_gradient_is_the_entropy_gradient(self):
        params = micro_model(seed=6)
        study = micro_study(seed=7)
        micro_tape(
            params, study, lambda lp, ld: east_loss(lp, ld, 0.0, 0.05, "bonus")
        )
        grads_east = grad_snapshot(params)
        micro_tape(
            params, study,
            lambda lp, ld: T.scale(sequence_entropy(ld), -0.05),
        )
        grads_entropy = grad_snapshot(params)
        for name in grads_east:
            a, b = grads_east[name], grads_entropy[name]
            if a is None and b is None:
                continue
            assert np.array_equal(a, b), name

    def test_penalty_sign_flips_the_entropy_gradient(self):
        params = micro_model(seed=8)
        study = micro_study(seed=9)
        micro_tape(
            params, study, lambda lp, ld: east_loss(lp, ld, 0.0, 0.05, "bonus")
        )
        grads_bonus = grad_snapshot(params)
        micro_tape(
            params, study, lambda lp, ld: east_loss(lp, ld, 0.0, 0.05, "penalty")
        )
        grads_penalty = grad_snapshot(params)
        for name in grads_bonus:
            a, b = grads_bonus[name], grads_penalty[name]
            if a is None and b is None:
                continue
            assert np.array_equal(a, -b), name

    def test_rejects_unknown_entropy_sign(self):
        with pytest.raises(ValueError, match="entropy_sign"):
            east_loss(T.Tensor(np.float64(-1.0)), T.Tensor(np.zeros((2, 3))), 0.1,
                      0.05, "up")

    def test_positive_advantage_update_raises_sample_likelihood(self):
        params = micro_model(seed=10)
        study = micro_study(seed=11)
        seq = target_for_study(study, MICRO_VOCAB).ids
        _, mean_lp, _ = micro_tape(
            params, study, lambda lp, ld: scst_loss(lp, 1.0), seq=seq
        )
        before = float(mean_lp.values)
        AdamW(params.names(), lr=1e-3, weight_decay=0.0).step(params)
        prompt = encode_images(params, study.images)
        after = float(log_prob_of(params, prompt, seq)[0].values)
        assert after > before

    def test_zero_advantage_bonus_update_raises_entropy(self):
        params = micro_model(seed=12)
        study = micro_study(seed=13)
        seq = target_for_study(study, MICRO_VOCAB).ids
        _, _, log_dists = micro_tape(
            params, study,
            lambda lp, ld: east_loss(lp, ld, 0.0, 0.05, "bonus"), seq=seq,
        )
        before = sequence_entropy_value(log_dists.values)
        AdamW(params.names(), lr=1e-3, weight_decay=0.0).step(params)
        prompt = encode_images(params, study.images)
        after = sequence_entropy_value(log_prob_of(params, prompt, seq)[1].values)
        assert after > before


# ---------------------------------------------------------------------------
# likelihood stage


class TestTeacherForcing:
    def test_uniform_logits_loss_is_log_vocab(self):
        params = micro_model(seed=0)
        params["head"].values[:] = 0.0
        studies = [micro_study(seed=1), micro_study(seed=2, impression=None)]
        loss, count = tf_batch_loss(params, studies, MICRO_VOCAB)
        assert np.isclose(float(loss.values), np.log(len(MICRO_VOCAB)), atol=1e-9)
        lengths = [len(target_for_study(s, MICRO_VOCAB).ids) - 1 for s in studies]
        assert count == sum(lengths)

    def test_loss_gradient_passes_finite_difference(self):
        params = micro_model(seed=1)
        study = micro_study(seed=3)

        def objective():
            return tf_batch_loss(params, [study], MICRO_VOCAB)[0]

        report = T.finite_difference_check(
            objective, dict(params.items()), h=1e-5, tol=1e-4
        )
        assert report.passed, report.summary()

    def test_non_finite_loss_aborts_the_step(self):
        params = micro_model(seed=2)
        params["head"].values[:] = np.nan
        optimizer = AdamW(params.names(), lr=1e-3)
        with pytest.raises(TrainingError, match="non-finite"):
            tf_step(params, [micro_study(seed=4)], optimizer, MICRO_VOCAB)
        assert optimizer.t == 0

    def test_memorization_loss_decreases_and_best_is_restored(self, tmp_path):
        corpus = small_corpus(seed=0, train=20, val=0)
        params = small_model(seed=0)
        config = TrainConfig(
            stage="tf", lr=5e-3, batch_size=8, epochs=20, weight_decay=0.0, seed=0
        )
        before = tf_validation_loss(params, corpus.train, VOCAB)
        log_path = tmp_path / "tf.jsonl"
        log = EventLog(log_path)
        best, trace = tf_train(
            params, corpus.train, corpus.train, VOCAB, config, event_log=log
        )
        log.close()
        after = tf_validation_loss(best, corpus.train, VOCAB)
        assert after < 0.5 * before
        assert trace[-1] < trace[0]
        assert np.isclose(after, min(trace), atol=1e-9)

        events = [json.loads(line) for line in log_path.read_text().splitlines()]
        kinds = {e["event"] for e in events}
        assert "tf_step" in kinds and "tf_validation" in kinds
        assert sum(e["event"] == "tf_validation" for e in events) == config.epochs

    def test_stage_must_be_tf(self):
        params = small_model(seed=0)
        with pytest.raises(ValueError, match="tf"):
            tf_train(params, [micro_study()], [], VOCAB, TrainConfig(stage="scst"))


# ---------------------------------------------------------------------------
# rollouts


class TestRollouts:
    def make(self, seed=0, stage="scst", **kwargs):
        params = small_model(seed=seed)
        corpus = small_corpus(seed=seed, train=8, val=4)
        config = TrainConfig(stage=stage, max_new_tokens=16, **kwargs)
        return params, corpus, config

    def test_rollout_fields_and_greedy_baseline(self):
        params, corpus, config = self.make(seed=1)
        studies = corpus.train[:4]
        rollouts = rollout_batch(
            params, studies, VOCAB, CATALOG, config, np.random.default_rng(0)
        )
        constraints = constraints_for_section("both", max_new_tokens=16)
        for study, ro in zip(studies, rollouts):
            assert ro.study_id == study.study_id
            assert ro.sample_ids[0] == BOS_ID and ro.baseline_ids[0] == BOS_ID
            assert 0.0 <= ro.r_sample <= 1.0 and 0.0 <= ro.r_baseline <= 1.0
            assert ro.advantage == ro.r_sample - ro.r_baseline
            assert len(ro.sample_step_log_probs) == len(ro.sample_ids) - 1
            direct = greedy(params, prompt_values(params, study.images)[0], constraints)
            assert ro.baseline_ids == direct.ids

    def test_rollout_invariants(self):
        kwargs = dict(
            study_id="s", sample_ids=[1, 2], baseline_ids=[1, 2],
            sample_step_log_probs=[-0.1], selected=(0,),
            encoder_states=np.zeros((1, 4)),
        )
        with pytest.raises(ValueError, match="outside"):
            Rollout(r_sample=1.5, r_baseline=0.0, advantage=1.5, **kwargs)
        with pytest.raises(ValueError, match="advantage"):
            Rollout(r_sample=0.5, r_baseline=0.5, advantage=0.2, **kwargs)

    def test_update_freezes_encoder_and_routes_gradients(self):
        params, corpus, config = self.make(seed=2, stage="east")
        studies = corpus.train[:4]
        rollouts = rollout_batch(
            params, studies, VOCAB, CATALOG, config, np.random.default_rng(1)
        )
        encoder_before = {
            n: params[n].values.tobytes() for n in params.encoder_names()
        }
        optimizer = AdamW(
            params.trainable_names(freeze_encoder=True), lr=1e-4, weight_decay=0.01
        )
        loss = rollout_update(params, studies, rollouts, optimizer, config)
        assert np.isfinite(loss)
        for name in params.encoder_names():
            assert params[name].grad is None, name
            assert params[name].values.tobytes() == encoder_before[name], name
        assert params["head"].grad is not None
        assert params["proj"].grad is not None
        for ro in rollouts:
            assert ro.mean_step_entropy is not None and ro.mean_step_entropy >= 0.0


# ---------------------------------------------------------------------------
# fine-tuning epoch


class TestRlTrain:
    def run(self, stage="east", seed=5, events=4, log_path=None, **kwargs):
        params = small_model(seed=seed)
        corpus = small_corpus(seed=seed, train=16, val=6)
        config = TrainConfig(
            stage=stage, max_new_tokens=16, validation_events=events,
            seed=seed, **kwargs,
        )
        log = EventLog(log_path) if log_path else None
        init = params.copy()
        best, trace = rl_train(
            params, corpus.train, corpus.validation, VOCAB, CATALOG, config,
            event_log=log,
        )
        if log:
            log.close()
        return init, best, trace, corpus, config

    def test_exact_validation_event_count(self):
        for events in (4, 5):
            _, _, trace, _, _ = self.run(events=events)
            assert len(trace) == events
            assert [t["index"] for t in trace] == list(range(1, events + 1))

    def test_more_events_than_batches_still_all_fire(self):
        # 16 studies / batch 8 = 2 batches but 5 events are requested
        _, _, trace, _, _ = self.run(events=5)
        assert len(trace) == 5

    def test_encoder_frozen_but_decoder_updated(self):
        init, best, _, _, _ = self.run(stage="east", seed=6)
        for name in init.encoder_names():
            assert np.array_equal(best[name].values, init[name].values), name
        assert not np.array_equal(best["head"].values, init["head"].values)

    def test_best_restore_matches_trace_maximum(self):
        _, best, trace, corpus, config = self.run(stage="east", seed=7)
        values = [t["label_macro_f1"] for t in trace]
        revalued = validation_label_f1(
            best, corpus.validation, VOCAB, CATALOG, config.max_new_tokens
        )
        assert revalued == max(values)

    def test_scst_equals_east_at_zero_entropy_weight(self):
        seed = 9
        init = small_model(seed=seed)
        corpus = small_corpus(seed=seed, train=16, val=6)

        results = {}
        for stage, weight in (("scst", 0.05), ("east", 0.0)):
            params = init.copy()
            config = TrainConfig(
                stage=stage, entropy_weight=weight, max_new_tokens=16,
                validation_events=3, seed=seed,
            )
            best, trace = rl_train(
                params, corpus.train, corpus.validation, VOCAB, CATALOG, config
            )
            results[stage] = (best, trace)

        best_a, trace_a = results["scst"]
        best_b, trace_b = results["east"]
        assert [t["label_macro_f1"] for t in trace_a] == [
            t["label_macro_f1"] for t in trace_b
        ]
        for name in best_a.names():
            assert np.array_equal(best_a[name].values, best_b[name].values), name

    def test_poisoned_params_skip_batches_and_fail(self, tmp_path):
        params = small_model(seed=10)
        params["head"].values[:] = np.nan
        corpus = small_corpus(seed=10, train=16, val=6)
        config = TrainConfig(stage="scst", max_new_tokens=16, validation_events=2,
                             seed=10)
        log_path = tmp_path / "rl.jsonl"
        log = EventLog(log_path)
        with pytest.raises(TrainingError, match="skipped"):
            rl_train(params, corpus.train, corpus.validation, VOCAB, CATALOG,
                     config, event_log=log)
        log.close()
        events = [json.loads(line) for line in log_path.read_text().splitlines()]
        assert any(e["event"] == "rl_step_skipped" for e in events)

    def test_event_log_contents(self, tmp_path):
        log_path = tmp_path / "rl.jsonl"
        self.run(stage="east", seed=11, events=2, log_path=log_path)
        events = [json.loads(line) for line in log_path.read_text().splitlines()]
        steps = [e for e in events if e["event"] == "rl_step"]
        validations = [e for e in events if e["event"] == "validation"]
        assert steps and len(validations) == 2
        for e in steps:
            for key in ("loss", "reward_sample_mean", "reward_baseline_mean",
                        "advantage_mean", "entropy_mean"):
                assert key in e
        for e in validations:
            assert "label_macro_f1" in e and "rollout_entropy" in e

    def test_input_validation(self):
        params = small_model(seed=0)
        corpus = small_corpus(seed=0, train=4, val=2)
        with pytest.raises(ValueError, match="scst"):
            rl_train(params, corpus.train, corpus.validation, VOCAB, CATALOG,
                     TrainConfig(stage="tf"))
        config = TrainConfig(stage="scst", max_new_tokens=16)
        with pytest.raises(ValueError, match="training split"):
            rl_train(params, [], corpus.validation, VOCAB, CATALOG, config)
        with pytest.raises(ValueError, match="validation split"):
            rl_train(params, corpus.train, [], VOCAB, CATALOG, config)


# ---------------------------------------------------------------------------
# text plumbing


class TestStudyPlumbing:
    def test_target_and_sections_roundtrip(self):
        corpus = small_corpus(seed=3, train=6, val=0)
        for study in corpus.train:
            target = target_for_study(study, VOCAB)
            report = split_sections(target.ids)
            assert report.wellformed
            texts = sections_to_text(report, VOCAB)
            assert texts.findings == study.findings_text
            assert texts.impression == study.impression_text

    def test_missing_sections_become_markers(self):
        study = micro_study(seed=0, findings=None, impression="word3")
        target = target_for_study(study, MICRO_VOCAB)
        report = split_sections(target.ids)
        assert report.findings is None
        assert report.impression is not None
        assert report.wellformed
