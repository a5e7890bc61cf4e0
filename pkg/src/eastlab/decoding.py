"""Greedy, top-k, and beam decoding with logit constraints over a KV cache.

The search loops are written against a minimal stepper interface (prefill
once, then one batched token step at a time), so they can be driven either
by the real cached transformer stepper below or by a fixed logits table in
tests. The cached stepper is pure numpy — decoding never records gradients;
training recomputes the log-probabilities it needs on the tape.

Batching pads prompts on the left; padded columns are masked out of
attention and rotary positions are offset so each study's logical positions
start at zero, which makes the cached path agree with the whole-sequence
tape path to numerical precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelParams, PromptBatch, encoder_states_numpy, select_images
from .tensor import log_softmax_values, rmsnorm_values, rope_values, softmax_values, swiglu_values
from .vocab import (
    BOS_ID,
    EOS_ID,
    NF_ID,
    NI_ID,
    PAD_ID,
    SEP_ID,
    SOURCE_FINDINGS,
    SOURCE_IMAGE,
    SOURCE_IMPRESSION,
)

NEG_INF = np.float64(-np.inf)


@dataclass(frozen=True)
class DecodeConstraints:
    forced_prefix: tuple = (BOS_ID,)
    forbidden_tokens: frozenset = frozenset()
    max_new_tokens: int = 512
    stop_token: int = EOS_ID

    def __post_init__(self):
        if not self.forced_prefix or self.forced_prefix[0] != BOS_ID:
            raise ValueError("forced_prefix must start with [BOS]")
        if EOS_ID in self.forbidden_tokens:
            raise ValueError("[EOS] must never be forbidden")
        if not 1 <= self.max_new_tokens <= 512:
            raise ValueError("max_new_tokens must be in [1, 512]")
        if len(self.forced_prefix) >= self.max_new_tokens:
            raise ValueError("forced_prefix leaves no room under max_new_tokens")
        object.__setattr__(self, "forced_prefix", tuple(int(t) for t in self.forced_prefix))
        object.__setattr__(self, "forbidden_tokens", frozenset(int(t) for t in self.forbidden_tokens))


def constraints_for_section(section: str, max_new_tokens: int = 512) -> DecodeConstraints:
    """Section-control presets: force/forbid the missing-section tokens."""
    if section == "both":
        return DecodeConstraints(forbidden_tokens=frozenset({PAD_ID}),
                                 max_new_tokens=max_new_tokens)
    if section == "impression":
        return DecodeConstraints(forced_prefix=(BOS_ID, NF_ID, SEP_ID),
                                 forbidden_tokens=frozenset({PAD_ID, NI_ID}),
                                 max_new_tokens=max_new_tokens)
    if section == "findings":
        # stop once the findings segment closes at [SEP]; the caller then
        # appends the forced [NI] [EOS] tail
        return DecodeConstraints(forbidden_tokens=frozenset({PAD_ID, NF_ID}),
                                 max_new_tokens=max_new_tokens, stop_token=SEP_ID)
    raise ValueError(f"unknown section mode {section!r}")


@dataclass
class DecodeResult:
    ids: list
    step_log_probs: list  # chosen log-prob per free (non-forced) step
    finished: bool
    score: float = 0.0  # summed log-probs of free steps (beam objective)


def _type_for(token: int, seen_sep: bool) -> tuple:
    """Source type of a fed token, and the updated seen-[SEP] flag."""
    if token == SEP_ID or seen_sep:
        return SOURCE_IMPRESSION, True
    return SOURCE_FINDINGS, seen_sep


# ---------------------------------------------------------------------------
# cached transformer stepper

class ModelStepper:
    """Batched single-token decoder over left-padded prompts with a KV cache."""

    def __init__(self, params: ModelParams, prompts, capacity: int | None = None):
        c = params.config
        self.params = params
        self.config = c
        self.dtype = params["head"].dtype
        prompts = [np.asarray(p, dtype=self.dtype) for p in prompts]
        if not prompts:
            raise ValueError("need at least one prompt")
        for p in prompts:
            if p.ndim != 2 or p.shape[1] != c.hidden:
                raise ValueError(f"prompt shape {p.shape} != (p_len, {c.hidden})")
        self.batch = len(prompts)
        p_lens = np.array([p.shape[0] for p in prompts])
        self.max_p = int(p_lens.max())
        self.pad = self.max_p - p_lens  # left padding per row
        cap = capacity if capacity is not None else self.max_p + 513
        self.capacity = cap
        L, B, A, HD = c.decoder_layers, self.batch, c.heads, c.head_dim
        self.k_cache = np.zeros((L, B, A, cap, HD), dtype=self.dtype)
        self.v_cache = np.zeros((L, B, A, cap, HD), dtype=self.dtype)
        self.length = 0
        self._prefill(prompts)

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    def _weights(self, i: int, name: str) -> np.ndarray:
        return self.params[f"decoder.{i}.{name}"].values

    def _col_mask(self, upto: int) -> np.ndarray:
        """(batch, upto) validity: prompt pad columns are blocked forever."""
        cols = np.arange(upto)
        return cols[None, :] >= self.pad[:, None]

    def _prefill(self, prompts) -> None:
        c = self.config
        B, P, H, A, HD = self.batch, self.max_p, c.hidden, c.heads, c.head_dim
        x = np.zeros((B, P, H), dtype=self.dtype)
        for i, p in enumerate(prompts):
            x[i, self.pad[i]:] = p
        if c.rope_on_prompt:
            pos = np.maximum(np.arange(P)[None, :] - self.pad[:, None], 0)
        else:
            pos = np.zeros((B, P), dtype=np.int64)
        allowed = self._col_mask(P)[:, None, None, :]  # (B, 1, 1, P)
        for i in range(c.decoder_layers):
            h = rmsnorm_values(x, self._weights(i, "attn_norm"), c.norm_eps)
            q = (h @ self._weights(i, "wq")).reshape(B, P, A, HD)
            k = (h @ self._weights(i, "wk")).reshape(B, P, A, HD)
            v = (h @ self._weights(i, "wv")).reshape(B, P, A, HD)
            q = _rope_batched(q, pos, c.rope_base)
            k = _rope_batched(k, pos, c.rope_base)
            q, k, v = (a.transpose(0, 2, 1, 3) for a in (q, k, v))  # (B, A, P, HD)
            self.k_cache[i, :, :, :P] = k
            self.v_cache[i, :, :, :P] = v
            scores = q @ k.transpose(0, 1, 3, 2) * (1.0 / float(np.sqrt(HD)))
            scores = np.where(allowed, scores, np.asarray(-1e9, dtype=self.dtype))
            ctx = softmax_values(scores) @ v  # (B, A, P, HD)
            x = x + ctx.transpose(0, 2, 1, 3).reshape(B, P, H) @ self._weights(i, "wo")
            h = rmsnorm_values(x, self._weights(i, "ffn_norm"), c.norm_eps)
            gated = swiglu_values(h @ self._weights(i, "w_gate"), h @ self._weights(i, "w_up"))
            x = x + gated @ self._weights(i, "w_down")
        self.length = P

    def step(self, tokens, type_ids) -> np.ndarray:
        """Feed one token per row; returns next-token logits (batch, vocab)."""
        c = self.config
        B, A, HD, H = self.batch, c.heads, c.head_dim, c.hidden
        if self.length >= self.capacity:
            raise RuntimeError("decoder cache capacity exceeded")
        tokens = np.asarray(tokens, dtype=np.int64)
        type_ids = np.asarray(type_ids, dtype=np.int64)
        x = (self.params["decoder.tok_embed"].values[tokens]
             + self.params["decoder.type_embed"].values[type_ids])
        pos = self.length - self.pad  # logical position of this row per study
        upto = self.length + 1
        allowed = np.concatenate(
            [self._col_mask(min(self.max_p, upto)),
             np.ones((B, max(0, upto - self.max_p)), dtype=bool)], axis=1
        )[:, None, :]  # (B, 1, upto)
        for i in range(c.decoder_layers):
            h = rmsnorm_values(x, self._weights(i, "attn_norm"), c.norm_eps)
            q = (h @ self._weights(i, "wq")).reshape(B, A, HD)
            k = (h @ self._weights(i, "wk")).reshape(B, A, HD)
            v = (h @ self._weights(i, "wv")).reshape(B, A, HD)
            q = rope_values(q, pos, self.config.rope_base)
            k = rope_values(k, pos, self.config.rope_base)
            self.k_cache[i, :, :, self.length] = k
            self.v_cache[i, :, :, self.length] = v
            keys = self.k_cache[i, :, :, :upto]  # (B, A, upto, HD)
            vals = self.v_cache[i, :, :, :upto]
            scores = np.einsum("bad,baud->bau", q, keys) * (1.0 / float(np.sqrt(HD)))
            scores = np.where(allowed, scores, np.asarray(-1e9, dtype=self.dtype))
            ctx = np.einsum("bau,baud->bad", softmax_values(scores), vals)
            x = x + ctx.reshape(B, H) @ self._weights(i, "wo")
            h = rmsnorm_values(x, self._weights(i, "ffn_norm"), c.norm_eps)
            gated = swiglu_values(h @ self._weights(i, "w_gate"), h @ self._weights(i, "w_up"))
            x = x + gated @ self._weights(i, "w_down")
        self.length += 1
        out = rmsnorm_values(x, self.params["decoder.out_norm"].values, c.norm_eps)
        return out @ self.params["head"].values

    def clone_rows(self, index_map) -> None:
        """Reorder/duplicate batch rows in place (beam bookkeeping)."""
        idx = np.asarray(index_map, dtype=np.int64)
        self.k_cache = self.k_cache[:, idx].copy()
        self.v_cache = self.v_cache[:, idx].copy()
        self.pad = self.pad[idx].copy()
        self.batch = len(idx)


def _rope_batched(x: np.ndarray, positions: np.ndarray, base: float) -> np.ndarray:
    """Rotary rotation for (batch, seq, heads, head_dim) with (batch, seq) positions."""
    half = x.shape[-1] // 2
    inv = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = positions[..., None].astype(np.float64) * inv
    cos = np.cos(ang)[:, :, None, :].astype(x.dtype)
    sin = np.sin(ang)[:, :, None, :].astype(x.dtype)
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)


# ---------------------------------------------------------------------------
# prompt values for the cached path

def prompt_values(params: ModelParams, images, training: bool = False, rng=None):
    """Prompt embedding matrix for one study, computed without a tape.

    Returns (values (p_len, hidden), selected image indices). Shares the
    tape-path implementation, so the two paths agree exactly.
    """
    selected = select_images(len(images), params.config.max_images, training, rng)
    states = encoder_states_numpy(params, images, selected)
    vals = states @ params["proj"].values
    vals = vals + params["decoder.type_embed"].values[SOURCE_IMAGE]
    return vals, selected


def _prompt_matrix(prompt) -> np.ndarray:
    if isinstance(prompt, PromptBatch):
        return prompt.embeds.values
    return np.asarray(prompt)


# ---------------------------------------------------------------------------
# search loops over a stepper

def _masked(logits: np.ndarray, forbidden) -> np.ndarray:
    out = np.asarray(logits, dtype=np.float64).copy()
    for t in forbidden:
        out[..., t] = NEG_INF
    return out


def _feed_prefix(stepper, constraints: DecodeConstraints, rows: int):
    """Feed forced prefix tokens; returns (logits after last token, seen_sep flags)."""
    seen_sep = [False] * rows
    logits = None
    for tok in constraints.forced_prefix:
        types = []
        for r in range(rows):
            t, seen_sep[r] = _type_for(tok, seen_sep[r])
            types.append(t)
        logits = stepper.step([tok] * rows, types)
    return logits, seen_sep


def decode_batch(stepper, constraints: DecodeConstraints, mode: str = "greedy",
                 k: int | None = None, rng=None) -> list:
    """Greedy or top-k decoding of every stepper row under shared constraints."""
    if mode not in ("greedy", "topk"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "topk":
        if k is None or k < 1 or k > stepper.vocab_size:
            raise ValueError(f"k={k} outside [1, vocab={stepper.vocab_size}]")
        available = stepper.vocab_size - len(
            set(constraints.forbidden_tokens) & set(range(stepper.vocab_size))
        )
        if k > available:
            raise ValueError(f"k={k} exceeds the {available} unforbidden tokens")
        if rng is None:
            raise ValueError("top-k sampling needs an rng")

    rows = stepper.batch
    logits, seen_sep = _feed_prefix(stepper, constraints, rows)
    ids = [list(constraints.forced_prefix) for _ in range(rows)]
    lps: list = [[] for _ in range(rows)]
    done = [False] * rows
    # every active row grows by one token per iteration, so one shared
    # length counter enforces the cap even after some rows finish
    cur_len = len(constraints.forced_prefix)

    while not all(done) and cur_len < constraints.max_new_tokens:
        masked = _masked(logits, constraints.forbidden_tokens)
        log_dists = log_softmax_values(masked)
        next_tokens = np.empty(rows, dtype=np.int64)
        for r in range(rows):
            if done[r]:
                next_tokens[r] = constraints.stop_token
                continue
            if mode == "greedy":
                choice = int(np.argmax(masked[r]))
                lps[r].append(float(log_dists[r, choice]))
            else:
                row = masked[r]
                kept = np.argpartition(row, -k)[-k:]
                probs = softmax_values(row[kept])
                ki = int(rng.choice(k, p=probs))
                choice = int(kept[ki])
                lps[r].append(float(np.log(probs[ki])))
            next_tokens[r] = choice
            ids[r].append(choice)
            if choice == constraints.stop_token:
                done[r] = True
        cur_len += 1
        if all(done) or cur_len >= constraints.max_new_tokens:
            break
        types = []
        for r in range(rows):
            t, seen_sep[r] = _type_for(int(next_tokens[r]), seen_sep[r])
            types.append(t)
        logits = stepper.step(next_tokens, types)

    return [
        DecodeResult(ids=ids[r], step_log_probs=lps[r], finished=done[r],
                     score=float(sum(lps[r])))
        for r in range(rows)
    ]


def beam_search_core(stepper, constraints: DecodeConstraints, beam_width: int) -> DecodeResult:
    """Standard beam over summed log-probs; [EOS]-finished beams are frozen.

    The stepper must start with exactly one row (the study's prompt); rows
    are cloned to one per active beam as the search fans out. Returns the
    best finished beam, or the best unfinished one if none finished.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    if stepper.batch != 1:
        raise ValueError("beam search expects a single-study stepper")

    logits, seen_sep = _feed_prefix(stepper, constraints, 1)
    beams = [
        {"ids": list(constraints.forced_prefix), "lps": [], "score": 0.0,
         "seen_sep": seen_sep[0]}
    ]
    finished: list = []

    while beams and len(beams[0]["ids"]) < constraints.max_new_tokens:
        log_dists = log_softmax_values(_masked(logits, constraints.forbidden_tokens))
        candidates = []
        for b, beam in enumerate(beams):
            row = log_dists[b]
            order = np.argsort(row)[::-1][: max(beam_width, 2)]
            for tok in order:
                if not np.isfinite(row[tok]):
                    continue
                candidates.append((beam["score"] + float(row[tok]), b, int(tok)))
        if not candidates:
            break
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        chosen = candidates[:beam_width]

        new_beams = []
        parent_rows = []
        for score, b, tok in chosen:
            beam = beams[b]
            entry = {
                "ids": beam["ids"] + [tok],
                "lps": beam["lps"] + [score - beam["score"]],
                "score": score,
                "seen_sep": beam["seen_sep"],
            }
            if tok == constraints.stop_token:
                entry["finished"] = True
                finished.append(entry)
            else:
                new_beams.append(entry)
                parent_rows.append(b)
        beams = new_beams
        if not beams:
            break
        stepper.clone_rows(parent_rows)
        tokens, types = [], []
        for beam in beams:
            tok = beam["ids"][-1]
            t, beam["seen_sep"] = _type_for(tok, beam["seen_sep"])
            tokens.append(tok)
            types.append(t)
        logits = stepper.step(tokens, types)

    pool = finished if finished else beams
    best = max(pool, key=lambda b: b["score"])
    return DecodeResult(ids=best["ids"], step_log_probs=best["lps"],
                        finished=bool(best.get("finished", False)), score=best["score"])


# ---------------------------------------------------------------------------
# public single-study entry points

def greedy(params: ModelParams, prompt, constraints: DecodeConstraints) -> DecodeResult:
    stepper = ModelStepper(params, [_prompt_matrix(prompt)])
    return decode_batch(stepper, constraints, mode="greedy")[0]


def sample_top_k(params: ModelParams, prompt, constraints: DecodeConstraints,
                 k: int, rng) -> DecodeResult:
    stepper = ModelStepper(params, [_prompt_matrix(prompt)])
    return decode_batch(stepper, constraints, mode="topk", k=k, rng=rng)[0]


def beam_search(params: ModelParams, prompt, constraints: DecodeConstraints,
                beam_width: int) -> DecodeResult:
    stepper = ModelStepper(params, [_prompt_matrix(prompt)])
    return beam_search_core(stepper, constraints, beam_width)
