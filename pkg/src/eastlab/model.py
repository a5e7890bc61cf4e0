"""Conditional report generator: per-image encoder, projection, prefix-LM decoder.

Each image's patch grid is encoded independently by a small bidirectional
transformer encoder; the per-patch last hidden states are projected to the
decoder width and concatenated to form the prompt. The decoder is a
rotary-position, RMS-normalized, SwiGLU transformer over the concatenated
[prompt | report] sequence with a prefix mask: prompt positions attend
bidirectionally among themselves, report positions attend to the whole
prompt and causally to earlier report positions. Source-type embeddings mark
every position as image, findings, or impression input. No layer has a bias
term; the output head is untied from the token embedding.

Checkpoint format (version 1): magic "EASTCKPT", little-endian uint32
version, uint32 header length, UTF-8 JSON header {config, dtype, manifest:
[[name, shape], ...]}, then each tensor's raw little-endian float32 bytes in
manifest order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .vocab import SOURCE_IMAGE

CHECKPOINT_MAGIC = b"EASTCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    patches: int = 16  # per image
    feature_dim: int = 16  # raw per-patch features
    encoder_layers: int = 2
    encoder_width: int = 64
    encoder_ffn: int = 128
    decoder_layers: int = 2
    hidden: int = 128
    heads: int = 4
    ffn: int = 512
    max_positions: int = 640
    max_new_tokens: int = 512
    max_images: int = 5
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    init_scale: float = 0.02
    rope_on_prompt: bool = True  # test-only switch; see positions_for

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if (self.hidden // self.heads) % 2 != 0:
            raise ValueError("head dim must be even for rotary rotation")
        if self.encoder_width % 2 != 0:
            raise ValueError("encoder width must be even")
        need = self.max_images * self.patches + self.max_new_tokens
        if self.max_positions < need:
            raise ValueError(
                f"max_positions {self.max_positions} < max_images*patches + "
                f"max_new_tokens = {need}"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @classmethod
    def desk(cls, vocab_size: int, **overrides) -> "ModelConfig":
        return cls(vocab_size=vocab_size, **overrides)

    @classmethod
    def large(cls, vocab_size: int, **overrides) -> "ModelConfig":
        values = dict(
            decoder_layers=6,
            hidden=768,
            heads=12,
            ffn=3072,
            max_positions=2048,
            encoder_width=256,
            encoder_ffn=512,
        )
        values.update(overrides)
        return cls(vocab_size=vocab_size, **values)


@dataclass
class PromptBatch:
    """Projected image embeddings ready to prefix the decoder sequence."""

    embeds: T.Tensor  # (p_len, hidden), source-type already added
    selected: tuple  # image indices used, in feed order
    p_len: int


class ModelParams:
    """Named parameter tensors in fixed manifest order, plus the config."""

    def __init__(self, config: ModelConfig, tensors: dict):
        self.config = config
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> T.Tensor:
        return self.tensors[name]

    def names(self) -> list:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def encoder_names(self) -> list:
        return [n for n in self.tensors if n.startswith("encoder.")]

    def trainable_names(self, freeze_encoder: bool = False) -> list:
        if not freeze_encoder:
            return self.names()
        return [n for n in self.tensors if not n.startswith("encoder.")]

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {n: T.Tensor(t.values.copy(), requires_grad=True) for n, t in self.items()},
        )

    def to_dtype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.config,
            {
                n: T.Tensor(t.values.astype(dtype), requires_grad=True)
                for n, t in self.items()
            },
        )

    def manifest(self) -> list:
        return [[n, list(t.shape)] for n, t in self.items()]


def _shape_manifest(config: ModelConfig) -> list:
    """The declared (name, shape) list; init and checkpoints must match it."""
    c = config
    out = [
        ("encoder.embed", (c.feature_dim, c.encoder_width)),
        ("encoder.pos", (c.patches, c.encoder_width)),
    ]
    for i in range(c.encoder_layers):
        p = f"encoder.{i}."
        out += [
            (p + "attn_norm", (c.encoder_width,)),
            (p + "wq", (c.encoder_width, c.encoder_width)),
            (p + "wk", (c.encoder_width, c.encoder_width)),
            (p + "wv", (c.encoder_width, c.encoder_width)),
            (p + "wo", (c.encoder_width, c.encoder_width)),
            (p + "ffn_norm", (c.encoder_width,)),
            (p + "w_gate", (c.encoder_width, c.encoder_ffn)),
            (p + "w_up", (c.encoder_width, c.encoder_ffn)),
            (p + "w_down", (c.encoder_ffn, c.encoder_width)),
        ]
    out.append(("encoder.out_norm", (c.encoder_width,)))
    out.append(("proj", (c.encoder_width, c.hidden)))
    out.append(("decoder.tok_embed", (c.vocab_size, c.hidden)))
    out.append(("decoder.type_embed", (3, c.hidden)))
    for i in range(c.decoder_layers):
        p = f"decoder.{i}."
        out += [
            (p + "attn_norm", (c.hidden,)),
            (p + "wq", (c.hidden, c.hidden)),
            (p + "wk", (c.hidden, c.hidden)),
            (p + "wv", (c.hidden, c.hidden)),
            (p + "wo", (c.hidden, c.hidden)),
            (p + "ffn_norm", (c.hidden,)),
            (p + "w_gate", (c.hidden, c.ffn)),
            (p + "w_up", (c.hidden, c.ffn)),
            (p + "w_down", (c.ffn, c.hidden)),
        ]
    out.append(("decoder.out_norm", (c.hidden,)))
    out.append(("head", (c.hidden, c.vocab_size)))
    return out


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in _shape_manifest(config):
        if name.endswith("_norm"):
            values = np.ones(shape, dtype=np.float32)
        else:
            values = (rng.standard_normal(shape) * config.init_scale).astype(np.float32)
        tensors[name] = T.Tensor(values, requires_grad=True)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# attention plumbing

def build_attention_mask(p_len: int, r_len: int) -> np.ndarray:
    """Prefix-LM mask; entry [i, j] true means position i may attend to j."""
    if p_len < 1 or r_len < 0:
        raise ValueError(f"need p_len >= 1 and r_len >= 0, got {p_len}, {r_len}")
    total = p_len + r_len
    mask = np.zeros((total, total), dtype=bool)
    mask[:, :p_len] = True  # everyone sees the whole prompt
    rows = np.arange(r_len)
    tri = rows[:, None] >= rows[None, :]  # report row t sees report cols <= t
    mask[p_len:, p_len:] = tri
    return mask


def positions_for(config: ModelConfig, p_len: int, r_len: int) -> np.ndarray:
    """One sequential rotary position stream across prompt then report.

    The rope_on_prompt=False test configuration zeroes the prompt positions,
    making prompt-internal permutation invariance exact.
    """
    pos = np.arange(p_len + r_len, dtype=np.int64)
    if not config.rope_on_prompt:
        pos[:p_len] = 0
    return pos


def _attention(x, wq, wk, wv, wo, heads: int, mask: np.ndarray,
               positions: np.ndarray | None, rope_base: float):
    t_len = x.shape[0]
    head_dim = x.shape[1] // heads
    q = T.reshape(T.matmul(x, wq), (t_len, heads, head_dim))
    k = T.reshape(T.matmul(x, wk), (t_len, heads, head_dim))
    v = T.reshape(T.matmul(x, wv), (t_len, heads, head_dim))
    if positions is not None:
        q = T.rope_rotate(q, positions, base=rope_base)
        k = T.rope_rotate(k, positions, base=rope_base)
    q = T.transpose(q, (1, 0, 2))  # (heads, t, head_dim)
    k = T.transpose(k, (1, 2, 0))  # (heads, head_dim, t)
    v = T.transpose(v, (1, 0, 2))
    scores = T.scale(T.matmul(q, k), 1.0 / np.sqrt(head_dim))
    blocked = np.broadcast_to(~mask, scores.shape)
    scores = T.mask_fill(scores, blocked, -1e9)
    weights = T.softmax_lastdim(scores)
    ctx = T.matmul(weights, v)  # (heads, t, head_dim)
    ctx = T.reshape(T.transpose(ctx, (1, 0, 2)), (t_len, heads * head_dim))
    return T.matmul(ctx, wo)


def _block(x, params: ModelParams, prefix: str, heads: int, mask: np.ndarray,
           positions: np.ndarray | None, config: ModelConfig):
    p = params.tensors
    h = T.rmsnorm(x, p[prefix + "attn_norm"], eps=config.norm_eps)
    x = T.add(x, _attention(h, p[prefix + "wq"], p[prefix + "wk"], p[prefix + "wv"],
                            p[prefix + "wo"], heads, mask, positions, config.rope_base))
    h = T.rmsnorm(x, p[prefix + "ffn_norm"], eps=config.norm_eps)
    gated = T.swiglu(T.matmul(h, p[prefix + "w_gate"]), T.matmul(h, p[prefix + "w_up"]))
    return T.add(x, T.matmul(gated, p[prefix + "w_down"]))


# ---------------------------------------------------------------------------
# encoder side

def encode_one_image(params: ModelParams, grid: np.ndarray) -> T.Tensor:
    """Per-patch last hidden states of one image, shape (patches, encoder_width)."""
    c = params.config
    if grid.shape != (c.patches, c.feature_dim):
        raise T.ShapeError(f"image grid {grid.shape} != ({c.patches}, {c.feature_dim})")
    dtype = params.tensors["encoder.embed"].dtype
    x = T.matmul(T.Tensor(grid.astype(dtype)), params["encoder.embed"])
    x = T.add(x, params["encoder.pos"])
    mask = np.ones((c.patches, c.patches), dtype=bool)
    for i in range(c.encoder_layers):
        x = _block(x, params, f"encoder.{i}.", heads=1, mask=mask,
                   positions=None, config=c)
    return T.rmsnorm(x, params["encoder.out_norm"], eps=c.norm_eps)


def select_images(num_images: int, max_images: int, training: bool, rng) -> tuple:
    """Indices of the images fed to the model, in stored order."""
    if num_images < 1:
        raise ValueError("study has no images")
    if num_images <= max_images:
        return tuple(range(num_images))
    if training:
        if rng is None:
            raise ValueError("training-time image selection needs an rng")
        picked = rng.choice(num_images, size=max_images, replace=False)
        return tuple(int(i) for i in np.sort(picked))
    return tuple(range(max_images))


def project_prompt(params: ModelParams, encoder_states: T.Tensor) -> T.Tensor:
    """Project encoder states to decoder width and add the IMAGE type embedding."""
    projected = T.matmul(encoder_states, params["proj"])
    type_ids = np.full(projected.shape[0], SOURCE_IMAGE, dtype=np.int64)
    return T.add(projected, T.embedding_lookup(params["decoder.type_embed"], type_ids))


def encode_images(params: ModelParams, images, training: bool = False,
                  rng=None) -> PromptBatch:
    """Per-image encode -> project -> concatenate, honoring the image cap.

    When called under an active tape this participates in the gradient; to
    freeze the encoder, run it outside the tape and feed the detached states
    through project_prompt inside the tape.
    """
    selected = select_images(len(images), params.config.max_images, training, rng)
    states = [encode_one_image(params, np.asarray(images[i])) for i in selected]
    stacked = states[0] if len(states) == 1 else T.concat(states, axis=0)
    embeds = project_prompt(params, stacked)
    return PromptBatch(embeds=embeds, selected=selected, p_len=embeds.shape[0])


def encoder_states_numpy(params: ModelParams, images, selected) -> np.ndarray:
    """Frozen-encoder path: concatenated per-patch states as a plain array."""
    states = [encode_one_image(params, np.asarray(images[i])) for i in selected]
    return np.concatenate([s.values for s in states], axis=0)


# ---------------------------------------------------------------------------
# decoder side

def forward(params: ModelParams, prompt: PromptBatch, input_ids,
            input_type_ids) -> T.Tensor:
    """Logits over the report positions, given shifted-right input tokens.

    input_ids[t] is the token fed at report position t (so the row t logits
    predict the token at t+1 of the unshifted target); input_type_ids gives
    each fed token's section. Returns (len(input_ids), vocab) logits.
    """
    c = params.config
    ids = np.asarray(input_ids, dtype=np.int64)
    type_ids = np.asarray(input_type_ids, dtype=np.int64)
    if ids.shape != type_ids.shape or ids.ndim != 1:
        raise T.ShapeError(f"input ids {ids.shape} and types {type_ids.shape} must be equal 1-d")
    r_len = ids.shape[0]
    total = prompt.p_len + r_len
    if total > c.max_positions:
        raise T.ShapeError(f"sequence length {total} exceeds max positions {c.max_positions}")

    tok = T.embedding_lookup(params["decoder.tok_embed"], ids)
    typ = T.embedding_lookup(params["decoder.type_embed"], type_ids)
    report_x = T.add(tok, typ)
    x = T.concat([prompt.embeds, report_x], axis=0) if r_len else prompt.embeds

    mask = build_attention_mask(prompt.p_len, r_len)
    positions = positions_for(c, prompt.p_len, r_len)
    for i in range(c.decoder_layers):
        x = _block(x, params, f"decoder.{i}.", heads=c.heads, mask=mask,
                   positions=positions, config=c)
    x = T.rmsnorm(x, params["decoder.out_norm"], eps=c.norm_eps)
    report_rows = T.slice_block(x, (prompt.p_len, 0), (r_len, c.hidden))
    return T.matmul(report_rows, params["head"])


def log_prob_of(params: ModelParams, prompt: PromptBatch, sequence_ids,
                type_ids=None):
    """Mean per-token log-probability of a [BOS]-led sequence, plus log-dists.

    Returns (mean_log_prob, log_dists) where log_dists has one full
    log-distribution row per generated position (needed for the entropy
    term). Both are tape-connected tensors.
    """
    from .vocab import BOS_ID, section_type_ids_for

    seq = [int(i) for i in sequence_ids]
    if len(seq) < 2:
        raise ValueError("sequence must contain [BOS] plus at least one generated token")
    if seq[0] != BOS_ID:
        raise ValueError("sequence must start with [BOS]")
    if type_ids is None:
        type_ids = section_type_ids_for(seq)
    logits = forward(params, prompt, seq[:-1], list(type_ids)[:-1])
    log_dists = T.log_softmax_lastdim(logits)
    picked = T.take_lastdim(log_dists, np.asarray(seq[1:], dtype=np.int64))
    return T.mean_all(picked), log_dists


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(params: ModelParams, path) -> None:
    header = {
        "config": asdict(params.config),
        "dtype": "<f4",
        "manifest": params.manifest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, tensor in params.items():
            fh.write(np.ascontiguousarray(tensor.values, dtype="<f4").tobytes())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {version} != {CHECKPOINT_VERSION}")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        config = ModelConfig(**header["config"])
        declared = {name: tuple(shape) for name, shape in _shape_manifest(config)}
        tensors = {}
        for name, shape in header["manifest"]:
            shape = tuple(shape)
            if declared.get(name) != shape:
                raise CheckpointError(
                    f"manifest entry {name} {shape} does not match declared "
                    f"{declared.get(name)}"
                )
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 4)
            if len(raw) != count * 4:
                raise CheckpointError(f"truncated tensor data for {name}")
            values = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            tensors[name] = T.Tensor(values, requires_grad=True)
        if set(tensors) != set(declared):
            missing = sorted(set(declared) - set(tensors))
            raise CheckpointError(f"checkpoint missing tensors {missing}")
        leftover = fh.read(1)
        if leftover:
            raise CheckpointError("trailing bytes after declared tensors")
    return ModelParams(config, tensors)
