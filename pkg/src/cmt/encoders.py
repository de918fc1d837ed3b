"""Modality-specific encoder streams.

Three streams map raw inputs to one shared-width embedding each:

* visual: fixed-size patch grid -> linear embedding + learned positions ->
  pre-norm transformer blocks -> mean pool -> projection
* acoustic: strided 1-D conv stack with GELU -> learned positions ->
  transformer blocks -> mean pool -> projection (plus a masked-frame
  reconstruction objective for pretraining)
* text: token embedding + learned positions -> transformer blocks ->
  position-0 (CLS) hidden state -> projection

All three produce a ``ModalityEmbedding`` carrying the vector and a
modality tag the fusion stage validates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ConfigError, InputError, ShapeError
from .tensor import Tensor

CLS_ID = 0
UNK_ID = 1
PAD_ID = 2
RESERVED_TOKENS = ("[CLS]", "[UNK]", "[PAD]")

MODALITIES = ("visual", "acoustic", "textual")


# ---------------------------------------------------------------------------
# Input types
# ---------------------------------------------------------------------------


@dataclass
class VisualFrame:
    pixels: np.ndarray  # [H, W, channels], values in [0, 1]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3:
            raise InputError(f"frame must be [H, W, channels], got {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise InputError("pixel values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass
class AudioWaveform:
    samples: np.ndarray  # [T], amplitude in [-1, 1]
    sample_rate: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InputError(f"waveform must be 1-D, got {self.samples.shape}")
        if self.sample_rate <= 0:
            raise InputError(f"sample rate must be positive, got {self.sample_rate}")
        if self.samples.size and (self.samples.min() < -1.0 or self.samples.max() > 1.0):
            raise InputError("amplitudes must lie in [-1, 1]")


@dataclass
class TokenSequence:
    token_ids: list[int]

    def __post_init__(self):
        self.token_ids = [int(t) for t in self.token_ids]
        if not self.token_ids:
            raise InputError("token sequence must be nonempty")
        if self.token_ids[0] != CLS_ID:
            raise InputError(f"position 0 must be the CLS id {CLS_ID}, got {self.token_ids[0]}")


@dataclass
class ModalityEmbedding:
    vector: Tensor  # [D]
    modality: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise InputError(f"unknown modality tag {self.modality!r}")


class Tokenizer:
    """Whitespace tokenizer over a fixed generated vocabulary.

    Ids 0/1/2 are reserved for CLS/UNK/PAD; the remaining ids map to words
    "w03", "w04", ... so any vocabulary size yields a stable word list.
    """

    def __init__(self, vocab_size: int):
        if vocab_size < len(RESERVED_TOKENS) + 1:
            raise ConfigError(f"vocab size {vocab_size} too small for reserved tokens")
        self.vocab_size = vocab_size
        self.words = list(RESERVED_TOKENS) + [
            f"w{i:02d}" for i in range(len(RESERVED_TOKENS), vocab_size)
        ]
        self.word_to_id = {w: i for i, w in enumerate(self.words)}

    def encode(self, text: str, max_len: int) -> TokenSequence:
        ids = [CLS_ID]
        for word in text.split():
            if len(ids) >= max_len:
                break
            ids.append(self.word_to_id.get(word, UNK_ID))
        while len(ids) < max_len:
            ids.append(PAD_ID)
        return TokenSequence(ids)

    def decode(self, seq: TokenSequence) -> str:
        return " ".join(self.words[i] for i in seq.token_ids if i < self.vocab_size)


# ---------------------------------------------------------------------------
# Parameter construction
# ---------------------------------------------------------------------------


class ParamBuilder:
    """Creates parameters in a fixed registration order from one generator.

    The order of ``matrix``/``zeros``/``ones`` calls defines the random
    stream layout, so two builds with the same seed and config are
    bit-identical.
    """

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Tensor] = {}

    def _register(self, name: str, arr: np.ndarray) -> None:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name}")
        self.params[name] = Tensor(arr)

    def matrix(self, name: str, rows: int, cols: int) -> None:
        limit = math.sqrt(6.0 / (rows + cols))
        self._register(name, self.rng.uniform(-limit, limit, (rows, cols)))

    def vector(self, name: str, n: int) -> None:
        limit = math.sqrt(6.0 / (1 + n))
        self._register(name, self.rng.uniform(-limit, limit, n))

    def zeros(self, name: str, *shape: int) -> None:
        self._register(name, np.zeros(shape))

    def ones(self, name: str, *shape: int) -> None:
        self._register(name, np.ones(shape))


def build_block_params(b: ParamBuilder, prefix: str, width: int, mlp_hidden: int) -> None:
    b.ones(f"{prefix}.ln1.gamma", width)
    b.zeros(f"{prefix}.ln1.beta", width)
    for proj in ("wq", "wk", "wv", "wo"):
        b.matrix(f"{prefix}.attn.{proj}", width, width)
    for bias in ("bq", "bk", "bv", "bo"):
        b.zeros(f"{prefix}.attn.{bias}", width)
    b.ones(f"{prefix}.ln2.gamma", width)
    b.zeros(f"{prefix}.ln2.beta", width)
    b.matrix(f"{prefix}.mlp.w1", width, mlp_hidden)
    b.zeros(f"{prefix}.mlp.b1", mlp_hidden)
    b.matrix(f"{prefix}.mlp.w2", mlp_hidden, width)
    b.zeros(f"{prefix}.mlp.b2", width)


def build_encoder_params(b: ParamBuilder, cfg: ModelConfig) -> None:
    """Registers all three streams' parameters in fixed order."""
    # Visual
    b.matrix("visual.embed", cfg.patch_dim(), cfg.d_v)
    b.matrix("visual.pos", cfg.num_patches(), cfg.d_v)
    for i in range(cfg.visual_blocks):
        build_block_params(b, f"visual.block{i}", cfg.d_v, cfg.mlp_ratio * cfg.d_v)
    b.matrix("visual.proj.w", cfg.d_v, cfg.embed_dim)
    b.zeros("visual.proj.b", cfg.embed_dim)

    # Acoustic
    in_ch = 1
    for i, layer in enumerate(cfg.conv_layers):
        b.matrix(f"acoustic.conv{i}.w", layer.kernel * in_ch, layer.out_channels)
        b.zeros(f"acoustic.conv{i}.b", layer.out_channels)
        in_ch = layer.out_channels
    b.matrix("acoustic.pos", cfg.audio_frames(), cfg.d_a)
    b.vector("acoustic.mask_embed", cfg.d_a)
    for i in range(cfg.audio_blocks):
        build_block_params(b, f"acoustic.block{i}", cfg.d_a, cfg.mlp_ratio * cfg.d_a)
    b.matrix("acoustic.proj.w", cfg.d_a, cfg.embed_dim)
    b.zeros("acoustic.proj.b", cfg.embed_dim)

    # Text
    b.matrix("text.embed", cfg.vocab_size, cfg.d_t)
    b.matrix("text.pos", cfg.max_text_len, cfg.d_t)
    for i in range(cfg.text_blocks):
        build_block_params(b, f"text.block{i}", cfg.d_t, cfg.mlp_ratio * cfg.d_t)
    b.matrix("text.proj.w", cfg.d_t, cfg.embed_dim)
    b.zeros("text.proj.b", cfg.embed_dim)


def get_param(params: dict[str, Tensor], name: str) -> Tensor:
    try:
        return params[name]
    except KeyError:
        raise ConfigError(f"missing parameter {name!r}") from None


# ---------------------------------------------------------------------------
# Attention and encoder blocks
# ---------------------------------------------------------------------------


def multi_head_attention(
    x: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    num_heads: int,
    rng: np.random.Generator | None,
    training: bool,
    dropout_rate: float,
    trace: dict | None = None,
) -> Tensor:
    """Joint scaled dot-product attention over the rows of ``x``.

    Per head h with width dh = d/num_heads: the head reads columns
    [h*dh, (h+1)*dh) of the shared Q/K/V projections, attends with scale
    1/sqrt(dh), and the concatenated head outputs pass through the output
    projection. ``trace``, when given, captures each head's attention
    probabilities and value rows (plain arrays) for invariant tests.
    """
    d = x.shape[1]
    if d % num_heads:
        raise ConfigError(f"width {d} not divisible by {num_heads} heads")
    dh = d // num_heads
    q = T.add(T.matmul(x, get_param(params, f"{prefix}.wq")), get_param(params, f"{prefix}.bq"))
    k = T.add(T.matmul(x, get_param(params, f"{prefix}.wk")), get_param(params, f"{prefix}.bk"))
    v = T.add(T.matmul(x, get_param(params, f"{prefix}.wv")), get_param(params, f"{prefix}.bv"))
    scale = 1.0 / math.sqrt(dh)
    heads = []
    for h in range(num_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = T.col_slice(q, lo, hi)
        kh = T.col_slice(k, lo, hi)
        vh = T.col_slice(v, lo, hi)
        scores = T.scale(T.matmul(qh, T.transpose(kh)), scale)
        probs = T.softmax_rows(scores)
        if trace is not None:
            trace.setdefault("attn_probs", []).append(probs.data.copy())
            trace.setdefault("attn_values", []).append(vh.data.copy())
        probs = T.dropout(probs, dropout_rate, training, rng)
        heads.append(T.matmul(probs, vh))
    concat = T.concat_cols(heads)
    out = T.add(T.matmul(concat, get_param(params, f"{prefix}.wo")),
                get_param(params, f"{prefix}.bo"))
    if trace is not None:
        trace["pre_residual"] = concat.data.copy()
    return out


def encoder_block(
    z: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    num_heads: int,
    rng: np.random.Generator | None,
    training: bool,
    dropout_rate: float,
    trace: dict | None = None,
) -> Tensor:
    """Pre-norm residual block: u = MSA(LN(z)) + z; out = MLP(LN(u)) + u.

    Dropout is applied to the attention probabilities and to the MLP output,
    in that order, so the generator stream layout is fixed.
    """
    attn = multi_head_attention(
        T.layer_norm(z, get_param(params, f"{prefix}.ln1.gamma"),
                     get_param(params, f"{prefix}.ln1.beta")),
        params, f"{prefix}.attn", num_heads, rng, training, dropout_rate, trace,
    )
    u = T.add(attn, z)
    normed = T.layer_norm(u, get_param(params, f"{prefix}.ln2.gamma"),
                          get_param(params, f"{prefix}.ln2.beta"))
    h = T.gelu(T.add(T.matmul(normed, get_param(params, f"{prefix}.mlp.w1")),
                     get_param(params, f"{prefix}.mlp.b1")))
    m = T.add(T.matmul(h, get_param(params, f"{prefix}.mlp.w2")),
              get_param(params, f"{prefix}.mlp.b2"))
    m = T.dropout(m, dropout_rate, training, rng)
    return T.add(m, u)


# ---------------------------------------------------------------------------
# Visual stream
# ---------------------------------------------------------------------------


def patchify(frame: VisualFrame, patch_size: int) -> Tensor:
    """Split a frame into non-overlapping P x P patches.

    Patches are ordered row-major over the patch grid; each patch is
    flattened row-major over (row, col, channel). N = H*W / P^2.
    """
    h, w, c = frame.pixels.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(f"frame {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    grid = frame.pixels.reshape(gh, patch_size, gw, patch_size, c)
    patches = grid.transpose(0, 2, 1, 3, 4).reshape(gh * gw, patch_size * patch_size * c)
    return Tensor(patches)


def embed_patches(patches: Tensor, embed: Tensor, pos: Tensor) -> Tensor:
    """z0 = patches @ E + E_pos, row-wise."""
    if pos.shape != (patches.shape[0], embed.shape[1]):
        raise ShapeError(
            f"positional table {pos.shape} does not match "
            f"{patches.shape[0]} patches of width {embed.shape[1]}"
        )
    return T.add(T.matmul(patches, embed), pos)


def encode_visual(
    frame: VisualFrame,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> ModalityEmbedding:
    if frame.height != cfg.image_height or frame.width != cfg.image_width \
            or frame.channels != cfg.image_channels:
        raise InputError(
            f"frame {frame.height}x{frame.width}x{frame.channels} does not match "
            f"configured {cfg.image_height}x{cfg.image_width}x{cfg.image_channels}"
        )
    z = embed_patches(patchify(frame, cfg.patch_size),
                      get_param(params, "visual.embed"),
                      get_param(params, "visual.pos"))
    for i in range(cfg.visual_blocks):
        z = encoder_block(z, params, f"visual.block{i}", cfg.num_heads,
                          rng, training, cfg.dropout)
    pooled = T.mean_rows(z)
    vec = T.add(T.matmul(T.reshape(pooled, (1, cfg.d_v)),
                         get_param(params, "visual.proj.w")),
                get_param(params, "visual.proj.b"))
    return ModalityEmbedding(T.reshape(vec, (cfg.embed_dim,)), "visual")


# ---------------------------------------------------------------------------
# Acoustic stream
# ---------------------------------------------------------------------------


def conv_encode_audio(wave: AudioWaveform, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Strided conv stack, GELU after every layer; output is [frames x d_a]."""
    min_len = cfg.min_audio_samples()
    if wave.samples.shape[0] < min_len:
        raise ShapeError(
            f"waveform of {wave.samples.shape[0]} samples too short; "
            f"conv stack needs at least {min_len}"
        )
    x = Tensor(wave.samples.reshape(-1, 1))
    for i, layer in enumerate(cfg.conv_layers):
        x = T.conv1d(x, get_param(params, f"acoustic.conv{i}.w"),
                     get_param(params, f"acoustic.conv{i}.b"),
                     layer.kernel, layer.stride)
        x = T.gelu(x)
    return x


def contextualize_audio(
    frames: Tensor,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    pos = get_param(params, "acoustic.pos")
    if frames.shape[0] > pos.shape[0]:
        raise ShapeError(
            f"{frames.shape[0]} frames exceed positional table of {pos.shape[0]}"
        )
    z = T.add(frames, T.row_slice(pos, 0, frames.shape[0]))
    for i in range(cfg.audio_blocks):
        z = encoder_block(z, params, f"acoustic.block{i}", cfg.num_heads,
                          rng, training, cfg.dropout)
    return z


def masked_frame_pretrain_loss(
    frames_in: Tensor,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    mask_rate: float,
    rng: np.random.Generator,
) -> Tensor:
    """Replace a random frame subset with the learned mask vector, run the
    contextualizer, and score mean squared reconstruction error at the
    masked positions against the original frames."""
    if frames_in.shape[0] < 2:
        raise ConfigError(f"need at least 2 frames to mask, got {frames_in.shape[0]}")
    if not 0.0 < mask_rate < 1.0:
        raise ConfigError(f"mask rate must be in (0, 1), got {mask_rate}")
    while True:
        mask = rng.random(frames_in.shape[0]) < mask_rate
        if mask.any():
            break
    idx = np.flatnonzero(mask)
    masked = T.replace_rows(frames_in, idx, get_param(params, "acoustic.mask_embed"))
    ctx = contextualize_audio(masked, params, cfg, rng=None, training=False)
    diff = T.sub(T.gather_rows(ctx, idx), T.gather_rows(frames_in, idx))
    return T.mean_all(T.mul(diff, diff))


def encode_audio(
    wave: AudioWaveform,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> ModalityEmbedding:
    frames = conv_encode_audio(wave, params, cfg)
    z = contextualize_audio(frames, params, cfg, rng, training)
    pooled = T.mean_rows(z)
    vec = T.add(T.matmul(T.reshape(pooled, (1, cfg.d_a)),
                         get_param(params, "acoustic.proj.w")),
                get_param(params, "acoustic.proj.b"))
    return ModalityEmbedding(T.reshape(vec, (cfg.embed_dim,)), "acoustic")


# ---------------------------------------------------------------------------
# Text stream
# ---------------------------------------------------------------------------


def encode_text(
    tokens: TokenSequence,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> ModalityEmbedding:
    ids = tokens.token_ids
    if len(ids) > cfg.max_text_len:
        raise InputError(f"sequence of {len(ids)} tokens exceeds max {cfg.max_text_len}")
    for t in ids:
        if not 0 <= t < cfg.vocab_size:
            raise InputError(f"token id {t} outside vocabulary of size {cfg.vocab_size}")
    embed = T.gather_rows(get_param(params, "text.embed"), ids)
    pos = T.row_slice(get_param(params, "text.pos"), 0, len(ids))
    z = T.add(embed, pos)
    for i in range(cfg.text_blocks):
        z = encoder_block(z, params, f"text.block{i}", cfg.num_heads,
                          rng, training, cfg.dropout)
    cls = T.row(z, 0)
    vec = T.add(T.matmul(T.reshape(cls, (1, cfg.d_t)),
                         get_param(params, "text.proj.w")),
                get_param(params, "text.proj.b"))
    return ModalityEmbedding(T.reshape(vec, (cfg.embed_dim,)), "textual")
