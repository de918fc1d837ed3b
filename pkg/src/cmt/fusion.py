"""Cross-modal fusion, classification, and the end-to-end model.

The three modality embeddings are stacked as a 3-token sequence in fixed
order (visual, acoustic, textual), tagged with learned modality-type
embeddings, and mixed by multi-head scaled dot-product attention over the
three tokens. A residual add plus layer norm (configurable) stabilizes the
fused tokens; one more encoder block refines them; the mean over the three
refined tokens feeds a linear softmax classifier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .encoders import (
    AudioWaveform,
    ModalityEmbedding,
    ParamBuilder,
    TokenSequence,
    VisualFrame,
    build_block_params,
    build_encoder_params,
    encode_audio,
    encode_text,
    encode_visual,
    encoder_block,
    get_param,
    multi_head_attention,
)
from .errors import InputError, ShapeError
from .rng import make_rng
from .tensor import Tensor

TOKEN_ORDER = ("visual", "acoustic", "textual")


@dataclass
class FusedRepresentation:
    tokens: Tensor          # [3 x D], rows in TOKEN_ORDER
    pooled: Tensor | None   # [D], mean of token rows (set by refine)


@dataclass
class EmotionDistribution:
    probs: Tensor   # [C]
    logits: Tensor  # [C], kept for loss computation
    argmax: int

    def top_label(self, labels: tuple[str, ...]) -> str:
        return labels[self.argmax]


def build_fusion_params(b: ParamBuilder, cfg: ModelConfig) -> None:
    d = cfg.embed_dim
    b.matrix("fusion.type_embed", 3, d)
    for proj in ("wq", "wk", "wv", "wo"):
        b.matrix(f"fusion.attn.{proj}", d, d)
    for bias in ("bq", "bk", "bv", "bo"):
        b.zeros(f"fusion.attn.{bias}", d)
    b.ones("fusion.ln.gamma", d)
    b.zeros("fusion.ln.beta", d)
    build_block_params(b, "fusion.refine", d, cfg.mlp_ratio * d)
    b.matrix("classifier.w", cfg.num_classes, d)
    b.zeros("classifier.b", cfg.num_classes)


def fuse(
    z_v: ModalityEmbedding,
    z_a: ModalityEmbedding,
    z_t: ModalityEmbedding,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
    training: bool = False,
    trace: dict | None = None,
) -> FusedRepresentation:
    """Joint attention over the 3-token (v, a, t) stack; returns fused tokens."""
    for emb, want in zip((z_v, z_a, z_t), TOKEN_ORDER):
        if emb.modality != want:
            raise InputError(f"expected a {want} embedding, got {emb.modality}")
        if emb.vector.shape != (cfg.embed_dim,):
            raise InputError(
                f"{want} embedding has shape {emb.vector.shape}, "
                f"expected ({cfg.embed_dim},)"
            )
    tokens = T.stack_rows([z_v.vector, z_a.vector, z_t.vector])
    if cfg.fusion_type_embeddings:
        tokens = T.add(tokens, get_param(params, "fusion.type_embed"))
    attn = multi_head_attention(
        tokens, params, "fusion.attn", cfg.num_heads,
        rng, training, cfg.dropout, trace,
    )
    if cfg.fusion_residual_norm:
        fused = T.layer_norm(T.add(tokens, attn),
                             get_param(params, "fusion.ln.gamma"),
                             get_param(params, "fusion.ln.beta"))
    else:
        fused = attn
    return FusedRepresentation(tokens=fused, pooled=None)


def refine(
    fused: FusedRepresentation,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> FusedRepresentation:
    """One encoder block over the 3 fused tokens, then mean-pool."""
    if fused.tokens.shape != (3, cfg.embed_dim):
        raise ShapeError(f"refine expects [3 x {cfg.embed_dim}], got {fused.tokens.shape}")
    z = encoder_block(fused.tokens, params, "fusion.refine", cfg.num_heads,
                      rng, training, cfg.dropout)
    return FusedRepresentation(tokens=z, pooled=T.mean_rows(z))


def classify(z_final: Tensor, w_c: Tensor, b_c: Tensor) -> EmotionDistribution:
    """logits = W_c z + b_c; probabilities via softmax; lowest-index tie-break."""
    if z_final.ndim != 1 or w_c.shape[1] != z_final.shape[0] or b_c.shape != (w_c.shape[0],):
        raise ShapeError(
            f"classify shapes inconsistent: z {z_final.shape}, W {w_c.shape}, b {b_c.shape}"
        )
    logits_mat = T.add(T.matmul(w_c, T.reshape(z_final, (z_final.shape[0], 1))),
                       T.reshape(b_c, (w_c.shape[0], 1)))
    logits = T.reshape(logits_mat, (w_c.shape[0],))
    T.check_finite(logits.data, "classifier logits")
    probs = T.reshape(T.softmax_rows(T.reshape(logits, (1, -1))), (w_c.shape[0],))
    # argmax with explicit lowest-index tie-break
    argmax = int(np.flatnonzero(probs.data == probs.data.max())[0])
    return EmotionDistribution(probs=probs, logits=logits, argmax=argmax)


def cross_entropy(pred: EmotionDistribution, label: int) -> Tensor:
    """-log p(label), computed from the stored logits via log-sum-exp."""
    return T.cross_entropy_logits(pred.logits, label)


class CmtModel:
    """Config plus a named parameter set; all math lives in module functions."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "CmtModel":
        b = ParamBuilder(make_rng(seed, 0xC0DE))
        build_encoder_params(b, cfg)
        build_fusion_params(b, cfg)
        return cls(cfg, b.params)

    def forward(
        self,
        frame: VisualFrame,
        wave: AudioWaveform,
        tokens: TokenSequence,
        rng: np.random.Generator | None = None,
        training: bool = False,
    ) -> EmotionDistribution:
        z_v = encode_visual(frame, self.params, self.cfg, rng, training)
        z_a = encode_audio(wave, self.params, self.cfg, rng, training)
        z_t = encode_text(tokens, self.params, self.cfg, rng, training)
        return self.forward_fused(z_v, z_a, z_t, rng, training)

    def forward_fused(
        self,
        z_v: ModalityEmbedding,
        z_a: ModalityEmbedding,
        z_t: ModalityEmbedding,
        rng: np.random.Generator | None = None,
        training: bool = False,
    ) -> EmotionDistribution:
        fused = fuse(z_v, z_a, z_t, self.params, self.cfg, rng, training)
        refined = refine(fused, self.params, self.cfg, rng, training)
        return classify(refined.pooled,
                        get_param(self.params, "classifier.w"),
                        get_param(self.params, "classifier.b"))

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        mine = set(self.params)
        theirs = set(arrays)
        if mine != theirs:
            missing = sorted(mine - theirs)
            extra = sorted(theirs - mine)
            raise ShapeError(
                f"parameter set mismatch: missing {missing[:4]}, unexpected {extra[:4]}"
            )
        for name, arr in arrays.items():
            if self.params[name].shape != arr.shape:
                raise ShapeError(
                    f"parameter {name} has shape {arr.shape}, "
                    f"expected {self.params[name].shape}"
                )
            self.params[name] = Tensor(arr.copy())

    def clone(self) -> "CmtModel":
        return CmtModel(self.cfg, {n: t.copy() for n, t in self.params.items()})
