"""Query transformer bridging frozen image features to text.

A bank of learnable query vectors and a text stream run through the same
self-attention layers; only the query positions cross-attend to the frozen
image features, on every ``cross_attn_period``-th layer starting at layer 0.
Text therefore never touches the image features directly: everything the
text stream learns about the image must flow through the queries.

Three self-attention masks control query/text interaction per objective:
``UNIMODAL`` (streams invisible to each other), ``MULTIMODAL_CAUSAL``
(queries see queries; text sees queries plus its own past) and
``BIDIRECTIONAL`` (everything visible).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import vocab
from .autodiff import Parameter, Tensor
from .nn import (FeedForward, LayerNorm, Linear, Module, MultiHeadAttention,
                 TokenEmbedding, trunc_normal)


class AttentionMaskKind(enum.Enum):
    UNIMODAL = "unimodal"
    MULTIMODAL_CAUSAL = "multimodal_causal"
    BIDIRECTIONAL = "bidirectional"


@dataclass
class QFormerConfig:
    """Architecture hyperparameters.

    Desk defaults below; the reference-scale configuration this architecture
    is documented against uses n_query=32 and d_model=768 (see
    ``reference.REFERENCE``).
    """

    n_query: int = 8
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    cross_attn_period: int = 2
    d_image_feat: int = 32
    vocab_size: int = vocab.VOCAB_SIZE
    max_text_len: int = 24

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.cross_attn_period < 1:
            raise ValueError("cross_attn_period must be >= 1")


@dataclass
class QueryOutput:
    """Fixed-size visual representation plus optional text-side states.

    ``z`` has shape (batch, n_query, d_model) regardless of how many image
    patches went in; ``text_hidden`` is (batch, n_text, d_model) or None.
    """

    z: Tensor
    text_hidden: Tensor | None = None


def build_mask(kind: AttentionMaskKind, n_query: int, n_text: int) -> np.ndarray:
    """Boolean (n_query+n_text)^2 matrix; entry (i, j) True iff i may attend j.

    Positions are ordered queries first, then text.
    """
    if n_query < 1 or n_text < 0:
        raise ValueError("need n_query >= 1 and n_text >= 0")
    s = n_query + n_text
    allow = np.zeros((s, s), dtype=bool)
    if kind is AttentionMaskKind.UNIMODAL:
        allow[:n_query, :n_query] = True
        allow[n_query:, n_query:] = True
    elif kind is AttentionMaskKind.MULTIMODAL_CAUSAL:
        allow[:n_query, :n_query] = True
        allow[n_query:, :n_query] = True
        allow[n_query:, n_query:] = np.tril(np.ones((n_text, n_text), dtype=bool))
    elif kind is AttentionMaskKind.BIDIRECTIONAL:
        allow[:, :] = True
    else:
        raise ValueError(f"unknown mask kind {kind!r}")
    return allow


class QFormerLayer(Module):
    """Pre-norm block: normalize, sublayer, add. The identity residual path
    keeps early training fast at the small desk initialization."""

    def __init__(self, name: str, cfg: QFormerConfig, layer_idx: int,
                 rng: np.random.Generator):
        super().__init__()
        self.self_attn = MultiHeadAttention(f"{name}.self_attn", cfg.d_model, cfg.n_heads, rng)
        self.ln_attn = LayerNorm(f"{name}.ln_attn", cfg.d_model)
        self.has_cross_attn = layer_idx % cfg.cross_attn_period == 0
        if self.has_cross_attn:
            self.cross_attn = MultiHeadAttention(
                f"{name}.cross_attn", cfg.d_model, cfg.n_heads, rng, d_kv=cfg.d_image_feat)
            self.ln_cross = LayerNorm(f"{name}.ln_cross", cfg.d_model)
        self.ffn_query = FeedForward(f"{name}.ffn_query", cfg.d_model, 2 * cfg.d_model, rng)
        self.ln_query = LayerNorm(f"{name}.ln_query", cfg.d_model)
        self.ffn_text = FeedForward(f"{name}.ffn_text", cfg.d_model, 2 * cfg.d_model, rng)
        self.ln_text = LayerNorm(f"{name}.ln_text", cfg.d_model)

    def __call__(self, queries: Tensor, text: Tensor | None,
                 image_feats: Tensor | None, additive: np.ndarray):
        n_query = queries.shape[1]
        x = queries if text is None else ad.concat([queries, text], axis=1)
        normed = self.ln_attn(x)
        x = x + self.self_attn(normed, normed, additive=additive)
        if text is None:
            q = x
            t = None
        else:
            q = ad.slice_axis(x, 1, 0, n_query)
            t = ad.slice_axis(x, 1, n_query, x.shape[1])
        if self.has_cross_attn and image_feats is not None:
            q = q + self.cross_attn(self.ln_cross(q), image_feats)
        q = q + self.ffn_query(self.ln_query(q))
        if t is not None:
            t = t + self.ffn_text(self.ln_text(t))
        return q, t

    def text_only(self, text: Tensor, additive: np.ndarray) -> Tensor:
        """Text stream alone (the unimodal mask factorizes the two streams)."""
        normed = self.ln_attn(text)
        t = text + self.self_attn(normed, normed, additive=additive)
        return t + self.ffn_text(self.ln_text(t))


class QFormer(Module):
    """Query bank + shared-attention stack + the stage-1 output heads."""

    def __init__(self, cfg: QFormerConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.queries = Parameter("qformer.queries",
                                 trunc_normal(rng, (cfg.n_query, cfg.d_model)))
        self.text_embed = TokenEmbedding("qformer.text_embed", cfg.vocab_size,
                                         cfg.max_text_len, cfg.d_model, rng)
        self.layers = [QFormerLayer(f"qformer.layer{i}", cfg, i, rng)
                       for i in range(cfg.n_layers)]
        # pre-norm stacks need a final normalization before any head
        self.ln_final_query = LayerNorm("qformer.ln_final_query", cfg.d_model)
        self.ln_final_text = LayerNorm("qformer.ln_final_text", cfg.d_model)
        # two-class match head (applied per query, logits averaged)
        self.itm_head = Linear("qformer.itm_head", cfg.d_model, 2, rng)
        # next-token head over the text stream for the generation objective
        self.lm_head = Linear("qformer.lm_head", cfg.d_model, cfg.vocab_size, rng)
        # contrastive temperature; clamped to [0.001, 0.5] after each update
        self.temperature = Parameter("qformer.temperature", np.array(0.07))

    # forward passes --------------------------------------------------
    def _batched_queries(self, batch: int) -> Tensor:
        q = ad.reshape(self.queries, (1, self.cfg.n_query, self.cfg.d_model))
        return ad.add(q, np.zeros((batch, 1, 1)))

    def _text_allow(self, tokens: np.ndarray, base: np.ndarray, n_query: int) -> np.ndarray:
        """Combine the structural mask with blocking of padding keys."""
        b, length = tokens.shape
        s = n_query + length
        key_real = np.ones((b, s), dtype=bool)
        key_real[:, n_query:] = tokens != vocab.PAD
        return base[None, None, :, :] & key_real[:, None, None, :]

    def forward(self, image_feats, text_tokens, kind: AttentionMaskKind) -> QueryOutput:
        """Joint query/text pass under the given masking strategy.

        ``image_feats``: (batch, n_patch, d_image_feat) array or Tensor.
        ``text_tokens``: (batch, n_text) int array padded with PAD, or None.
        The first text token must be [DEC] under MULTIMODAL_CAUSAL and [CLS]
        otherwise.
        """
        feats = image_feats if isinstance(image_feats, Tensor) else Tensor(image_feats)
        if feats.ndim != 3 or feats.shape[2] != self.cfg.d_image_feat:
            raise ValueError("image features must be (batch, n_patch, d_image_feat)")
        batch = feats.shape[0]
        q = self._batched_queries(batch)

        if text_tokens is None or (hasattr(text_tokens, "shape") and np.size(text_tokens) == 0):
            allow = build_mask(AttentionMaskKind.BIDIRECTIONAL, self.cfg.n_query, 0)
            t = None
        else:
            tokens = np.asarray(text_tokens, dtype=np.int64)
            if tokens.ndim != 2 or tokens.shape[0] != batch:
                raise ValueError("text tokens must be (batch, n_text)")
            expected = vocab.DEC if kind is AttentionMaskKind.MULTIMODAL_CAUSAL else vocab.CLS
            if not np.all(tokens[:, 0] == expected):
                raise ValueError(
                    f"first text token must be {vocab.ALL_TOKENS[expected]} under {kind.value}")
            base = build_mask(kind, self.cfg.n_query, tokens.shape[1])
            allow = self._text_allow(tokens, base, self.cfg.n_query)
            t = self.text_embed(tokens)

        additive = ad.attention_bias(allow)
        for layer in self.layers:
            q, t = layer(q, t, feats, additive)
        return QueryOutput(z=q, text_hidden=t)

    def extract_visual(self, image_feats) -> Tensor:
        """Query-only pass feeding the frozen LM: (batch, n_query, d_model)."""
        return self.forward(image_feats, None, AttentionMaskKind.BIDIRECTIONAL).z

    def question_conditioned_extract(self, image_feats, question_tokens) -> Tensor:
        """Visual extraction with question tokens in the self-attention mix.

        The bidirectional mask lets the question steer which image content the
        queries pull through cross-attention.
        """
        tokens = np.asarray(question_tokens, dtype=np.int64)
        if tokens.size == 0 or tokens.shape[-1] == 0:
            return self.extract_visual(image_feats)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens[0, 0] != vocab.CLS:
            tokens = np.concatenate(
                [np.full((tokens.shape[0], 1), vocab.CLS, dtype=np.int64), tokens], axis=1)
        return self.forward(image_feats, tokens, AttentionMaskKind.BIDIRECTIONAL).z

    def encode_text(self, text_tokens) -> Tensor:
        """Text stream alone; identical computation to the unimodal joint pass.

        Returns hidden states (batch, n_text, d_model); position 0 is the
        [CLS] summary used for contrastive alignment.
        """
        tokens = np.asarray(text_tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise ValueError("text tokens must be (batch, n_text)")
        key_real = (tokens != vocab.PAD)[:, None, None, :]
        additive = ad.attention_bias(key_real)
        t = self.text_embed(tokens)
        for layer in self.layers:
            t = layer.text_only(t, additive)
        return t
