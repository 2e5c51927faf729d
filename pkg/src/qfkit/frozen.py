"""Frozen endpoints and the stage-2 generative machinery.

The image encoder is a fixed random projection of cell attributes plus a
positional table: deterministic, informative, never trained. The toy
language models are small transformers pretrained on the text-only corpus
and then frozen; gradients still flow through them into the visual prompts,
the projection layer and the query transformer, but their own weights are
never updated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import vocab
from .autodiff import Parameter, Tensor
from .data import PairDataset, SyntheticImage
from .nn import (FeedForward, LayerNorm, Linear, Module, MultiHeadAttention,
                 TokenEmbedding, parameter_hash)

N_CELL_STATES = 1 + len(vocab.SHAPES) * len(vocab.COLORS)  # empty + shape*color


class FrozenImageEncoder(Module):
    """Deterministic per-patch features for attribute grids.

    Each cell becomes one patch: a fixed random vector for its (shape, color)
    state plus a fixed positional vector. ``tap`` selects the raw per-patch
    features ("penultimate", default) or the same features passed through a
    fixed orthogonal mixing matrix ("final").
    """

    def __init__(self, grid_size: int = 2, d_image_feat: int = 32,
                 seed: int = 7700, tap: str = "penultimate"):
        super().__init__()
        if tap not in ("penultimate", "final"):
            raise ValueError("tap must be 'penultimate' or 'final'")
        self.grid_size = grid_size
        self.d_image_feat = d_image_feat
        self.seed = seed
        self.tap = tap
        rng = np.random.default_rng(seed)
        n_patch = grid_size * grid_size
        if N_CELL_STATES + n_patch > d_image_feat:
            raise ValueError("d_image_feat too small for orthogonal attribute features")
        # Random orthonormal directions: cell states and patch positions get
        # disjoint, cleanly separable subspaces. Scaled so feature entries
        # have roughly unit variance.
        basis, _ = np.linalg.qr(rng.standard_normal((d_image_feat, d_image_feat)))
        scale = np.sqrt(d_image_feat / 2.0)
        self.state_table = Parameter(
            "image_encoder.state_table",
            basis[:N_CELL_STATES] * scale, frozen=True)
        self.pos_table = Parameter(
            "image_encoder.pos_table",
            basis[N_CELL_STATES:N_CELL_STATES + n_patch] * scale, frozen=True)
        mixing, _ = np.linalg.qr(rng.standard_normal((d_image_feat, d_image_feat)))
        self.mixing = Parameter("image_encoder.mixing", mixing, frozen=True)

    @property
    def n_patch(self) -> int:
        return self.grid_size * self.grid_size

    def _state_ids(self, image: SyntheticImage) -> np.ndarray:
        ids = np.zeros(self.n_patch, dtype=np.int64)
        for idx, cell in enumerate(image.cells):
            if cell is not None:
                shape_i = vocab.SHAPES.index(cell[0])
                color_i = vocab.COLORS.index(cell[1])
                ids[idx] = 1 + shape_i * len(vocab.COLORS) + color_i
        return ids

    def encode(self, image: SyntheticImage) -> np.ndarray:
        """(n_patch, d_image_feat) array; bit-identical for the same image."""
        if image.grid_size != self.grid_size:
            raise ValueError(
                f"encoder built for grid {self.grid_size}, image has {image.grid_size}")
        feats = self.state_table.data[self._state_ids(image)] + self.pos_table.data
        if self.tap == "final":
            feats = feats @ self.mixing.data
        return feats

    def encode_batch(self, images: list[SyntheticImage]) -> np.ndarray:
        return np.stack([self.encode(img) for img in images])


class ProjectionLayer(Module):
    """Trainable affine map from query outputs to the LM embedding width."""

    def __init__(self, d_model: int, d_llm: int, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.fc = Linear("projection.fc", d_model, d_llm, rng)

    def __call__(self, z: Tensor) -> Tensor:
        return self.fc(z)


@dataclass
class ToyLmConfig:
    kind: str = "decoder"  # decoder | encdec
    vocab_size: int = vocab.VOCAB_SIZE
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4      # decoder stack depth (encdec uses n_enc + n_dec)
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 128
    max_len: int = 48

    def __post_init__(self):
        if self.kind not in ("decoder", "encdec"):
            raise ValueError("kind must be 'decoder' or 'encdec'")


class _DecoderBlock(Module):
    def __init__(self, name: str, cfg: ToyLmConfig, rng, cross: bool):
        super().__init__()
        self.self_attn = MultiHeadAttention(f"{name}.self_attn", cfg.d_model, cfg.n_heads, rng)
        self.ln_attn = LayerNorm(f"{name}.ln_attn", cfg.d_model)
        self.has_cross = cross
        if cross:
            self.cross_attn = MultiHeadAttention(f"{name}.cross_attn", cfg.d_model,
                                                 cfg.n_heads, rng)
            self.ln_cross = LayerNorm(f"{name}.ln_cross", cfg.d_model)
        self.ffn = FeedForward(f"{name}.ffn", cfg.d_model, cfg.d_ff, rng)
        self.ln_ffn = LayerNorm(f"{name}.ln_ffn", cfg.d_model)

    def __call__(self, x, additive, memory=None, memory_additive=None):
        x = self.ln_attn.residual(x, self.self_attn(x, x, additive=additive))
        if self.has_cross and memory is not None:
            x = self.ln_cross.residual(x, self.cross_attn(x, memory, additive=memory_additive))
        return self.ln_ffn.residual(x, self.ffn(x))


def _causal_bias(batch: int, n_prompt: int, tokens: np.ndarray | None) -> np.ndarray:
    length = n_prompt + (tokens.shape[1] if tokens is not None else 0)
    allow = np.tril(np.ones((length, length), dtype=bool))
    key_real = np.ones((batch, length), dtype=bool)
    if tokens is not None:
        key_real[:, n_prompt:] = tokens != vocab.PAD
    return ad.attention_bias(allow[None, None, :, :] & key_real[:, None, None, :])


class ToyDecoderLM(Module):
    """Causal transformer LM; prompts are vectors prepended to text embeds."""

    def __init__(self, cfg: ToyLmConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.embed = TokenEmbedding("lm.embed", cfg.vocab_size, cfg.max_len, cfg.d_model, rng)
        self.blocks = [_DecoderBlock(f"lm.block{i}", cfg, rng, cross=False)
                       for i in range(cfg.n_layers)]
        self.head = Linear("lm.head", cfg.d_model, cfg.vocab_size, rng)

    @property
    def d_llm(self) -> int:
        return self.cfg.d_model

    def _positions(self, start: int, length: int) -> Tensor:
        if start + length > self.cfg.max_len:
            raise ValueError(f"sequence length {start + length} exceeds LM context "
                             f"{self.cfg.max_len}")
        return ad.slice_axis(self.embed.positions, 0, start, start + length)

    def hidden_states(self, prompts: Tensor | None, tokens: np.ndarray | None) -> Tensor:
        """Run the stack over [prompts; token embeddings] with causal masking."""
        parts = []
        n_prompt = 0
        if prompts is not None:
            n_prompt = prompts.shape[1]
            parts.append(prompts)
        if tokens is not None:
            tokens = np.asarray(tokens, dtype=np.int64)
            parts.append(ad.embedding(self.embed.tokens, tokens))
        if not parts:
            raise ValueError("need prompts, tokens or both")
        x = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
        x = x + self._positions(0, x.shape[1])
        additive = _causal_bias(x.shape[0], n_prompt, tokens)
        for block in self.blocks:
            x = block(x, additive)
        return x

    def logits(self, prompts: Tensor | None, tokens: np.ndarray | None) -> Tensor:
        return self.head(self.hidden_states(prompts, tokens))

    def lm_loss(self, tokens: np.ndarray) -> Tensor:
        """Plain next-token loss: position i predicts token i+1 (PAD ignored)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        targets = np.full_like(tokens, vocab.PAD)
        targets[:, :-1] = tokens[:, 1:]
        return ad.cross_entropy(self.logits(None, tokens), targets, ignore_index=vocab.PAD)

    def next_logprobs(self, prompts: Tensor | None, tokens_so_far: list[int]) -> np.ndarray:
        """Log-probabilities of the next token given prompts + generated prefix."""
        with ad.no_grad():
            toks = np.asarray([tokens_so_far], dtype=np.int64) if tokens_so_far else None
            logits = self.logits(prompts, toks).data[0, -1]
        shifted = logits - logits.max()
        return shifted - np.log(np.exp(shifted).sum())


def decoder_lm_stage2_loss(lm: ToyDecoderLM, visual_prompts: Tensor,
                           text_tokens: np.ndarray) -> Tensor:
    """Next-token loss on text positions only, conditioned on prepended prompts.

    The last prompt position predicts the first text token; prompt positions
    themselves carry no loss. Gradients flow through the frozen LM into the
    prompts (and whatever produced them).
    """
    tokens = np.asarray(text_tokens, dtype=np.int64)
    n_prompt = visual_prompts.shape[1]
    batch, length = tokens.shape
    logits = lm.logits(visual_prompts, tokens)
    targets = np.full((batch, n_prompt + length), vocab.PAD, dtype=np.int64)
    targets[:, n_prompt - 1:n_prompt - 1 + length] = tokens
    return ad.cross_entropy(logits, targets, ignore_index=vocab.PAD)


class ToyEncDecLM(Module):
    """Bidirectional encoder + causal cross-attending decoder."""

    def __init__(self, cfg: ToyLmConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.enc_embed = TokenEmbedding("lm.enc_embed", cfg.vocab_size, cfg.max_len,
                                        cfg.d_model, rng)
        self.enc_blocks = [_DecoderBlock(f"lm.enc_block{i}", cfg, rng, cross=False)
                           for i in range(cfg.n_enc_layers)]
        self.dec_embed = TokenEmbedding("lm.dec_embed", cfg.vocab_size, cfg.max_len,
                                        cfg.d_model, rng)
        self.dec_blocks = [_DecoderBlock(f"lm.dec_block{i}", cfg, rng, cross=True)
                           for i in range(cfg.n_dec_layers)]
        self.head = Linear("lm.head", cfg.d_model, cfg.vocab_size, rng)

    @property
    def d_llm(self) -> int:
        return self.cfg.d_model

    def encode(self, prompts: Tensor | None, tokens: np.ndarray | None):
        """Encoder memory over [prompts; token embeddings], fully visible."""
        parts = []
        n_prompt = 0
        if prompts is not None:
            n_prompt = prompts.shape[1]
            parts.append(prompts)
        if tokens is not None and np.size(tokens) > 0:
            tokens = np.asarray(tokens, dtype=np.int64)
            parts.append(ad.embedding(self.enc_embed.tokens, tokens))
        else:
            tokens = None
        if not parts:
            raise ValueError("encoder needs prompts, tokens or both")
        x = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
        if x.shape[1] > self.cfg.max_len:
            raise ValueError("encoder input exceeds LM context")
        pos = ad.slice_axis(self.enc_embed.positions, 0, 0, x.shape[1])
        x = x + pos
        batch, length = x.shape[0], x.shape[1]
        key_real = np.ones((batch, length), dtype=bool)
        if tokens is not None:
            key_real[:, n_prompt:] = tokens != vocab.PAD
        additive = ad.attention_bias(key_real[:, None, None, :])
        for block in self.enc_blocks:
            x = block(x, additive)
        return x, key_real

    def decode(self, dec_tokens: np.ndarray, memory: Tensor,
               memory_real: np.ndarray) -> Tensor:
        dec_tokens = np.asarray(dec_tokens, dtype=np.int64)
        x = self.dec_embed(dec_tokens)
        additive = _causal_bias(x.shape[0], 0, dec_tokens)
        memory_additive = ad.attention_bias(memory_real[:, None, None, :])
        for block in self.dec_blocks:
            x = block(x, additive, memory, memory_additive)
        return self.head(x)

    def seq2seq_loss(self, prompts: Tensor | None, enc_tokens: np.ndarray | None,
                     target_tokens: np.ndarray) -> Tensor:
        """Cross-entropy on target tokens given the encoded input.

        The decoder is teacher-forced from a [DEC] start token; every row of
        ``target_tokens`` must end its real content with [EOS] already.
        """
        targets = np.asarray(target_tokens, dtype=np.int64)
        start = np.full((targets.shape[0], 1), vocab.DEC, dtype=np.int64)
        dec_in = np.concatenate([start, targets[:, :-1]], axis=1)
        memory, memory_real = self.encode(prompts, enc_tokens)
        logits = self.decode(dec_in, memory, memory_real)
        return ad.cross_entropy(logits, targets, ignore_index=vocab.PAD)

    def next_logprobs_with_memory(self, memory, memory_real,
                                  tokens_so_far: list[int]) -> np.ndarray:
        with ad.no_grad():
            dec_in = np.asarray([[vocab.DEC] + list(tokens_so_far)], dtype=np.int64)
            logits = self.decode(dec_in, memory, memory_real).data[0, -1]
        shifted = logits - logits.max()
        return shifted - np.log(np.exp(shifted).sum())


def split_prefix_suffix(tokens: list[int], rng: np.random.Generator):
    """Split uniformly at an index in [1, L-1]; both parts non-empty."""
    if len(tokens) < 2:
        raise ValueError("need at least 2 tokens to split")
    idx = int(rng.integers(1, len(tokens)))
    return list(tokens[:idx]), list(tokens[idx:])


def prefix_lm_stage2_loss(lm: ToyEncDecLM, visual_prompts: Tensor | None,
                          prefix_tokens: np.ndarray | None,
                          suffix_tokens: np.ndarray) -> Tensor:
    """Encoder sees [prompts; prefix]; decoder is scored on the suffix.

    ``suffix_tokens`` is a PAD-padded batch whose real content must end with
    [EOS]; an empty prefix is allowed (prompts only).
    """
    suffix = np.asarray(suffix_tokens, dtype=np.int64)
    if suffix.size == 0 or np.all(suffix == vocab.PAD):
        raise ValueError("suffix must be non-empty")
    return lm.seq2seq_loss(visual_prompts, prefix_tokens, suffix)


@dataclass
class FrozenBundle:
    """Frozen image encoder + frozen toy LM + trainable projection layer."""

    image_encoder: FrozenImageEncoder
    lm: Module  # ToyDecoderLM | ToyEncDecLM
    projection: ProjectionLayer

    def lm_hash(self) -> str:
        return parameter_hash(self.lm.parameters())

    def encoder_hash(self) -> str:
        return parameter_hash(self.image_encoder.parameters())
