"""The three jointly optimized stage-1 losses.

* contrastive (itc): symmetric InfoNCE over in-batch negatives; the
  image-text similarity is the max over queries of the cosine between each
  query output and the text [CLS] embedding.
* generation (itg): next-token cross-entropy on the caption under the
  multimodal causal mask, so text can only see the image through the queries.
* matching (itm): binary match/non-match classification with per-query
  logits averaged into one score, over positives plus mined hard negatives.

All three run over the same parameters; only the attention mask differs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import vocab
from .autodiff import Tensor
from .qformer import AttentionMaskKind, QFormer

DEFAULT_WEIGHTS = {"itc": 1.0, "itg": 1.0, "itm": 1.0}

# Hard negatives are mined from raw (untempered) similarities; the
# temperature only scales the contrastive logits.
HARD_NEGATIVE_SOURCE = "raw"


def image_text_similarity(z: Tensor, t: Tensor) -> Tensor:
    """Single-pair similarity: max over queries of cosine(z_q, t)."""
    zn = ad.l2_normalize(z)
    tn = ad.l2_normalize(ad.reshape(t, (1, t.size)))
    cosines = ad.matmul(zn, ad.transpose(tn))  # (n_query, 1)
    return ad.reshape(ad.reduce_max(cosines, axis=0), ())


def similarity_matrix(z_batch: Tensor, t_batch: Tensor) -> Tensor:
    """(B, B) matrix: entry (i, j) = max over queries of cos(z_q(i), t(j))."""
    zn = ad.l2_normalize(z_batch)                       # (B, nq, d)
    tn = ad.l2_normalize(t_batch)                       # (B, d)
    per_query = ad.matmul(zn, ad.transpose(tn, (1, 0)))  # (B, nq, B)
    return ad.reduce_max(per_query, axis=1)


def itc_loss(sim: Tensor, temperature: Tensor) -> Tensor:
    """Symmetric InfoNCE over the tempered similarity matrix, diagonal = positives."""
    b = sim.shape[0]
    if b < 2:
        raise ValueError("contrastive loss needs a batch of at least 2 pairs")
    logits = ad.mul(sim, ad.power(temperature, -1.0))
    targets = np.arange(b)
    image_to_text = ad.cross_entropy(logits, targets)
    text_to_image = ad.cross_entropy(ad.transpose(logits, (1, 0)), targets)
    return ad.scale(image_to_text + text_to_image, 0.5)


def itg_loss(model: QFormer, image_feats, captions: list[list[int]]) -> Tensor:
    """Teacher-forced caption loss under the multimodal causal mask."""
    if any(len(c) == 0 for c in captions):
        raise ValueError("cannot compute generation loss on an empty caption")
    inputs = vocab.pad_batch(captions, prefix=vocab.DEC)
    targets = np.full_like(inputs, vocab.PAD)
    targets[:, :-1] = inputs[:, 1:]
    out = model.forward(image_feats, inputs, AttentionMaskKind.MULTIMODAL_CAUSAL)
    logits = model.lm_head(out.text_hidden)
    return ad.cross_entropy(logits, targets, ignore_index=vocab.PAD)


@dataclass
class ItmBatch:
    """3B (image_idx, text_idx, label) examples: per original pair one
    positive, one mined negative text for the image, one mined negative image
    for the text."""

    image_idx: np.ndarray
    text_idx: np.ndarray
    labels: np.ndarray  # 1 = match, 0 = non-match


def sample_hard_negatives(sim: np.ndarray, rng: np.random.Generator) -> ItmBatch:
    """Mine in-batch negatives with probability softmax(similarity), self excluded."""
    b = sim.shape[0]
    if b < 2:
        raise ValueError("hard negative mining needs a batch of at least 2 pairs")
    neg_text = np.empty(b, dtype=np.int64)
    neg_image = np.empty(b, dtype=np.int64)
    eye = np.eye(b, dtype=bool)
    for i in range(b):
        row = np.where(eye[i], -np.inf, sim[i])
        p = np.exp(row - row[~eye[i]].max())
        p /= p.sum()
        neg_text[i] = rng.choice(b, p=p)
    for j in range(b):
        col = np.where(eye[:, j], -np.inf, sim[:, j])
        p = np.exp(col - col[~eye[:, j]].max())
        p /= p.sum()
        neg_image[j] = rng.choice(b, p=p)
    image_idx = np.concatenate([np.arange(b), np.arange(b), neg_image])
    text_idx = np.concatenate([np.arange(b), neg_text, np.arange(b)])
    labels = np.concatenate([np.ones(b, dtype=np.int64), np.zeros(2 * b, dtype=np.int64)])
    return ItmBatch(image_idx=image_idx, text_idx=text_idx, labels=labels)


def itm_loss(model: QFormer, image_feats: np.ndarray, captions: list[list[int]],
             batch: ItmBatch) -> Tensor:
    """Two-class cross-entropy on the query-averaged match logits."""
    feats = np.asarray(image_feats)[batch.image_idx]
    texts = [captions[i] for i in batch.text_idx]
    tokens = vocab.pad_batch(texts, prefix=vocab.CLS)
    out = model.forward(feats, tokens, AttentionMaskKind.BIDIRECTIONAL)
    per_query_logits = model.itm_head(out.z)            # (3B, nq, 2)
    logits = ad.reduce_mean(per_query_logits, axis=1)   # (3B, 2)
    return ad.cross_entropy(logits, batch.labels)


def stage1_total_loss(model: QFormer, image_feats: np.ndarray,
                      captions: list[list[int]], rng: np.random.Generator,
                      weights: dict[str, float] | None = None,
                      fixed_negatives: ItmBatch | None = None,
                      ) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the enabled objectives plus a per-term breakdown.

    The similarity matrix is computed once and reused for mining. Mined
    negatives are treated as constants (no gradient through the sampling);
    pass ``fixed_negatives`` to pin them, e.g. for finite-difference checks.
    """
    weights = dict(DEFAULT_WEIGHTS if weights is None else weights)
    b = len(captions)
    if b < 2:
        raise ValueError("stage-1 loss needs a batch of at least 2 pairs")

    terms: dict[str, Tensor] = {}
    sim = None
    if weights.get("itc", 0.0) != 0.0 or weights.get("itm", 0.0) != 0.0:
        z = model.extract_visual(image_feats)
        cls_tokens = vocab.pad_batch(captions, prefix=vocab.CLS)
        hidden = model.encode_text(cls_tokens)
        t = ad.reshape(ad.slice_axis(hidden, 1, 0, 1), (b, model.cfg.d_model))
        sim = similarity_matrix(z, t)
    if weights.get("itc", 0.0) != 0.0:
        terms["itc"] = itc_loss(sim, model.temperature)
    if weights.get("itg", 0.0) != 0.0:
        terms["itg"] = itg_loss(model, image_feats, captions)
    if weights.get("itm", 0.0) != 0.0:
        negatives = fixed_negatives
        if negatives is None:
            negatives = sample_hard_negatives(sim.data, rng)
        terms["itm"] = itm_loss(model, image_feats, captions, negatives)

    if not terms:
        raise ValueError("no objectives enabled")
    total = None
    for name, term in terms.items():
        weighted = ad.scale(term, weights[name])
        total = weighted if total is None else total + weighted
    breakdown = {name: float(term.data) for name, term in terms.items()}
    return total, breakdown
