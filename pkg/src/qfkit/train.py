"""Two-stage training loops, toy-LM pretraining, and run orchestration.

Every run is a deterministic function of (config, dataset, checkpoint): one
RNG drives batch sampling, caption-variant choice, negative mining and
prefix splits, and its state rides along in the checkpoint so a resumed run
reproduces the uninterrupted one bit for bit.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import objectives, vocab
from .autodiff import NumericalError
from .checkpoint import (Checkpoint, TrainState, load_checkpoint, load_into,
                         rng_from_json, rng_state_to_json, save_checkpoint)
from .data import PairDataset
from .frozen import (FrozenImageEncoder, ProjectionLayer, ToyDecoderLM,
                     ToyEncDecLM, ToyLmConfig, decoder_lm_stage2_loss,
                     prefix_lm_stage2_loss, split_prefix_suffix)
from .nn import parameter_hash
from .optim import AdamWState, TrainConfig, adamw_step, clip_global_norm, lr_schedule
from .qformer import QFormer, QFormerConfig

ENCODER_SEED = 7700  # the frozen image encoder is part of the world, not the run
TEMPERATURE_RANGE = (0.001, 0.5)


class TrainingDiverged(NumericalError):
    """Loss became non-finite; message carries step/lr/term diagnostics."""


class MetricsLog:
    """Append-only tab-separated per-step log with full-precision floats."""

    def __init__(self, columns: list[str], path: str | None = None):
        self.columns = columns
        self.path = path
        self.rows: list[dict] = []
        self._fh = open(path, "w", encoding="utf-8") if path else None
        self._write("# " + "\t".join(columns))

    def _write(self, line: str) -> None:
        if self._fh:
            self._fh.write(line + "\n")
            self._fh.flush()

    def log(self, **values) -> None:
        self.rows.append(values)
        cells = []
        for col in self.columns:
            v = values[col]
            cells.append(repr(v) if isinstance(v, float) else str(v))
        self._write("\t".join(cells))

    def comment(self, text: str) -> None:
        self._write(f"# {text}")

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


def _trainable(params):
    return [p for p in params if not p.frozen]


def _check_finite(loss_value: float, step: int, lr: float, breakdown: dict) -> None:
    if not np.isfinite(loss_value):
        raise TrainingDiverged(
            f"non-finite loss at step {step} (lr={lr:g}, terms={breakdown})")


def quick_retrieval_r1(model: QFormer, feats: np.ndarray,
                       captions: list[list[int]]) -> tuple[float, float]:
    """Stage-A (similarity only) R@1 in both directions, for progress logging."""
    with ad.no_grad():
        z = model.extract_visual(feats)
        hidden = model.encode_text(vocab.pad_batch(captions, prefix=vocab.CLS))
        t = ad.slice_axis(hidden, 1, 0, 1)
        sim = objectives.similarity_matrix(
            z, ad.reshape(t, (len(captions), model.cfg.d_model))).data
    i2t = float((sim.argmax(axis=1) == np.arange(len(captions))).mean())
    t2i = float((sim.argmax(axis=0) == np.arange(len(captions))).mean())
    return i2t, t2i


@dataclass
class Stage1Run:
    model: QFormer
    encoder: FrozenImageEncoder
    config: TrainConfig
    metrics: MetricsLog
    final_loss: float | None = None


def _config_echo(config: TrainConfig, extra: dict | None = None) -> dict:
    echo = asdict(config)
    echo.update(extra or {})
    return echo


def train_stage1(dataset: PairDataset, config: TrainConfig,
                 out_ckpt: str | None = None, log_path: str | None = None,
                 resume_from: str | None = None, skip_training: bool = False,
                 val_every: int = 500,
                 qformer_config: QFormerConfig | None = None) -> Stage1Run:
    """Representation-learning stage against the frozen image encoder.

    ``skip_training`` emits a randomly initialized checkpoint (tagged
    ``stage1=skipped``) for the no-representation-learning ablation.
    """
    if config.stage != 1:
        raise ValueError("config.stage must be 1")
    qcfg = qformer_config or QFormerConfig()
    encoder = FrozenImageEncoder(dataset.grid_size, qcfg.d_image_feat, seed=ENCODER_SEED)
    model = QFormer(qcfg, seed=config.seed)
    weights = config.objectives
    columns = ["step", "lr", "loss_total"] + [f"loss_{k}" for k in weights]
    metrics = MetricsLog(columns, log_path)
    run = Stage1Run(model=model, encoder=encoder, config=config, metrics=metrics)

    opt = AdamWState()
    rng = np.random.default_rng(config.seed)
    start_step = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        load_into(model.parameters() + encoder.parameters(), ckpt)
        if ckpt.train_state is None:
            raise ValueError("cannot resume: checkpoint has no training state")
        opt = ckpt.train_state.optimizer
        rng = rng_from_json(ckpt.train_state.rng_state)
        start_step = ckpt.train_state.step

    extra = {"qformer": asdict(qcfg), "encoder_seed": ENCODER_SEED,
             "stage1": "skipped" if skip_training else "trained"}

    if skip_training:
        _save_stage1(out_ckpt, model, encoder, config, extra, opt, rng, 0)
        metrics.close()
        return run

    feats_all = encoder.encode_batch([item.image for item in dataset.items])
    train_idx = np.array(dataset.split_indices("train"))
    val_idx = dataset.split_indices("val")
    val_feats = feats_all[val_idx]
    val_caps = [dataset.items[i].captions[0] for i in val_idx]
    params = model.parameters()

    for step in range(start_step + 1, config.total_steps + 1):
        lr = lr_schedule(step, config)
        idx = rng.choice(train_idx, size=config.batch_size, replace=False)
        variants = rng.integers(0, 2, size=config.batch_size)
        caps = [dataset.items[i].captions[v] for i, v in zip(idx, variants)]
        try:
            total, breakdown = objectives.stage1_total_loss(
                model, feats_all[idx], caps, rng, weights=weights)
        except NumericalError as exc:
            raise TrainingDiverged(f"step {step} (lr={lr:g}): {exc}") from exc
        loss_value = float(total.data)
        _check_finite(loss_value, step, lr, breakdown)
        total.backward()
        if config.grad_clip > 0:
            clip_global_norm(params, config.grad_clip)
        if lr > 0:  # the stage-1 cosine floor reaches exactly 0 at the last step
            adamw_step(params, opt, lr, config)
            model.temperature.data = np.clip(model.temperature.data, *TEMPERATURE_RANGE)
        model.zero_grad()
        metrics.log(step=step, lr=lr, loss_total=loss_value,
                    **{f"loss_{k}": v for k, v in breakdown.items()})
        if val_every and (step % val_every == 0 or step == config.total_steps):
            i2t, t2i = quick_retrieval_r1(model, val_feats, val_caps)
            metrics.comment(f"val step={step} r1_i2t={i2t:.4f} r1_t2i={t2i:.4f}")
        run.final_loss = loss_value

    _save_stage1(out_ckpt, model, encoder, config, extra, opt, rng, config.total_steps)
    metrics.close()
    return run


def _save_stage1(out_ckpt, model, encoder, config, extra, opt, rng, step):
    if out_ckpt is None:
        return
    save_checkpoint(
        out_ckpt, model.parameters() + encoder.parameters(),
        _config_echo(config, extra),
        TrainState(step=step, optimizer=opt, rng_state=rng_state_to_json(rng)))


def load_stage1_model(path: str) -> tuple[QFormer, FrozenImageEncoder, dict]:
    """Rebuild the query transformer and world encoder from a checkpoint."""
    ckpt = load_checkpoint(path)
    qcfg = QFormerConfig(**ckpt.config["qformer"])
    model = QFormer(qcfg, seed=int(ckpt.config.get("seed", 0)))
    grid_size = _grid_from_ckpt(ckpt)
    encoder = FrozenImageEncoder(grid_size, qcfg.d_image_feat,
                                 seed=int(ckpt.config.get("encoder_seed", ENCODER_SEED)))
    load_into(model.parameters() + encoder.parameters(), ckpt)
    return model, encoder, ckpt.config


def _grid_from_ckpt(ckpt: Checkpoint) -> int:
    n_patch = ckpt.params["image_encoder.pos_table"].shape[0]
    return int(round(n_patch ** 0.5))


# toy LM pretraining --------------------------------------------------

@dataclass
class LmPretrainConfig:
    kind: str = "decoder"
    steps: int = 2500
    batch_size: int = 16
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    seed: int = 0
    perplexity_threshold: float = 1.35


@dataclass
class LmPretrainReport:
    kind: str
    steps: int
    initial_loss: float
    final_corpus_loss: float
    perplexity: float
    threshold: float
    reached_threshold: bool

    def summary(self) -> str:
        status = "ok" if self.reached_threshold else "BELOW TARGET"
        return (f"lm[{self.kind}] steps={self.steps} ppl={self.perplexity:.3f} "
                f"(threshold {self.threshold}) {status}")


def _lm_corpus_loss(lm, lines_tokens: list[list[int]], kind: str,
                    rng: np.random.Generator, batch_size: int = 64) -> float:
    """Mean loss over the corpus (fixed splits for encdec), no gradients."""
    losses = []
    with ad.no_grad():
        for lo in range(0, len(lines_tokens), batch_size):
            chunk = lines_tokens[lo:lo + batch_size]
            if kind == "decoder":
                tokens = vocab.pad_batch(chunk, suffix=vocab.EOS)
                losses.append((float(lm.lm_loss(tokens).data), len(chunk)))
            else:
                halves = [(t[:max(1, len(t) // 2)], t[max(1, len(t) // 2):]) for t in chunk]
                prefix = vocab.pad_batch([h[0] for h in halves])
                suffix = vocab.pad_batch([h[1] for h in halves], suffix=vocab.EOS)
                losses.append((float(lm.seq2seq_loss(None, prefix, suffix).data), len(chunk)))
    total = sum(l * n for l, n in losses)
    count = sum(n for _, n in losses)
    return total / count


def pretrain_toy_lm(corpus_lines: list[str], config: LmPretrainConfig,
                    out_ckpt: str | None = None,
                    log_path: str | None = None):
    """Train a toy LM on the text corpus, then freeze it.

    Returns (lm, report). Failing to reach the perplexity threshold is
    reported, not fatal.
    """
    lm_cfg = ToyLmConfig(kind=config.kind)
    lm = ToyDecoderLM(lm_cfg, seed=config.seed) if config.kind == "decoder" \
        else ToyEncDecLM(lm_cfg, seed=config.seed)
    tokens_per_line = [vocab.encode(line) for line in corpus_lines]
    rng = np.random.default_rng(config.seed)
    sched = TrainConfig(peak_lr=config.peak_lr, warmup_steps=config.warmup_steps,
                        total_steps=config.steps, batch_size=config.batch_size,
                        seed=config.seed)
    metrics = MetricsLog(["step", "lr", "loss_total"], log_path)
    opt = AdamWState()
    params = lm.parameters()
    initial_loss = None

    for step in range(1, config.steps + 1):
        lr = lr_schedule(step, sched)
        idx = rng.integers(0, len(tokens_per_line), size=config.batch_size)
        chunk = [tokens_per_line[i] for i in idx]
        if config.kind == "decoder":
            batch = vocab.pad_batch(chunk, suffix=vocab.EOS)
            loss = lm.lm_loss(batch)
        else:
            splits = [split_prefix_suffix(t, rng) for t in chunk]
            prefix = vocab.pad_batch([s[0] for s in splits])
            suffix = vocab.pad_batch([s[1] for s in splits], suffix=vocab.EOS)
            loss = lm.seq2seq_loss(None, prefix, suffix)
        loss_value = float(loss.data)
        _check_finite(loss_value, step, lr, {})
        if initial_loss is None:
            initial_loss = loss_value
        loss.backward()
        adamw_step(params, opt, lr, sched)
        lm.zero_grad()
        metrics.log(step=step, lr=lr, loss_total=loss_value)

    lm.freeze()
    corpus_loss = _lm_corpus_loss(lm, tokens_per_line, config.kind, rng)
    report = LmPretrainReport(
        kind=config.kind, steps=config.steps, initial_loss=initial_loss or 0.0,
        final_corpus_loss=corpus_loss, perplexity=float(np.exp(corpus_loss)),
        threshold=config.perplexity_threshold,
        reached_threshold=float(np.exp(corpus_loss)) < config.perplexity_threshold)
    metrics.comment(report.summary())
    metrics.close()
    if out_ckpt is not None:
        save_checkpoint(out_ckpt, lm.parameters(),
                        {"lm": asdict(lm_cfg), "pretrain": asdict(config),
                         "report": asdict(report)})
    return lm, report


def load_toy_lm(path: str):
    ckpt = load_checkpoint(path)
    lm_cfg = ToyLmConfig(**ckpt.config["lm"])
    lm = ToyDecoderLM(lm_cfg) if lm_cfg.kind == "decoder" else ToyEncDecLM(lm_cfg)
    load_into(lm.parameters(), ckpt)
    for p in lm.parameters():
        p.frozen = True
    return lm, ckpt.config


# stage 2 --------------------------------------------------------------

@dataclass
class Stage2Run:
    model: QFormer
    projection: ProjectionLayer
    encoder: FrozenImageEncoder
    lm: object
    config: TrainConfig
    metrics: MetricsLog
    final_loss: float | None = None


def train_stage2(dataset: PairDataset, config: TrainConfig, stage1_ckpt: str,
                 lm_ckpt: str, out_ckpt: str | None = None,
                 log_path: str | None = None, resume_from: str | None = None,
                 val_every: int = 500) -> Stage2Run:
    """Generative stage: query transformer + projection against a frozen LM."""
    if config.stage != 2:
        raise ValueError("config.stage must be 2")
    model, encoder, s1_config = load_stage1_model(stage1_ckpt)
    lm, lm_config = load_toy_lm(lm_ckpt)
    if lm_config["lm"]["kind"] != config.llm_kind:
        raise ValueError(f"config.llm_kind={config.llm_kind!r} but LM checkpoint "
                         f"is {lm_config['lm']['kind']!r}")
    projection = ProjectionLayer(model.cfg.d_model, lm.d_llm, seed=config.seed)
    lm_hash_before = parameter_hash(lm.parameters())

    metrics = MetricsLog(["step", "lr", "loss_total"], log_path)
    run = Stage2Run(model=model, projection=projection, encoder=encoder, lm=lm,
                    config=config, metrics=metrics)
    opt = AdamWState()
    rng = np.random.default_rng(config.seed)
    start_step = 0
    trainable = model.parameters() + projection.parameters()
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        load_into(trainable + encoder.parameters(), ckpt)
        if ckpt.train_state is None:
            raise ValueError("cannot resume: checkpoint has no training state")
        opt = ckpt.train_state.optimizer
        rng = rng_from_json(ckpt.train_state.rng_state)
        start_step = ckpt.train_state.step

    feats_all = encoder.encode_batch([item.image for item in dataset.items])
    train_idx = np.array(dataset.split_indices("train"))
    all_params = trainable + lm.parameters()

    for step in range(start_step + 1, config.total_steps + 1):
        lr = lr_schedule(step, config)
        idx = rng.choice(train_idx, size=config.batch_size, replace=False)
        variants = rng.integers(0, 2, size=config.batch_size)
        caps = [dataset.items[i].captions[v] for i, v in zip(idx, variants)]
        try:
            z = model.extract_visual(feats_all[idx])
            prompts = projection(z)
            if config.llm_kind == "decoder":
                tokens = vocab.pad_batch(caps, suffix=vocab.EOS)
                loss = decoder_lm_stage2_loss(lm, prompts, tokens)
            else:
                splits = [split_prefix_suffix(c, rng) for c in caps]
                prefix = vocab.pad_batch([s[0] for s in splits])
                suffix = vocab.pad_batch([s[1] for s in splits], suffix=vocab.EOS)
                loss = prefix_lm_stage2_loss(lm, prompts, prefix, suffix)
        except NumericalError as exc:
            raise TrainingDiverged(f"step {step} (lr={lr:g}): {exc}") from exc
        loss_value = float(loss.data)
        _check_finite(loss_value, step, lr, {})
        loss.backward()
        if config.grad_clip > 0:
            clip_global_norm(all_params, config.grad_clip)
        if lr > 0:
            adamw_step(all_params, opt, lr, config)
        for p in all_params:
            p.zero_grad()
        metrics.log(step=step, lr=lr, loss_total=loss_value)
        run.final_loss = loss_value

    if parameter_hash(lm.parameters()) != lm_hash_before:
        raise RuntimeError("frozen LM weights changed during stage 2")
    if out_ckpt is not None:
        extra = {"qformer": s1_config["qformer"],
                 "encoder_seed": s1_config.get("encoder_seed", ENCODER_SEED),
                 "stage1_source": s1_config.get("stage1", "trained"),
                 "lm_ckpt": os.path.basename(lm_ckpt),
                 "d_llm": lm.d_llm}
        save_checkpoint(
            out_ckpt, trainable + encoder.parameters(), _config_echo(config, extra),
            TrainState(step=config.total_steps, optimizer=opt,
                       rng_state=rng_state_to_json(rng)))
    metrics.close()
    return run


def load_stage2_model(path: str):
    """Rebuild (qformer, projection, encoder, config) from a stage-2 checkpoint."""
    ckpt = load_checkpoint(path)
    qcfg = QFormerConfig(**ckpt.config["qformer"])
    model = QFormer(qcfg, seed=int(ckpt.config.get("seed", 0)))
    projection = ProjectionLayer(qcfg.d_model, int(ckpt.config["d_llm"]),
                                 seed=int(ckpt.config.get("seed", 0)))
    encoder = FrozenImageEncoder(_grid_from_ckpt(ckpt), qcfg.d_image_feat,
                                 seed=int(ckpt.config.get("encoder_seed", ENCODER_SEED)))
    load_into(model.parameters() + projection.parameters() + encoder.parameters(), ckpt)
    return model, projection, encoder, ckpt.config
