"""Two-stage training, checkpoint selection, evaluation and the mask-duration sweep."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .mixture_sim import ManifestEntry, RenderedItem, render_entry, with_mask_duration
from .model import AVHuMARTSE, ModelConfig, build_model, load_model, save_model
from .objectives import LossWeights, total_loss
from .signal_io import Waveform, write_audio

log = logging.getLogger(__name__)

SWEEP_DURATIONS_MS = (100, 200, 300, 400, 500, 600)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class StageConfig:
    stage: str = "one"
    epochs: int | None = None
    learning_rate: float = 1.5e-4
    batch_size: int = 2
    mask_duration_ms: int = 0
    grad_clip_norm: float = 5.0
    seed: int = 0
    max_steps: int | None = None
    validate_every: int = 1
    loss_weights: LossWeights | None = None
    use_mar_in_eval: bool = True

    def __post_init__(self):
        if self.stage not in ("one", "two"):
            raise ValueError(f"stage must be 'one' or 'two', got {self.stage!r}")
        if self.epochs is None:
            self.epochs = 150 if self.stage == "one" else 30
        if self.loss_weights is None:
            self.loss_weights = LossWeights.stage_one() if self.stage == "one" else LossWeights()
        elif isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if self.stage == "two" and self.mask_duration_ms <= 0:
            raise ValueError("stage two needs a positive mask duration")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    step: int
    train_loss: float
    valid_si_sdr: float | None
    checkpoint: str | None
    wall_clock_s: float


@dataclass
class RunRecord:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_checkpoint: str | None = None
    first_batch_loss: float | None = None
    steps: int = 0

    def update_best(self):
        scored = [e for e in self.epochs if e.valid_si_sdr is not None]
        if scored:
            best = max(scored, key=lambda e: e.valid_si_sdr)
            self.best_epoch, self.best_checkpoint = best.epoch, best.checkpoint

    def write_jsonl(self, path) -> None:
        Path(path).write_text("".join(json.dumps(asdict(e)) + "\n" for e in self.epochs))


# --- data ----------------------------------------------------------------------

def render_items(corpus_dir, entries: list[ManifestEntry], video_fps: int = 25,
                 apply_mask: bool = True) -> list[RenderedItem]:
    return [render_entry(corpus_dir, e, video_fps, apply_mask) for e in entries]


def collate(items: list[RenderedItem], dtype=torch.float32):
    mix = torch.as_tensor(np.stack([it.mixture for it in items]), dtype=dtype)
    tgt = torch.as_tensor(np.stack([it.target for it in items]), dtype=dtype)
    vis = torch.as_tensor(np.stack([it.visual for it in items]), dtype=dtype)
    return mix, tgt, vis


def batches(n_items: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n_items)
    for i in range(0, n_items, batch_size):
        yield order[i:i + batch_size]


def compute_loss(model: AVHuMARTSE, mix, tgt, vis, stage: str, weights: LossWeights):
    if stage == "one":
        s_hat = model.extract(mix, vis).s_hat
        return total_loss(tgt, s_hat, w=weights)
    out = model.forward_stage2(mix, vis)
    Y = model.encode_target(tgt)
    return total_loss(tgt, out.s_hat, out.X_hat_R, Y, out.masked, weights)


@torch.no_grad()
def estimate(model: AVHuMARTSE, item: RenderedItem, stage: str = "one", use_mar: bool = True) -> np.ndarray:
    mix, _, vis = collate([item], next(model.parameters()).dtype)
    if stage == "one" or not use_mar:
        s_hat = model.extract(mix, vis).s_hat
    else:
        s_hat = model.forward_stage2(mix, vis, use_mar=True).s_hat
    return s_hat[0].double().numpy()


def mean_si_sdr(model, items, stage: str = "one", use_mar: bool = True) -> float:
    was_training = model.training
    model.eval()
    vals = [metrics.si_sdr(estimate(model, it, stage, use_mar), it.target) for it in items]
    model.train(was_training)
    return float(np.mean(vals))


# --- training ------------------------------------------------------------------

def _fit(model: AVHuMARTSE, train_items, valid_items, cfg: StageConfig, run_dir=None,
         on_step=None) -> RunRecord:
    if not train_items:
        raise ValueError("empty training manifest")
    run_dir = Path(run_dir) if run_dir else None
    if run_dir:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    dtype = next(model.parameters()).dtype
    record = RunRecord()
    t0 = time.time()
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        losses = []
        for idx in batches(len(train_items), cfg.batch_size, rng):
            mix, tgt, vis = collate([train_items[i] for i in idx], dtype)
            loss, parts = compute_loss(model, mix, tgt, vis, cfg.stage, cfg.loss_weights)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}: {parts}")
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip_norm:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip_norm)
            opt.step()
            if record.first_batch_loss is None:
                record.first_batch_loss = parts["total"]
            losses.append(parts["total"])
            step += 1
            if on_step is not None:
                on_step(step, parts)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        done = cfg.max_steps is not None and step >= cfg.max_steps
        last_epoch = done or epoch == cfg.epochs - 1
        valid, ckpt = None, None
        if (epoch + 1) % cfg.validate_every == 0 or last_epoch:
            if valid_items:
                valid = mean_si_sdr(model, valid_items, cfg.stage, cfg.use_mar_in_eval)
            if run_dir:
                ckpt = str(run_dir / "checkpoints" / f"epoch_{epoch:04d}.ckpt")
                save_model(ckpt, model, cfg.stage, {"epoch": epoch, "step": step})
        record.epochs.append(EpochRecord(epoch, step, float(np.mean(losses)), valid, ckpt, time.time() - t0))
        log.info("epoch %d step %d loss %.4f valid %s", epoch, step, record.epochs[-1].train_loss, valid)
        if done:
            break
    record.steps = step
    record.update_best()
    if record.best_epoch is None and record.epochs:
        record.best_epoch, record.best_checkpoint = record.epochs[-1].epoch, record.epochs[-1].checkpoint
    if run_dir:
        record.write_jsonl(run_dir / "run_record.jsonl")
    return record


def _restore_best(model, record: RunRecord):
    if record.best_checkpoint and Path(record.best_checkpoint).exists():
        load_model(record.best_checkpoint, model)


def _write_config(run_dir, model_cfg: ModelConfig, stage_cfg: StageConfig, extra=None):
    if run_dir:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        snap = {"model": model_cfg.to_dict(), "stage": stage_cfg.to_dict()}
        snap.update(extra or {})
        Path(run_dir, "config.json").write_text(json.dumps(snap, indent=2, default=str))


def train_stage1(train_items, model_cfg: ModelConfig, stage_cfg: StageConfig, valid_items=None,
                 run_dir=None, model: AVHuMARTSE | None = None, restore_best: bool = True, on_step=None):
    if stage_cfg.stage != "one":
        raise ValueError("train_stage1 needs a stage-one StageConfig")
    if any(it.mask_len_s > 0 for it in train_items):
        raise ValueError("stage one trains on intact mixtures; got masked items")
    model = model or build_model(model_cfg, stage_cfg.seed)
    _write_config(run_dir, model_cfg, stage_cfg)
    record = _fit(model, train_items, valid_items or [], stage_cfg, run_dir, on_step)
    if restore_best:
        _restore_best(model, record)
    if run_dir:
        save_model(Path(run_dir) / "best.ckpt", model, "one")
    return model, record


def init_stage2(stage1_ckpt, seed: int = 0, dtype=None) -> AVHuMARTSE:
    model, meta = load_model(stage1_ckpt)
    if meta.get("stage") != "one":
        raise ValueError(f"{stage1_ckpt} is not a stage-one checkpoint (stage={meta.get('stage')})")
    model.reset_mar_block(seed=seed + 1)
    if dtype is not None:
        model.to(dtype)
    return model


def train_stage2(train_items, stage1_ckpt, stage_cfg: StageConfig, valid_items=None, run_dir=None,
                 model: AVHuMARTSE | None = None, restore_best: bool = True, on_step=None):
    if stage_cfg.stage != "two":
        raise ValueError("train_stage2 needs a stage-two StageConfig")
    if not Path(stage1_ckpt).exists() and model is None:
        raise FileNotFoundError(stage1_ckpt)
    expected = stage_cfg.mask_duration_ms / 1000.0
    for it in train_items:
        if abs(it.mask_len_s - expected) > 1e-9:
            raise ValueError(f"item {it.key} has a {it.mask_len_s * 1000:.0f} ms mask, "
                             f"config says {stage_cfg.mask_duration_ms} ms")
    model = model or init_stage2(stage1_ckpt, stage_cfg.seed)
    _write_config(run_dir, model.cfg, stage_cfg, {"stage1_checkpoint": str(stage1_ckpt)})
    record = _fit(model, train_items, valid_items or [], stage_cfg, run_dir, on_step)
    if restore_best:
        _restore_best(model, record)
    if run_dir:
        save_model(Path(run_dir) / "best.ckpt", model, "two")
    return model, record


# --- evaluation ------------------------------------------------------------------

def evaluate(model: AVHuMARTSE, items: list[RenderedItem], stage: str = "one", use_mar: bool = True,
             with_stoi: bool = True, pesq_tool=None, audio_dir=None, label: str = "") -> metrics.EvalReport:
    model.eval()
    report = metrics.EvalReport(label=label)
    if audio_dir:
        Path(audio_dir).mkdir(parents=True, exist_ok=True)
    for i, it in enumerate(items):
        est = estimate(model, it, stage, use_mar)
        uid = it.key or f"utt{i:05d}"
        paths = None
        if audio_dir:
            est_path = Path(audio_dir) / f"{i:05d}_est.wav"
            ref_path = Path(audio_dir) / f"{i:05d}_ref.wav"
            write_audio(est_path, Waveform(np.clip(est, -1, 1), it.sample_rate))
            write_audio(ref_path, Waveform(it.target, it.sample_rate))
            paths = (est_path, ref_path)
        report.records.append(metrics.score_utterance(uid, est, it.mixture, it.target, it.sample_rate,
                                                      with_stoi, paths, pesq_tool))
    return report


@dataclass
class SweepRow:
    mask_duration_ms: int
    si_sdr: float
    si_sdri: float
    checkpoint: str | None = None


def sweep_mask_duration(corpus_dir, train_entries, test_entries, stage1_ckpt, cfg: StageConfig,
                        durations_ms=SWEEP_DURATIONS_MS, valid_entries=None, run_dir=None,
                        with_stoi: bool = False) -> list[SweepRow]:
    rows = []
    test_items = render_items(corpus_dir, test_entries, apply_mask=False)
    for dur in sorted(durations_ms):
        masked = with_mask_duration(train_entries, dur, cfg.seed + dur)
        items = render_items(corpus_dir, masked)
        valid = render_items(corpus_dir, with_mask_duration(valid_entries, dur, cfg.seed + dur)) if valid_entries else None
        stage_cfg = StageConfig(**{**asdict(cfg), "stage": "two", "mask_duration_ms": dur,
                                   "loss_weights": cfg.loss_weights if cfg.stage == "two" else None})
        sub = Path(run_dir) / f"mask_{dur}ms" if run_dir else None
        model, _ = train_stage2(items, stage1_ckpt, stage_cfg, valid, sub)
        report = evaluate(model, test_items, "two", cfg.use_mar_in_eval, with_stoi, label=f"{dur}ms")
        if sub:
            report.save(sub / "eval_report.json")
        agg = report.aggregate()
        rows.append(SweepRow(dur, agg["si_sdr"], agg["si_sdri"], str(sub / "best.ckpt") if sub else None))
        log.info("sweep %d ms: SI-SDR %.3f SI-SDRi %.3f", dur, agg["si_sdr"], agg["si_sdri"])
    if run_dir:
        write_sweep(Path(run_dir) / "sweep.json", rows)
    return rows


def write_sweep(path, rows: list[SweepRow]) -> None:
    Path(path).write_text(json.dumps([asdict(r) for r in rows], indent=2))


def read_sweep(path) -> list[SweepRow]:
    return [SweepRow(**r) for r in json.loads(Path(path).read_text())]


def format_sweep_table(rows: list[SweepRow]) -> str:
    lines = [f"{'Mask Duration (ms)':<20}{'SI-SDR':>10}{'SI-SDRi':>10}"]
    for r in sorted(rows, key=lambda r: r.mask_duration_ms):
        lines.append(f"{r.mask_duration_ms:<20d}{_fmt(r.si_sdr):>10}{_fmt(r.si_sdri):>10}")
    return "\n".join(lines)


def format_eval_table(reports: dict[str, metrics.EvalReport]) -> str:
    cols = ("SI-SDR", "SI-SDRi", "SDR", "PESQ", "STOI")
    keys = ("si_sdr", "si_sdri", "sdr", "pesq", "stoi")
    width = max([len("Model")] + [len(k) for k in reports]) + 2
    lines = [f"{'Model':<{width}}" + "".join(f"{c:>10}" for c in cols)]
    for name, rep in reports.items():
        agg = rep.aggregate()
        lines.append(f"{name:<{width}}" + "".join(f"{_fmt(agg[k]):>10}" for k in keys))
    return "\n".join(lines)


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    return f"{v:.3f}"
