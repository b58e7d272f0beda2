"""Command-line entry point: ``avtse <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger("avtse")

PESQ_ENV = "AVTSE_PESQ_TOOL"


class ConfigError(ValueError):
    pass


@dataclass
class CommandResult:
    exit_code: int = 0
    artifacts: list[str] = field(default_factory=list)


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def _float_pair(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(t) for t in text.split(","))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {text!r}") from e
    return lo, hi


def _load_config(path) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e


def _pick(args, cfg: dict, name: str, default=None):
    """Flag value if given, else config-file value, else default."""
    v = getattr(args, name, None)
    if v is not None:
        return v
    return cfg.get(name, default)


def _model_config(args, cfg: dict):
    from .model import ModelConfig

    preset = _pick(args, cfg, "model_preset", "paper")
    overrides = dict(cfg.get("model", {}))
    if getattr(args, "model_json", None):
        overrides.update(json.loads(args.model_json))
    try:
        if preset == "miniature":
            return ModelConfig.miniature(**overrides)
        if preset == "paper":
            return ModelConfig(**overrides)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid model config: {e}") from e
    raise ConfigError(f"unknown model preset {preset!r}")


def _stage_config(args, cfg: dict, stage: str):
    from .train_eval import StageConfig

    kw = {"stage": stage}
    for name in ("epochs", "learning_rate", "batch_size", "grad_clip_norm", "seed", "max_steps",
                 "validate_every", "mask_duration_ms"):
        v = _pick(args, cfg, name)
        if v is not None:
            kw[name] = v
    if getattr(args, "no_mar", False):
        kw["use_mar_in_eval"] = False
    try:
        return StageConfig(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid stage config: {e}") from e


def _entries(manifest, split):
    from .mixture_sim import read_manifest

    return [e for e in read_manifest(manifest) if e.split == split]


# --- subcommands ---------------------------------------------------------------

def cmd_synth_corpus(args, cfg) -> CommandResult:
    from .mixture_sim import synth_corpus

    written = synth_corpus(args.out, _pick(args, cfg, "speakers", 8), _pick(args, cfg, "utts", 4),
                           _pick(args, cfg, "seed", 0), _pick(args, cfg, "visual_channels", 512))
    return CommandResult(0, [str(p) for p in written])


def cmd_simulate(args, cfg) -> CommandResult:
    from .mixture_sim import SimConfig, build_manifest, write_manifest

    try:
        sim = SimConfig(seed=_pick(args, cfg, "seed", 0), counts=tuple(_pick(args, cfg, "counts", [20000, 5000, 3000])),
                        snr_range_db=tuple(_pick(args, cfg, "snr_range", (-10.0, 10.0))),
                        mask_duration_ms=_pick(args, cfg, "mask_ms", 0))
    except ValueError as e:
        raise ConfigError(str(e)) from e
    entries = build_manifest(args.corpus, sim)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_manifest(args.out, entries)
    return CommandResult(0, [str(args.out)])


def cmd_train_stage1(args, cfg) -> CommandResult:
    from .train_eval import render_items, train_stage1

    model_cfg = _model_config(args, cfg)
    stage_cfg = _stage_config(args, cfg, "one")
    train = render_items(args.corpus, _entries(args.manifest, "train"), model_cfg.video_fps)
    valid = render_items(args.corpus, _entries(args.manifest, "valid"), model_cfg.video_fps)
    _, record = train_stage1(train, model_cfg, stage_cfg, valid, args.run_dir)
    run = Path(args.run_dir)
    return CommandResult(0, [str(run / "config.json"), str(run / "run_record.jsonl"), str(run / "best.ckpt")])


def cmd_train_stage2(args, cfg) -> CommandResult:
    from .train_eval import render_items, train_stage2

    stage_cfg = _stage_config(args, cfg, "two")
    train_e = _entries(args.manifest, "train")
    valid_e = _entries(args.manifest, "valid")
    if any(abs(e.mask_len_s * 1000 - stage_cfg.mask_duration_ms) > 1e-6 for e in train_e):
        raise ConfigError(f"manifest mask durations do not match --mask-ms {stage_cfg.mask_duration_ms}")
    train = render_items(args.corpus, train_e)
    valid = render_items(args.corpus, valid_e)
    train_stage2(train, args.stage1_ckpt, stage_cfg, valid, args.run_dir)
    run = Path(args.run_dir)
    return CommandResult(0, [str(run / "config.json"), str(run / "run_record.jsonl"), str(run / "best.ckpt")])


def cmd_evaluate(args, cfg) -> CommandResult:
    from .model import load_model
    from .train_eval import evaluate, render_items

    model, meta = load_model(args.checkpoint)
    items = render_items(args.corpus, _entries(args.manifest, args.split), model.cfg.video_fps,
                         apply_mask=args.masked)
    stage = meta.get("stage", "one")
    report = evaluate(model, items, stage, use_mar=not args.no_mar, with_stoi=not args.no_stoi,
                      pesq_tool=os.environ.get(PESQ_ENV), audio_dir=args.audio_dir,
                      label=args.label or Path(args.checkpoint).stem)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    report.save(args.out)
    artifacts = [str(args.out)]
    if args.csv:
        report.to_csv(args.csv)
        artifacts.append(str(args.csv))
    print(json.dumps(report.aggregate(), indent=2))
    return CommandResult(0, artifacts)


def cmd_sweep(args, cfg) -> CommandResult:
    from .train_eval import format_sweep_table, sweep_mask_duration

    stage_cfg = _stage_config(args, {**cfg, "mask_duration_ms": cfg.get("mask_duration_ms", 300)}, "two")
    durations = _pick(args, cfg, "durations", [100, 200, 300, 400, 500, 600])
    rows = sweep_mask_duration(args.corpus, _entries(args.manifest, "train"), _entries(args.manifest, "test"),
                               args.stage1_ckpt, stage_cfg, durations,
                               _entries(args.manifest, "valid"), args.run_dir)
    print(format_sweep_table(rows))
    return CommandResult(0, [str(Path(args.run_dir) / "sweep.json")])


def cmd_spectrogram(args, cfg) -> CommandResult:
    from .plotting import render_spectrograms
    from .signal_io import Waveform, read_audio, read_features

    mix = read_audio(args.mixture)
    ref = read_audio(args.target)
    if args.extracted:
        est = read_audio(args.extracted)
    elif args.checkpoint and args.visual:
        import torch

        from .model import load_model

        model, meta = load_model(args.checkpoint)
        model.eval()
        vis = read_features(args.visual)
        n_vis = int(round(mix.duration * model.cfg.video_fps))
        v = np.zeros((n_vis, vis.channels), np.float32)
        v[:min(n_vis, vis.frames)] = vis.data[:n_vis]
        with torch.no_grad():
            x = torch.as_tensor(mix.samples, dtype=torch.float32)[None]
            vt = torch.as_tensor(v)[None]
            if meta.get("stage") == "two":
                s = model.forward_stage2(x, vt).s_hat
            else:
                s = model.extract(x, vt).s_hat
        est = Waveform(s[0].double().numpy(), mix.sample_rate)
    else:
        raise ConfigError("spectrogram needs --extracted, or --checkpoint with --visual")
    paths = render_spectrograms({"mixture": mix, "extracted": est, "ground_truth": ref}, args.out_dir)
    return CommandResult(0, [str(p) for p in paths])


def cmd_report(args, cfg) -> CommandResult:
    from .metrics import EvalReport
    from .train_eval import format_eval_table, format_sweep_table, read_sweep

    blocks = []
    sweeps = [p for p in args.inputs if Path(p).is_dir() or Path(p).name == "sweep.json"]
    evals = [p for p in args.inputs if p not in sweeps]
    if evals:
        reports = {}
        for p in evals:
            rep = EvalReport.load(p)
            reports[rep.label or Path(p).stem] = rep
        blocks.append(format_eval_table(reports))
    for p in sweeps:
        path = Path(p) / "sweep.json" if Path(p).is_dir() else Path(p)
        blocks.append(format_sweep_table(read_sweep(path)))
    text = "\n\n".join(blocks) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
        return CommandResult(0, [str(args.out)])
    return CommandResult(0, [])


# --- parser ----------------------------------------------------------------------

def _training_flags(p):
    p.add_argument("--corpus", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--grad-clip-norm", type=float)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--validate-every", type=int)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="avtse", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="JSON file with default option values; flags win")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-corpus", help="write a synthetic audio-visual corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int)
    p.add_argument("--utts", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--visual-channels", type=int)
    p.set_defaults(func=cmd_synth_corpus)

    p = sub.add_parser("simulate", help="build a mixture manifest (JSON lines)")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--counts", type=_int_list, help="train,valid,test")
    p.add_argument("--snr-range", type=_float_pair)
    p.add_argument("--mask-ms", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train-stage1", help="train the extractor on intact mixtures")
    _training_flags(p)
    p.add_argument("--model-preset", choices=("paper", "miniature"))
    p.add_argument("--model-json", help="JSON object of ModelConfig overrides")
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="fine-tune with the mask-and-recover block")
    _training_flags(p)
    p.add_argument("--stage1-ckpt", required=True)
    p.add_argument("--mask-ms", dest="mask_duration_ms", type=int, required=True)
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("evaluate", help="score a checkpoint on one manifest split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.add_argument("--label")
    p.add_argument("--audio-dir", help="also write estimates/references here (needed for PESQ)")
    p.add_argument("--masked", action="store_true", help="apply the manifest's zero masks to the input")
    p.add_argument("--no-mar", action="store_true", help="bypass the MAR block for stage-two checkpoints")
    p.add_argument("--no-stoi", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="stage-two training + evaluation for each mask duration")
    _training_flags(p)
    p.add_argument("--stage1-ckpt", required=True)
    p.add_argument("--durations", type=_int_list)
    p.add_argument("--no-mar", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("spectrogram", help="render mixture / extracted / ground-truth spectrograms")
    p.add_argument("--mixture", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--extracted")
    p.add_argument("--checkpoint")
    p.add_argument("--visual")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_spectrogram)

    p = sub.add_parser("report", help="merge evaluation reports / sweep results into text tables")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def run(argv=None) -> CommandResult:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return CommandResult(int(e.code or 0))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = _load_config(args.config)
        result = args.func(args, cfg)
    except ConfigError as e:
        print(f"avtse: configuration error: {e}", file=sys.stderr)
        return CommandResult(2)
    except Exception as e:  # noqa: BLE001 - any runtime failure maps to exit 1
        log.debug("command failed", exc_info=True)
        print(f"avtse: {type(e).__name__}: {e}", file=sys.stderr)
        return CommandResult(1)
    missing = [p for p in result.artifacts if not Path(p).exists()]
    if missing:
        print(f"avtse: expected artifacts not written: {missing}", file=sys.stderr)
        return CommandResult(1, result.artifacts)
    return result


def main(argv=None) -> None:
    sys.exit(run(argv).exit_code)


if __name__ == "__main__":
    main()
