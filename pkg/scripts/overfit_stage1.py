"""Stage-one overfit run on a small synthetic corpus.

Trains the miniature extractor on a handful of mixtures and reports the training-set
SI-SDRi of the best checkpoint, plus the loss curve as JSON lines.

    python scripts/overfit_stage1.py --out runs/overfit --steps 2000
"""
import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from avtse import metrics
from avtse.mixture_sim import SimConfig, build_manifest, synth_corpus, write_manifest
from avtse.model import ModelConfig
from avtse.train_eval import StageConfig, estimate, render_items, train_stage1


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/overfit")
    ap.add_argument("--speakers", type=int, default=4)
    ap.add_argument("--utts", type=int, default=2)
    ap.add_argument("--mixtures", type=int, default=8)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=1.5e-4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--model-json", default="{}", help="ModelConfig overrides on top of the miniature preset")
    args = ap.parse_args()

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    out = Path(args.out)
    corpus = out / "corpus"
    synth_corpus(corpus, args.speakers, args.utts, seed=args.seed, visual_channels=16)
    entries = build_manifest(corpus, SimConfig(seed=args.seed, counts=(args.mixtures, 0, 0)))
    write_manifest(out / "manifest.jsonl", entries)
    items = render_items(corpus, entries)

    curve = []
    t0 = time.perf_counter()

    def on_step(step, parts):
        curve.append({"step": step, **parts})

    cfg = StageConfig(stage="one", epochs=10 ** 6, max_steps=args.steps, learning_rate=args.lr,
                      validate_every=25, seed=args.seed)
    model, record = train_stage1(items, ModelConfig.miniature(**json.loads(args.model_json)), cfg, items,
                                 out / "stage1", on_step=on_step)
    model.eval()
    sdri = [metrics.si_sdr_improvement(estimate(model, it), it.mixture, it.target) for it in items]
    (out / "loss_curve.jsonl").write_text("".join(json.dumps(c) + "\n" for c in curve))
    summary = {"si_sdri_mean": float(np.mean(sdri)), "si_sdri": [round(v, 3) for v in sdri],
               "best_epoch": record.best_epoch, "steps": record.steps,
               "wall_clock_s": time.perf_counter() - t0}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
