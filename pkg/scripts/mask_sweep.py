"""Mask-duration sweep: stage-two training and test evaluation per duration.

    python scripts/mask_sweep.py --out runs/sweep --stage1-steps 2000 --stage2-steps 300
"""
import argparse
import logging
from pathlib import Path

import torch

from avtse.mixture_sim import SimConfig, build_manifest, synth_corpus, write_manifest
from avtse.model import ModelConfig
from avtse.train_eval import (SWEEP_DURATIONS_MS, StageConfig, format_sweep_table, render_items,
                              sweep_mask_duration, train_stage1)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--speakers", type=int, default=8)
    ap.add_argument("--utts", type=int, default=3)
    ap.add_argument("--counts", default="24,4,8")
    ap.add_argument("--stage1-steps", type=int, default=2000)
    ap.add_argument("--stage2-steps", type=int, default=300)
    ap.add_argument("--durations", default=",".join(str(d) for d in SWEEP_DURATIONS_MS))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    out = Path(args.out)
    corpus = out / "corpus"
    synth_corpus(corpus, args.speakers, args.utts, seed=args.seed, visual_channels=16)
    counts = tuple(int(c) for c in args.counts.split(","))
    entries = build_manifest(corpus, SimConfig(seed=args.seed, counts=counts))
    write_manifest(out / "manifest.jsonl", entries)
    split = {s: [e for e in entries if e.split == s] for s in ("train", "valid", "test")}

    s1 = StageConfig(stage="one", epochs=10 ** 6, max_steps=args.stage1_steps, validate_every=10, seed=args.seed)
    train_stage1(render_items(corpus, split["train"]), ModelConfig.miniature(), s1,
                 render_items(corpus, split["valid"]), out / "stage1")
    s2 = StageConfig(stage="two", mask_duration_ms=300, epochs=10 ** 6, max_steps=args.stage2_steps,
                     validate_every=10, seed=args.seed)
    rows = sweep_mask_duration(corpus, split["train"], split["test"], out / "stage1" / "best.ckpt", s2,
                               [int(d) for d in args.durations.split(",")], split["valid"], out)
    print(format_sweep_table(rows))


if __name__ == "__main__":
    main()
