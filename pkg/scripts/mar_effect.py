"""Stage-two mask-and-recover run starting from a stage-one checkpoint.

Measures the masked-region recovery loss under a fresh and a trained MAR block on
mixtures with held-out mask positions, and the SI-SDR restricted to unmasked samples
against the stage-one model.

    python scripts/mar_effect.py --run runs/overfit --mask-ms 300 --steps 500
"""
import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from avtse import metrics
from avtse.mixture_sim import read_manifest, with_mask_duration
from avtse.model import load_model
from avtse.objectives import masked_mse_losses
from avtse.train_eval import StageConfig, collate, estimate, init_stage2, render_items, train_stage2


@torch.no_grad()
def recover_loss(model, items):
    model.eval()
    vals = []
    for it in items:
        mix, tgt, vis = collate([it])
        out = model.forward_stage2(mix, vis)
        vals.append(float(masked_mse_losses(out.X_hat_R, model.encode_target(tgt), out.masked)[0]))
    return float(np.mean(vals))


def unmasked_si_sdr(model, items, stage):
    model.eval()
    vals = []
    for it in items:
        est = estimate(model, it, stage)
        a = int(round(it.mask_start_s * it.sample_rate))
        keep = np.ones(est.shape[0], dtype=bool)
        keep[a:a + int(round(it.mask_len_s * it.sample_rate))] = False
        vals.append(metrics.si_sdr(est[keep], it.target[keep]))
    return float(np.mean(vals))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run", default="runs/overfit", help="output directory of overfit_stage1.py")
    ap.add_argument("--mask-ms", type=int, default=300)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--direct-mar", action="store_true",
                    help="MAR block predicts X^R directly (no residual path, default init)")
    args = ap.parse_args()

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    run = Path(args.run)
    corpus, ckpt = run / "corpus", run / "stage1" / "best.ckpt"
    entries = read_manifest(run / "manifest.jsonl")
    train = render_items(corpus, with_mask_duration(entries, args.mask_ms, seed=11))
    held = render_items(corpus, with_mask_duration(entries, args.mask_ms, seed=12))

    stage1, _ = load_model(ckpt)
    ref = unmasked_si_sdr(stage1, held, "one")
    model = init_stage2(ckpt, seed=args.seed)
    if args.direct_mar:
        model.cfg.mar_residual = False
        model.reset_mar_block(seed=args.seed + 1)
    fresh = recover_loss(model, held)
    t0 = time.perf_counter()
    cfg = StageConfig(stage="two", mask_duration_ms=args.mask_ms, epochs=10 ** 6, max_steps=args.steps,
                      seed=args.seed)
    model, _ = train_stage2(train, ckpt, cfg, run_dir=run / f"stage2_{args.mask_ms}ms", model=model)
    summary = {"l_recover_fresh": fresh, "l_recover_trained": recover_loss(model, held),
               "unmasked_si_sdr_stage1": ref, "unmasked_si_sdr_stage2": unmasked_si_sdr(model, held, "two"),
               "wall_clock_s": time.perf_counter() - t0}
    summary["l_recover_ratio"] = summary["l_recover_trained"] / fresh
    (run / f"mar_effect_{args.mask_ms}ms.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
