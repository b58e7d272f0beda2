import json

import numpy as np
import pytest

from avtse import metrics
from avtse.mixture_sim import SimConfig, build_manifest, with_mask_duration
from avtse.model import ModelConfig, build_model, load_archive, save_model
from avtse.train_eval import (RunRecord, EpochRecord, StageConfig, evaluate, format_eval_table,
                              format_sweep_table, init_stage2, read_sweep, render_items, sweep_mask_duration,
                              train_stage1, train_stage2)


@pytest.fixture(scope="module")
def data(small_corpus):
    entries = build_manifest(small_corpus, SimConfig(seed=5, counts=(4, 2, 2)))
    split = {s: [e for e in entries if e.split == s] for s in ("train", "valid", "test")}
    return small_corpus, split


@pytest.fixture(scope="module")
def stage1(data, tmp_path_factory):
    corpus, split = data
    run_dir = tmp_path_factory.mktemp("stage1")
    cfg = ModelConfig.miniature()
    sc = StageConfig(stage="one", epochs=3, seed=0)
    model, record = train_stage1(render_items(corpus, split["train"]), cfg, sc,
                                 render_items(corpus, split["valid"]), run_dir)
    return run_dir, model, record


def test_stage_defaults():
    one, two = StageConfig(stage="one"), StageConfig(stage="two", mask_duration_ms=300)
    assert (one.epochs, two.epochs) == (150, 30)
    assert one.learning_rate == two.learning_rate == 1.5e-4
    assert (one.loss_weights.beta, one.loss_weights.gamma) == (0.0, 0.0)
    assert (two.loss_weights.alpha, two.loss_weights.beta, two.loss_weights.gamma) == (1.0, 5.0, 1.0)
    with pytest.raises(ValueError):
        StageConfig(stage="two")
    with pytest.raises(ValueError):
        StageConfig(stage="three")


def test_best_pointer_tracks_max_validation():
    rec = RunRecord(epochs=[EpochRecord(0, 1, 1.0, 2.0, "a", 0.0), EpochRecord(1, 2, 0.5, 5.0, "b", 0.0),
                            EpochRecord(2, 3, 0.4, 4.0, "c", 0.0), EpochRecord(3, 4, 0.3, None, None, 0.0)])
    rec.update_best()
    assert (rec.best_epoch, rec.best_checkpoint) == (1, "b")


def test_stage1_run_artifacts(stage1):
    run_dir, model, record = stage1
    lines = [json.loads(l) for l in (run_dir / "run_record.jsonl").read_text().splitlines()]
    assert len(lines) == 3 and all(l["checkpoint"] for l in lines)
    best = max(lines, key=lambda l: l["valid_si_sdr"])
    assert record.best_epoch == best["epoch"] and record.best_checkpoint == best["checkpoint"]
    best_t = load_archive(record.best_checkpoint)[0]
    final_t = load_archive(run_dir / "best.ckpt")[0]
    assert all(np.array_equal(best_t[k], final_t[k]) for k in best_t)


def test_stage1_rejects_masked_items(data):
    corpus, split = data
    items = render_items(corpus, with_mask_duration(split["train"], 300, 0))
    with pytest.raises(ValueError):
        train_stage1(items, ModelConfig.miniature(), StageConfig(stage="one", epochs=1))


def test_stage2_init_bitwise(stage1):
    run_dir, _, _ = stage1
    ref = load_archive(run_dir / "best.ckpt")[0]
    model = init_stage2(run_dir / "best.ckpt", seed=0)
    state = model.state_dict()
    mar_changed = []
    for name, t in ref.items():
        if name.startswith("mar_block."):
            mar_changed.append(not np.array_equal(state[name].numpy(), t))
        else:
            assert np.array_equal(state[name].numpy(), t), name
    assert any(mar_changed)
    assert all(p.requires_grad for p in model.parameters())


def test_stage2_errors(data, stage1, tmp_path):
    corpus, split = data
    run_dir, _, _ = stage1
    items = render_items(corpus, with_mask_duration(split["train"], 300, 0))
    with pytest.raises(ValueError):
        train_stage2(items, run_dir / "best.ckpt", StageConfig(stage="two", mask_duration_ms=200, max_steps=1))
    with pytest.raises(FileNotFoundError):
        train_stage2(items, tmp_path / "missing.ckpt", StageConfig(stage="two", mask_duration_ms=300))
    model = build_model(ModelConfig.miniature(), 0)
    save_model(tmp_path / "s2.ckpt", model, "two")
    with pytest.raises(ValueError):
        init_stage2(tmp_path / "s2.ckpt")


def test_evaluate_rows_and_identity(data, stage1):
    corpus, split = data
    _, model, _ = stage1
    items = render_items(corpus, split["test"])
    report = evaluate(model, items, "one", with_stoi=True)
    assert len(report.records) == len(split["test"])
    assert all(r.pesq is None for r in report.records)
    assert "PESQ" in format_eval_table({"mini": report}).splitlines()[0]
    ref = items[0].target
    assert metrics.si_sdr(ref, ref) == metrics.DB_CAP


def test_sweep_one_row_per_duration(data, stage1, tmp_path):
    corpus, split = data
    run_dir, _, _ = stage1
    cfg = StageConfig(stage="two", mask_duration_ms=300, epochs=1, max_steps=1)
    rows = sweep_mask_duration(corpus, split["train"][:1], split["test"][:1], run_dir / "best.ckpt", cfg,
                               durations_ms=(300, 100), run_dir=tmp_path)
    assert [r.mask_duration_ms for r in rows] == [100, 300]
    assert [r.mask_duration_ms for r in read_sweep(tmp_path / "sweep.json")] == [100, 300]
    assert format_sweep_table(rows).splitlines()[1].startswith("100")
