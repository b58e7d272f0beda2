import numpy as np
import pytest
import torch

from avtse.model import (PARAMETER_GROUPS, ModelConfig, build_model, import_pretrained_transformer,
                         load_archive, load_model, save_archive, save_model)
from avtse.model.checkpoint import CheckpointError, map_pretrained_name
from avtse.model.layers import MaskEstimator, receptive_span, upsample_cue


@pytest.fixture(scope="module")
def cfg():
    return ModelConfig.miniature()


@pytest.fixture(scope="module")
def model(cfg):
    return build_model(cfg, seed=0).eval()


def inputs(seconds=4.0, batch=1, d_visual=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(batch, int(seconds * 16000), generator=g) * 0.1
    v = torch.randn(batch, int(round(seconds * 25)), d_visual, generator=g)
    return x, v


def test_paper_config_values():
    c = ModelConfig.paper()
    assert (c.N, c.L, c.B, c.H, c.P, c.X, c.R) == (256, 40, 256, 512, 3, 7, 4)
    assert c.n_av_layers == 4 and c.mar_layers == 4
    assert c.stride == 20 and c.upsample_factor == 32 and c.embed_rate == 800.0


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig.miniature(L=41)
    with pytest.raises(ValueError):
        ModelConfig.miniature(R=0)
    with pytest.raises(ValueError):
        ModelConfig.miniature(L=32)   # 16000 / (16 * 25) = 40, not a power of two
    assert ModelConfig.from_dict(ModelConfig.paper().to_dict()) == ModelConfig.paper()


def test_encoder_shapes_and_zero(model):
    x, _ = inputs()
    post, pre = model.speech_encode(x)
    assert post.shape == (1, 8, 3199) and pre.shape == (1, 8, 3199)
    assert torch.all(post >= 0)
    _, pre0 = model.speech_encode(torch.zeros(1, 64000))
    assert torch.all(pre0 == 0)
    with pytest.raises(ValueError):
        model.speech_encode(torch.zeros(1, 39))


def test_decoder_shapes(model):
    X = torch.rand(1, 8, 3199)
    assert model.speech_decode(X).shape == (1, 64000)
    assert torch.all(model.speech_decode(torch.zeros(1, 8, 3199)) == 0)
    with pytest.raises(ValueError):
        model.speech_decode(torch.rand(1, 7, 10))
    x = torch.randn(1, 16000 + 20 * 3)
    assert model.speech_decode(model.speech_encode(x)[0]).shape[-1] == x.shape[-1]


def test_visual_adapter(model):
    _, v = inputs()
    V = model.visual_adapt(v)
    assert V.shape == (1, 16, 100)
    assert torch.equal(V, model.visual_adapt(v))
    with pytest.raises(ValueError):
        model.visual_adapt(torch.randn(1, 100, 15))


def test_upsample_repetition_and_trim():
    v = torch.arange(100.0).view(1, 1, 100)
    up = upsample_cue(v, 32)
    assert up.shape[-1] == 3200
    assert torch.all(up.view(100, 32) == torch.arange(100.0)[:, None])
    assert upsample_cue(v, 32, 3199).shape[-1] == 3199
    c = torch.full((1, 4, 7), 2.5)
    assert torch.all(upsample_cue(c, 32, 250) == 2.5)


def test_mask_estimator_shape_and_sign(model):
    X = torch.rand(2, 8, 500)
    V = torch.randn(2, 16, 16)
    M = model.estimate_mask(X, V)
    assert M.shape == X.shape and torch.all(M >= 0)
    with pytest.raises(RuntimeError):
        model.mask_estimator(X, torch.randn(2, 16, 499))


def test_receptive_field_span():
    assert receptive_span(3, 7) == 254
    torch.manual_seed(0)
    est = MaskEstimator(N=2, d_visual=2, B=4, H=4, P=3, X=7).double()
    captured = []
    est.out.register_forward_hook(lambda m, i, o: captured.append(o.detach()))
    X = torch.rand(1, 2, 600, dtype=torch.float64)
    V = torch.rand(1, 2, 600, dtype=torch.float64)
    est(X, V)
    X2 = X.clone()
    X2[0, :, 300] += 1.0
    est(X2, V)
    changed = torch.nonzero((captured[0] - captured[1]).abs().sum(1)[0] > 0).flatten()
    assert changed.min().item() == 300 - 127 and changed.max().item() == 300 + 127


def test_cue_encoder_rates(model):
    x, v = inputs()
    V0 = model.visual_adapt(v)
    V1 = model.cue_encode(x, V0)
    assert V1.shape == (1, 16, 99)
    A = model.cue_encoder.duration_adapter(model.speech_encode(x)[0])
    assert A.shape[-1] == 99
    assert model.cfg.embed_rate / 2 ** len(model.cue_encoder.duration_adapter.convs) == model.cfg.video_fps


def test_extract_counts_and_lengths():
    cfg = ModelConfig.miniature(R=4)
    m = build_model(cfg).eval()
    calls = {"mask": 0, "cue": 0}
    m.mask_estimator.register_forward_hook(lambda *a: calls.__setitem__("mask", calls["mask"] + 1))
    m.cue_encoder.register_forward_hook(lambda *a: calls.__setitem__("cue", calls["cue"] + 1))
    x, v = inputs()
    with torch.no_grad():
        out = m.extract(x, v)
    assert calls == {"mask": 5, "cue": 4}
    assert len(out.masks) == 5 and len(out.intermediate) == 4
    assert out.s_hat.shape == x.shape
    assert torch.equal(out.X_R, out.masks[-1] * out.X0)


def census(model):
    return {g: sorted((n, tuple(p.shape)) for n, p in params.items())
            for g, params in model.parameter_groups().items()}


def test_parameter_count_independent_of_R():
    a, b = build_model(ModelConfig.miniature(R=2)), build_model(ModelConfig.miniature(R=4))
    assert census(a) == census(b)
    assert set(census(a)) == set(PARAMETER_GROUPS)
    n_group = sum(len(v) for v in a.parameter_groups().values())
    assert n_group == len(list(a.parameters()))


def test_zero_mixture_embedding_zeroes_intermediates(model):
    _, v = inputs()
    with torch.no_grad():
        out = model.extract(torch.zeros(1, 64000), v)
    assert all(torch.all(s == 0) for s in out.intermediate)
    assert torch.all(out.s_hat == 0)

    # zero only X^0 while every later re-encoding works normally
    x, v = inputs(seed=3)
    first = {"done": False}

    def zero_first(module, args, output):
        if not first["done"]:
            first["done"] = True
            return torch.zeros_like(output[0]), output[1]
        return output

    h = model.speech_encoder.register_forward_hook(zero_first)
    try:
        with torch.no_grad():
            out = model.extract(x, v)
    finally:
        h.remove()
    assert all(torch.all(s == 0) for s in out.intermediate)


def test_mar_shape(model):
    X = torch.rand(1, 8, 3199)
    V = torch.randn(1, 16, 99)
    with torch.no_grad():
        Xh = model.mar_refine(X, V)
    assert Xh.shape == X.shape
    # fresh residual block is an exact pass-through
    assert torch.equal(Xh, X)

    direct = build_model(ModelConfig.miniature(mar_residual=False), seed=0).eval()
    with torch.no_grad():
        Xd = direct.mar_refine(X, V)
    assert Xd.shape == X.shape and (Xd < 0).any()


def test_stage2_forward(model):
    x, v = inputs()
    x[:, 16000:20800] = 0
    with torch.no_grad():
        out = model.forward_stage2(x, v)
    assert out.s_hat.shape == x.shape
    assert out.X_hat_R.shape == (1, 8, 3199)
    assert out.masked.shape == (1, 3199)
    frames = torch.nonzero(out.masked[0]).flatten()
    assert frames[0] == 800 and frames[-1] == 1038 and frames.numel() == 239
    Y = model.encode_target(torch.randn(1, 64000))
    assert Y.shape == out.X_hat_R.shape


def test_checkpoint_round_trip_bitwise(model, tmp_path):
    save_model(tmp_path / "m.ckpt", model, "one")
    loaded, meta = load_model(tmp_path / "m.ckpt")
    assert meta["stage"] == "one" and meta["config"] == model.cfg.to_dict()
    loaded.eval()
    x, v = inputs(seed=5)
    with torch.no_grad():
        a, b = model.extract(x, v), loaded.extract(x, v)
    assert torch.equal(a.s_hat, b.s_hat) and torch.equal(a.V_R, b.V_R)


def test_archive_format(tmp_path):
    save_archive(tmp_path / "a.ckpt", {"w": np.arange(6, dtype=np.float32).reshape(2, 3),
                                       "s": np.float32(1.5)}, {"k": 1})
    blob = (tmp_path / "a.ckpt").read_bytes()
    assert blob.startswith(b"AVTSE-CKPT v1 tensors=2 meta_bytes=8\n{\"k\": 1}w 2x3\n")
    tensors, meta = load_archive(tmp_path / "a.ckpt")
    assert meta == {"k": 1}
    assert tensors["w"].tolist() == [[0, 1, 2], [3, 4, 5]] and float(tensors["s"]) == 1.5
    (tmp_path / "b.ckpt").write_bytes(blob[:-2])
    with pytest.raises(CheckpointError):
        load_archive(tmp_path / "b.ckpt")


def test_pretrained_import(tmp_path, cfg):
    m = build_model(cfg)
    d = cfg.d_av
    rng = np.random.default_rng(0)
    src = {}
    for i in range(6):   # more layers than used; only the first n_av_layers are taken
        src[f"encoder.layers.{i}.self_attn.q_proj.weight"] = rng.standard_normal((d, d)).astype(np.float32)
        src[f"encoder.layers.{i}.fc1.bias"] = rng.standard_normal(4 * d).astype(np.float32)
        src[f"encoder.layers.{i}.final_layer_norm.weight"] = rng.standard_normal(d).astype(np.float32)
    src["encoder.layer_norm.weight"] = np.ones(d, np.float32)
    save_archive(tmp_path / "avhubert.ckpt", src)
    loaded = import_pretrained_transformer(m, tmp_path / "avhubert.ckpt")
    assert len(loaded) == 3 * cfg.n_av_layers
    got = m.cue_encoder.layers[2].attn.q_proj.weight.detach().numpy()
    assert np.array_equal(got, src["encoder.layers.2.self_attn.q_proj.weight"])
    assert map_pretrained_name("encoder.layers.0.self_attn_layer_norm.bias") == "cue_encoder.layers.0.attn_norm.bias"
    assert map_pretrained_name("encoder.layer_norm.weight") is None


def test_reset_mar_block_changes_only_mar(cfg):
    m = build_model(cfg)
    before = {k: v.clone() for k, v in m.state_dict().items()}
    m.reset_mar_block(seed=99)
    after = m.state_dict()
    for k in before:
        if k.startswith("mar_block."):
            continue
        assert torch.equal(before[k], after[k])
    assert any(not torch.equal(before[k], after[k]) for k in before if k.startswith("mar_block."))
