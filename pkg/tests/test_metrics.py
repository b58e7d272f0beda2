import math
import stat
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avtse import metrics
from avtse.metrics import EvalReport, UtteranceScore, pesq_external, sdr, si_sdr, si_sdr_improvement, stoi
from avtse.mixture_sim import speaker_f0, synth_utterance


def cosine_si_sdr(est, ref):
    c = float(np.dot(est, ref) / (np.linalg.norm(est) * np.linalg.norm(ref)))
    return 10 * math.log10(c * c / (1 - c * c))


@pytest.fixture(scope="module")
def speech():
    r = np.random.default_rng(0)
    env = np.tile([0.05] * 6 + [1.0] * 10, 10)[:150]
    return synth_utterance(speaker_f0(2), 1.0, env, r)[:64000]


def test_si_sdr_hand_case():
    assert si_sdr([1.0, 1.0], [1.0, 0.0]) == 0.0


def test_si_sdr_cap_and_scale(rng):
    ref = rng.standard_normal(1000)
    assert si_sdr(2 * ref, ref) == metrics.DB_CAP
    est = ref + 0.3 * rng.standard_normal(1000)
    for c in (0.1, 3.0):
        assert abs(si_sdr(c * est, ref) - si_sdr(est, ref)) < 1e-6


def test_si_sdr_oracle(rng):
    for _ in range(100):
        ref, est = rng.standard_normal(256), rng.standard_normal(256)
        assert si_sdr(est, ref) == pytest.approx(cosine_si_sdr(est, ref), abs=1e-9)


def test_si_sdr_agrees_with_loss(rng):
    import torch

    from avtse.objectives import si_sdr_loss

    ref = rng.standard_normal(4000)
    est = ref + 0.5 * rng.standard_normal(4000)
    loss = float(si_sdr_loss(torch.as_tensor(ref), torch.as_tensor(est)))
    assert abs(si_sdr(est, ref) + loss) < 1e-6


def test_si_sdri(rng):
    ref = rng.standard_normal(1000)
    mix = ref + rng.standard_normal(1000)
    assert si_sdr_improvement(mix, mix, ref) == 0.0
    assert si_sdr_improvement(ref, mix, ref) == pytest.approx(metrics.DB_CAP - si_sdr(mix, ref))


def test_sdr_closed_forms(rng):
    ref = rng.standard_normal(1000)
    assert sdr(ref, ref) == metrics.DB_CAP
    assert sdr(0.5 * ref, ref) == pytest.approx(10 * math.log10(4), abs=1e-9)
    assert sdr(-ref, ref) == pytest.approx(10 * math.log10(0.25), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.2, 5.0).filter(lambda c: abs(c - 1) > 0.05))
def test_sdr_not_scale_invariant(seed, c):
    r = np.random.default_rng(seed)
    ref = r.standard_normal(500)
    est = ref + 0.1 * r.standard_normal(500)
    assert abs(sdr(c * est, ref) - sdr(est, ref)) > 1e-3


def test_stoi_identity_and_sign(speech):
    assert stoi(speech, speech) == pytest.approx(1.0, abs=1e-6)
    assert stoi(-speech, speech) == pytest.approx(1.0, abs=1e-6)


def test_stoi_monotone_in_noise(speech):
    r = np.random.default_rng(1)
    noise = r.standard_normal(speech.shape[0])
    noise *= np.sqrt(np.mean(speech ** 2) / np.mean(noise ** 2))
    scores = [stoi(speech + noise * 10 ** (-snr / 20), speech) for snr in (20, 0, -10)]
    assert 1.0 > scores[0] > scores[1] > scores[2]
    assert all(-1 <= s <= 1 for s in scores)


def test_stoi_too_short():
    with pytest.raises(metrics.STOIError):
        stoi(np.ones(4000) * 0.1, np.ones(4000) * 0.1)


def test_stoi_matches_reference_package(speech):
    pystoi = pytest.importorskip("pystoi")
    r = np.random.default_rng(2)
    degraded = speech + 0.3 * r.standard_normal(speech.shape[0]) * np.std(speech)
    # resampler differs from the reference package, so only near-agreement is expected
    assert stoi(degraded, speech) == pytest.approx(pystoi.stoi(speech, degraded, 16000), abs=0.02)


def test_third_octave_bands():
    obm = metrics.third_octave_matrix()
    assert obm.shape == (15, 257)
    assert np.all(obm.sum(axis=1) >= 1)


@pytest.fixture
def fake_tool(tmp_path):
    def make(body):
        path = tmp_path / "pesq_tool"
        path.write_text(f"#!{sys.executable}\nimport sys\n{body}\n")
        path.chmod(path.stat().st_mode | stat.S_IEXEC)
        return path
    return make


def test_pesq_unconfigured_is_absent(tmp_path):
    assert pesq_external(tmp_path / "a.wav", tmp_path / "b.wav", None) is None


def test_pesq_passthrough(fake_tool, tmp_path):
    tool = fake_tool("print('P.862 Prediction (Raw MOS, MOS-LQO): = 4.5')")
    assert pesq_external(tmp_path / "a.wav", tmp_path / "b.wav", tool) == 4.5


def test_pesq_failure_is_isolated(fake_tool, rng):
    tool = fake_tool("sys.exit(3)")
    ref = rng.standard_normal(1000)
    rec = metrics.score_utterance("u", ref, ref, ref, with_stoi=False, pesq_paths=("a", "b"), pesq_tool=tool)
    assert rec.pesq is None and "pesq" in rec.errors
    assert rec.si_sdr == metrics.DB_CAP


def test_report_aggregate_and_exports(tmp_path):
    rep = EvalReport([UtteranceScore("a", 1.0, 2.0, 3.0, 0.5), UtteranceScore("b", 3.0, 4.0, 5.0, 0.7)])
    agg = rep.aggregate()
    assert agg["si_sdr"] == 2.0 and agg["si_sdri"] == 3.0 and agg["sdr"] == 4.0
    assert agg["stoi"] == pytest.approx(0.6) and agg["pesq"] is None and agg["count"] == 2
    rep.save(tmp_path / "r.json")
    assert EvalReport.load(tmp_path / "r.json").aggregate() == agg
    rep.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "id,si_sdr,si_sdri,sdr,stoi,pesq"
    assert len(lines) == 3 and lines[1].endswith(",")
