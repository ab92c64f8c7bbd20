import json
import math

import numpy as np
import pytest

from vcstar import convert as conv
from vcstar import dsp, pipeline, toy
from vcstar import io as vio

MCD_K = 10 / math.log(10)


def identity(feats, index):
    return feats


@pytest.fixture(scope="module")
def audio_store(tmp_path_factory):
    root = tmp_path_factory.mktemp("conv_audio")
    toy.make_toy_audio(root, n_speakers=4, n_utterances=3, seconds=1.5)
    store, _ = pipeline.extract_and_cache(pipeline.scan_dataset(root))
    return root, store


@pytest.fixture(scope="module")
def bundle(audio_store):
    _, store = audio_store
    return pipeline.Trainer(pipeline.TrainConfig(architecture="tiny", crop_frames=64), store).bundle


@pytest.fixture(scope="module")
def wave(audio_store):
    root, _ = audio_store
    return vio.read_wav(root / "spk1" / "utt000.wav")


def snr_db(ref, est):
    return 10 * np.log10(np.sum(ref ** 2) / np.sum((ref - est) ** 2))


class TestRequest:
    def test_gain_reference_needs_source(self):
        with pytest.raises(ValueError, match="source"):
            conv.ConversionRequest(target="a", features=np.zeros((3, 8)), mode="gain_reference")

    def test_exactly_one_input(self):
        with pytest.raises(ValueError):
            conv.ConversionRequest(target="a")
        with pytest.raises(ValueError):
            conv.ConversionRequest(target="a", wave=np.zeros(10), features=np.zeros((3, 8)))

    def test_mode_spelling(self):
        req = conv.ConversionRequest(target="a", source="b", features=np.zeros((3, 8)), mode="gain-reference")
        assert req.mode == "gain_reference"

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            conv.ConversionRequest(target="a", features=np.zeros((3, 8)), mode="magic")


class TestConvertUtterance:
    def test_identity_stub_unit_gain(self, bundle, wave):
        x, sr = wave
        res = conv.convert_utterance(conv.ConversionRequest("spk2", wave=x, sample_rate=sr), bundle, identity)
        np.testing.assert_allclose(res.gains, 1.0, atol=1e-3)
        assert snr_db(x, res.wave) >= 30

    def test_gain_reference_equal_outputs(self, bundle, wave):
        x, sr = wave
        src = bundle.speaker_index("spk1")

        def stub(feats, index):
            return feats if index == src else 0.8 * feats + 0.3

        a = conv.convert_utterance(conv.ConversionRequest("spk3", wave=x, sample_rate=sr), bundle, stub)
        b = conv.convert_utterance(conv.ConversionRequest("spk3", wave=x, sample_rate=sr, source="spk1",
                                                          mode="gain_reference"), bundle, stub)
        np.testing.assert_array_equal(a.gains, b.gains)
        np.testing.assert_array_equal(a.wave, b.wave)
        assert np.abs(a.gains - 1).max() > 1e-3

    def test_gain_reference_same_outputs_unit_gain(self, bundle, wave):
        x, sr = wave

        def stub(feats, index):
            return 0.5 * feats

        res = conv.convert_utterance(conv.ConversionRequest("spk0", wave=x, sample_rate=sr, source="spk1",
                                                            mode="gain_reference"), bundle, stub)
        np.testing.assert_allclose(res.gains, 1.0, atol=1e-6)

    def test_f0_moments_from_utterance(self, bundle, wave):
        x, sr = wave
        res = conv.convert_utterance(conv.ConversionRequest("spk3", wave=x, sample_rate=sr), bundle, identity)
        tgt = bundle.f0_stats["spk3"]
        lf = np.log(res.f0[res.f0 > 0])
        assert abs(lf.mean() - tgt.mean_logf0) <= 0.01 * abs(tgt.mean_logf0)
        assert abs(lf.std() - tgt.std_logf0) <= 0.01 * tgt.std_logf0

    def test_duration_within_hop(self, bundle, wave):
        x, sr = wave
        res = conv.convert_utterance(conv.ConversionRequest("spk0", wave=x, sample_rate=sr), bundle)
        assert abs(res.wave.size - x.size) <= bundle.dsp_config.hop

    def test_deterministic(self, bundle, wave):
        x, sr = wave
        req = conv.ConversionRequest("spk0", wave=x, sample_rate=sr)
        a, b = conv.convert_utterance(req, bundle), conv.convert_utterance(req, bundle)
        assert a.wave.tobytes() == b.wave.tobytes() and a.mcc.tobytes() == b.mcc.tobytes()

    def test_c0_passed_through(self, bundle, audio_store):
        item = audio_store[1].items[0]
        res = conv.convert_utterance(conv.ConversionRequest("spk2", features=item.mcc, f0=item.f0), bundle)
        assert res.wave is None
        np.testing.assert_array_equal(res.mcc[0], item.mcc[0])
        assert res.mcc.shape == item.mcc.shape

    def test_unknown_target(self, bundle, audio_store):
        item = audio_store[1].items[0]
        with pytest.raises(KeyError):
            conv.convert_utterance(conv.ConversionRequest("nobody", features=item.mcc), bundle)

    def test_too_short(self, bundle, audio_store):
        item = audio_store[1].items[0]
        with pytest.raises(ValueError, match="frames"):
            conv.convert_utterance(conv.ConversionRequest("spk0", features=item.mcc[:, :2]), bundle)

    def test_wrong_order(self, bundle):
        with pytest.raises(ValueError, match="order"):
            conv.convert_utterance(conv.ConversionRequest("spk0", features=np.zeros((5, 40))), bundle)

    def test_unvoiced_f0_unchanged(self, bundle, audio_store):
        item = audio_store[1].items[0]
        res = conv.convert_utterance(conv.ConversionRequest("spk0", features=item.mcc), bundle, identity)
        assert not res.f0.any()

    def test_write_outputs(self, bundle, wave, tmp_path):
        x, sr = wave
        res = conv.convert_utterance(conv.ConversionRequest("spk0", wave=x, sample_rate=sr), bundle)
        paths = conv.write_outputs(res, tmp_path / "out", sr)
        assert [p.name for p in paths] == ["out.wav", "out.mcc.fea1", "out.f0.fea1"]
        mcc, kind = vio.read_fea1(paths[1])
        assert kind == vio.KIND_MCC and mcc.tobytes() == res.mcc.astype(np.float32).tobytes()


class TestMcd:
    def test_zero(self, rng):
        x = rng.standard_normal((5, 7))
        assert conv.mcd(x, x) == 0

    def test_single_value(self):
        x = np.zeros((1, 1))
        y = np.full((1, 1), 0.3)
        assert conv.mcd(x, y, dims=[0]) == pytest.approx(MCD_K * math.sqrt(2) * 0.3)

    def test_symmetric(self, rng):
        x, y = rng.standard_normal((5, 7)), rng.standard_normal((5, 7))
        assert conv.mcd(x, y) == conv.mcd(y, x)

    def test_excludes_c0_by_default(self, rng):
        x = rng.standard_normal((4, 6))
        y = x.copy()
        y[0] += 5
        assert conv.mcd(x, y) == 0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            conv.mcd(np.zeros((3, 4)), np.zeros((3, 5)))


class TestEval:
    def test_report_shape_and_identity(self, bundle, audio_store):
        report = conv.eval_conversion(bundle, audio_store[1].items, identity)
        assert len(report["pairs"]) == 12
        assert {(p["source"], p["target"]) for p in report["pairs"]} == {
            (a, b) for a in bundle.speakers for b in bundle.speakers if a != b}
        for p in report["pairs"]:
            assert p["n_utterances"] == 3
            assert p["identity_mcd"] == pytest.approx(0, abs=1e-4)
            assert p["cycle_mcd"] == pytest.approx(0, abs=1e-4)
            assert 0 <= p["classifier_accuracy"] <= 1 and 0 <= p["mean_d_score"] <= 1
        assert report["real_baseline"]["n_utterances"] == 12
        assert 0 <= conv.overall_accuracy(report) <= 1

    def test_report_json(self, bundle, audio_store, tmp_path):
        report = conv.eval_conversion(bundle, audio_store[1].items[:2])
        conv.write_report(report, tmp_path / "r.json")
        back = json.loads((tmp_path / "r.json").read_text())
        assert back == report
        assert any(p["classifier_accuracy"] is None for p in back["pairs"])
