import csv
import shutil

import numpy as np
import pytest

from vcstar import dsp, losses, toy
from vcstar import io as vio
from vcstar import pipeline
from vcstar.models import one_hot
from vcstar.ndgrad import Tensor, no_grad


@pytest.fixture(scope="module")
def toy_audio_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_audio")
    toy.make_toy_audio(root, n_speakers=4, n_utterances=6, seconds=2.0)
    return root


class TestScan:
    def test_counts(self, tmp_path):
        toy.make_toy_features(tmp_path, n_speakers=4, n_utterances=2, order=5, min_frames=8, max_frames=8)
        m = pipeline.scan_dataset(tmp_path)
        assert m.n_speakers == 4
        assert [s.index for s in m.speakers] == [0, 1, 2, 3]
        assert len(list(m.utterances())) == 8

    def test_deterministic(self, toy_features_dir):
        assert pipeline.scan_dataset(toy_features_dir) == pipeline.scan_dataset(toy_features_dir)

    def test_every_speaker_has_train(self, toy_features_dir):
        m = pipeline.scan_dataset(toy_features_dir, eval_fraction=0.99)
        for spk in m.speakers:
            assert any(u.split == "train" for u in spk.utterances)

    def test_missing_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            pipeline.scan_dataset(tmp_path / "nope")

    def test_no_speakers(self, tmp_path):
        with pytest.raises(pipeline.DatasetError, match="no speakers found"):
            pipeline.scan_dataset(tmp_path)

    def test_empty_speaker(self, tmp_path):
        (tmp_path / "a").mkdir()
        with pytest.raises(pipeline.DatasetError, match="no utterances"):
            pipeline.scan_dataset(tmp_path)

    def test_eval_list(self, tmp_path):
        toy.make_toy_features(tmp_path, n_speakers=2, n_utterances=3, order=5, min_frames=8, max_frames=8)
        (tmp_path / "eval.txt").write_text("spk0/utt001\nspk1/utt002\n")
        m = pipeline.scan_dataset(tmp_path)
        assert sorted(f"{s.speaker_id}/{u.utt_id}" for s, u in m.utterances("eval")) == ["spk0/utt001",
                                                                                           "spk1/utt002"]

    def test_all_eval_rejected(self, tmp_path):
        toy.make_toy_features(tmp_path, n_speakers=2, n_utterances=1, order=5, min_frames=8, max_frames=8)
        (tmp_path / "eval.txt").write_text("spk0/utt000\n")
        with pytest.raises(pipeline.DatasetError, match="no training"):
            pipeline.scan_dataset(tmp_path)


class TestExtract:
    def test_frame_count(self, tmp_path):
        cfg = dsp.DspConfig()
        t = np.arange(cfg.sample_rate) / cfg.sample_rate
        (tmp_path / "a").mkdir()
        vio.write_wav(tmp_path / "a" / "u.wav", 0.3 * np.sin(2 * np.pi * 150 * t), cfg.sample_rate)
        store, n = pipeline.extract_and_cache(pipeline.scan_dataset(tmp_path), cfg)
        assert n == 1
        assert abs(store.items[0].frames - cfg.sample_rate / cfg.hop) <= 2

    def test_cache_reuse(self, toy_audio_dir, tmp_path):
        m = pipeline.scan_dataset(toy_audio_dir)
        s1, n1 = pipeline.extract_and_cache(m, cache_dir=tmp_path)
        s2, n2 = pipeline.extract_and_cache(m, cache_dir=tmp_path)
        assert n1 == 24 and n2 == 0
        for a, b in zip(s1.items, s2.items):
            assert a.mcc.tobytes() == b.mcc.tobytes()
            np.testing.assert_array_equal(a.f0, b.f0)
        assert (tmp_path / "spk0" / "utt000.mcc.fea1").exists()
        assert (tmp_path / "spk0" / "utt000.f0.fea1").exists()

    def test_config_change_invalidates(self, toy_audio_dir, tmp_path):
        m = pipeline.scan_dataset(toy_audio_dir)
        pipeline.extract_and_cache(m, cache_dir=tmp_path)
        _, n = pipeline.extract_and_cache(m, dsp.DspConfig(order=20), cache_dir=tmp_path)
        assert n == 24

    def test_fea1_override_exact(self, toy_features_dir):
        store, n = pipeline.extract_and_cache(pipeline.scan_dataset(toy_features_dir))
        assert n == 0
        item = store.items[0]
        raw, _ = vio.read_fea1(toy_features_dir / item.speaker / f"{item.utt_id}.mcc.fea1")
        assert raw.tobytes() == item.mcc.tobytes()

    def test_corrupt_audio(self, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "a" / "bad.wav").write_bytes(b"garbage")
        with pytest.raises(pipeline.DatasetError, match="bad.wav"):
            pipeline.extract_and_cache(pipeline.scan_dataset(tmp_path))

    def test_rate_mismatch(self, tmp_path):
        (tmp_path / "a").mkdir()
        vio.write_wav(tmp_path / "a" / "u.wav", np.zeros(8000), 8000)
        with pytest.raises(pipeline.DatasetError, match="sample rate"):
            pipeline.extract_and_cache(pipeline.scan_dataset(tmp_path))

    def test_eval_deletion_invariance(self, toy_features_dir, tmp_path):
        full = tmp_path / "full"
        shutil.copytree(toy_features_dir, full)
        m = pipeline.scan_dataset(full)
        (full / "eval.txt").write_text("".join(f"{s.speaker_id}/{u.utt_id}\n" for s, u in m.utterances("eval")))
        store_a, _ = pipeline.extract_and_cache(pipeline.scan_dataset(full))
        pruned = tmp_path / "pruned"
        shutil.copytree(full, pruned)
        for s, u in m.utterances("eval"):
            for suffix in (".mcc.fea1", ".f0.fea1"):
                (pruned / s.speaker_id / f"{u.utt_id}{suffix}").unlink()
        store_b, _ = pipeline.extract_and_cache(pipeline.scan_dataset(pruned))
        assert len(store_b.items) < len(store_a.items)
        assert store_a.f0_stats == store_b.f0_stats
        cfg = pipeline.TrainConfig(architecture="tiny", crop_frames=16)
        na, nb = pipeline.Trainer(cfg, store_a).bundle.norm, pipeline.Trainer(cfg, store_b).bundle.norm
        assert na.mean.tobytes() == nb.mean.tobytes() and na.std.tobytes() == nb.std.tobytes()


class TestNorm:
    def test_round_trip(self, rng):
        seqs = [rng.normal(3, 2, (6, n)).astype(np.float32) for n in (10, 20)]
        norm = pipeline.NormStats.fit(seqs)
        x = seqs[1]
        back = norm.denormalize(norm.normalize(x), x[0])
        assert np.max(np.abs(back - x)) <= 1e-6 * max(1.0, np.abs(x).max())

    def test_standardized(self, rng):
        seqs = [rng.normal(3, 2, (4, 500))]
        z = pipeline.NormStats.fit(seqs).normalize(seqs[0])
        np.testing.assert_allclose(z.mean(axis=1), 0, atol=1e-5)
        np.testing.assert_allclose(z.std(axis=1), 1, atol=1e-4)

    def test_std_floor(self):
        norm = pipeline.NormStats.fit([np.ones((3, 5))])
        assert (norm.std >= 1e-6).all()


class TestMinibatch:
    def test_full_length_crop(self, rng):
        seq = rng.standard_normal((4, 12)).astype(np.float32)
        b = pipeline.sample_minibatch([seq], np.array([0]), 2, 3, 12, rng)
        for i in range(3):
            np.testing.assert_array_equal(b.x[i, 0], seq)

    def test_deterministic(self, toy_store):
        feats = [u.mcc[1:] for u in toy_store.items]
        labels = np.array([u.label for u in toy_store.items])
        a = pipeline.sample_minibatch(feats, labels, 4, 5, 16, np.random.default_rng(9))
        b = pipeline.sample_minibatch(feats, labels, 4, 5, 16, np.random.default_rng(9))
        assert a.x.tobytes() == b.x.tobytes()
        np.testing.assert_array_equal(a.src, b.src)
        np.testing.assert_array_equal(a.tgt, b.tgt)

    def test_target_uniform(self):
        rng = np.random.default_rng(0)
        feats = [np.zeros((2, 4), np.float32)]
        k, n = 4, 10_000
        counts = np.zeros(k)
        for _ in range(n // 100):
            b = pipeline.sample_minibatch(feats, np.array([0]), k, 100, 4, rng)
            counts += np.bincount(b.tgt, minlength=k)
        sigma = np.sqrt(n * (1 / k) * (1 - 1 / k))
        assert np.all(np.abs(counts - n / k) <= 3 * sigma)

    def test_reflection_pad(self):
        seq = np.arange(4, dtype=np.float32).reshape(1, 4)
        np.testing.assert_array_equal(pipeline.crop_or_pad(seq, 9, 0)[0], [0, 1, 2, 3, 2, 1, 0, 1, 2])

    def test_empty(self, rng):
        with pytest.raises(pipeline.DatasetError):
            pipeline.sample_minibatch([], np.array([]), 2, 1, 4, rng)


class TestConfig:
    def test_round_trip(self, tmp_path, tiny_config):
        import json
        (tmp_path / "c.json").write_text(json.dumps(tiny_config.to_dict()))
        assert pipeline.TrainConfig.load(tmp_path / "c.json") == tiny_config

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            pipeline.TrainConfig.from_dict({"bogus": 1})

    def test_invalid(self):
        with pytest.raises(ValueError):
            pipeline.TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            pipeline.TrainConfig(architecture="tiny", crop_frames=2).build_architecture(8, 2)


class TestTraining:
    def test_metric_keys(self, toy_store, tiny_config):
        tr = pipeline.Trainer(tiny_config, toy_store)
        m = tr.train_step(tr.next_batch())
        assert set(m) == set(pipeline.METRIC_KEYS)
        assert all(np.isfinite(v) for v in m.values())

    def test_same_seed_same_trace(self, toy_store, tiny_config):
        def trace():
            tr = pipeline.Trainer(tiny_config, toy_store)
            return [tr.train_step(tr.next_batch()) for _ in range(3)]

        assert trace() == trace()

    def test_frozen_d_descent(self, toy_store, tiny_config):
        cfg = pipeline.with_overrides(tiny_config, weights=losses.LossWeights(0, 0, 0), lr_d=0.0, lr_c=0.0,
                                      lr_g=1e-5)
        tr = pipeline.Trainer(cfg, toy_store)
        batch = tr.next_batch()
        before = tr.train_step(batch)["adv_g"]
        k = len(toy_store.speakers)
        with no_grad():
            tgt = one_hot(batch.tgt, k)
            fake = tr.nets.generator(Tensor(batch.x), tgt)
            after = losses.adv_loss_g(tr.nets.discriminator(fake, tgt)[1]).item()
        assert after < before

    def test_zero_iterations(self, toy_store, tiny_config, tmp_path):
        paths = pipeline.train(tiny_config, toy_store, tmp_path, iterations=0)
        assert [p.name for p in paths] == ["ckpt_0000000.vcsk"]
        bundle = pipeline.load_bundle(paths[0])
        assert bundle.speakers == toy_store.speakers

    def test_checkpoint_schedule_and_metrics(self, toy_store, tiny_config, tmp_path):
        paths = pipeline.train(tiny_config, toy_store, tmp_path)
        assert [p.name for p in paths] == ["ckpt_0000000.vcsk", "ckpt_0000002.vcsk", "ckpt_0000003.vcsk"]
        rows = list(csv.reader((tmp_path / "metrics.csv").open()))
        assert rows[0] == ["step", *pipeline.METRIC_KEYS]
        assert [r[0] for r in rows[1:]] == ["1", "2", "3"]

    def test_resume_equivalence(self, toy_store, tiny_config, tmp_path):
        cfg = pipeline.with_overrides(tiny_config, iterations=6, checkpoint_every=3)
        straight = pipeline.train(cfg, toy_store, tmp_path / "a")
        pipeline.train(cfg, toy_store, tmp_path / "b", iterations=3)
        resumed = pipeline.train(cfg, toy_store, tmp_path / "b", resume_from=tmp_path / "b" / "ckpt_0000003.vcsk")
        assert straight[-1].read_bytes() == resumed[-1].read_bytes()
        assert (tmp_path / "a" / "metrics.csv").read_text() == (tmp_path / "b" / "metrics.csv").read_text()

    def test_save_load_save(self, toy_store, tiny_config, tmp_path):
        tr = pipeline.Trainer(tiny_config, toy_store)
        tr.train_step(tr.next_batch())
        tr.save(tmp_path / "a.vcsk")
        other = pipeline.Trainer(pipeline.with_overrides(tiny_config, seed=5), toy_store)
        other.restore(tmp_path / "a.vcsk")
        other.config = tr.config
        other.save(tmp_path / "b.vcsk")
        assert (tmp_path / "a.vcsk").read_bytes() == (tmp_path / "b.vcsk").read_bytes()

    def test_bundle_round_trip(self, toy_store, tiny_config, tmp_path):
        tr = pipeline.Trainer(tiny_config, toy_store)
        pipeline.save_bundle(tr.bundle, tmp_path / "m.vcsk")
        b = pipeline.load_bundle(tmp_path / "m.vcsk")
        pipeline.save_bundle(b, tmp_path / "n.vcsk")
        assert (tmp_path / "m.vcsk").read_bytes() == (tmp_path / "n.vcsk").read_bytes()
        assert b.f0_stats == toy_store.f0_stats

    def test_non_finite_aborts(self, toy_store, tiny_config):
        tr = pipeline.Trainer(tiny_config, toy_store)
        tr.nets.generator.params["enc0.W"].data[...] = np.nan
        with pytest.raises(pipeline.TrainingError, match="converted features|encoder"):
            tr.train_step(tr.next_batch())

    def test_unknown_speaker(self, toy_store, tiny_config):
        with pytest.raises(KeyError):
            pipeline.Trainer(tiny_config, toy_store).bundle.speaker_index("nobody")


def test_classifier_trainability(toy_audio_dir):
    store, _ = pipeline.extract_and_cache(pipeline.scan_dataset(toy_audio_dir))
    tr = pipeline.Trainer(pipeline.TrainConfig(architecture="tiny", batch_size=8, crop_frames=64), store)
    clf = tr.nets.classifier
    k = len(store.speakers)
    for _ in range(2000):
        b = tr.next_batch()
        clf.train()
        clf.zero_grad()
        losses.cls_loss(losses.select_class(clf(Tensor(b.x)), one_hot(b.src, k))).backward()
        tr.opt_c.step()
    segs, labels = [], []
    for u in store.split("eval"):
        x = tr.bundle.norm.normalize(u.mcc)
        for s in range(0, x.shape[1] - 63, 64):
            segs.append(x[:, s:s + 64])
            labels.append(u.label)
    clf.eval()
    with no_grad():
        pred = np.argmax(clf(Tensor(np.stack(segs)[:, None])).data, axis=1)
    assert np.mean(pred == np.array(labels)) >= 0.8
