import itertools
import json

import numpy as np
import pytest

import sedt

TINY_CONFIG = {
    "train_manifest": "train/manifest.jsonl",
    "valid_manifest": "valid/manifest.jsonl",
    "epochs_learning": 2,
    "epochs_finetune": 1,
    "batch_size": 2,
    "d_model": 16,
    "n_heads": 2,
    "ffn_width": 16,
    "encoder_layers": 1,
    "decoder_layers": 1,
    "num_queries": 4,
    "backbone_channels": [4, 8],
}


def test_interval_geometry():
    assert sedt.interval_iou((0.5, 0.2), (0.5, 0.2)) == pytest.approx(1.0)
    assert sedt.interval_giou((0.2, 0.2), (0.7, 0.2)) == pytest.approx(-0.3 / 0.7, abs=1e-12)
    with pytest.raises(sedt.ValidationError):
        sedt.interval_iou((0.5, 0.0), (0.5, 0.1))


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(0)
    for n in range(2, 6):
        cost = rng.uniform(-1, 1, size=(n, n))
        cols, total = sedt.hungarian(cost)
        best = min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
        assert total == pytest.approx(best, abs=1e-12)
        assert sorted(cols) == list(range(n))


def test_generate_scene_and_log_mel():
    samples, rate, ann = sedt.generate_scene(seed=3, index=5)
    again, _, ann2 = sedt.generate_scene(seed=3, index=5)
    assert np.array_equal(samples, again)
    assert ann == ann2
    assert rate == 16000
    assert samples.shape == (int(ann["clip_len_s"] * rate),)
    for e in ann["events"]:
        assert 0.0 <= e["onset_s"] <= e["offset_s"] <= ann["clip_len_s"]
    spec = sedt.log_mel(samples, rate)
    assert spec.shape == (1000, 64)
    assert np.isfinite(spec).all()


def test_lr_schedule():
    assert sedt.lr_schedule(100, 1e-4, 100) == pytest.approx(1e-5)
    with pytest.raises(sedt.ValidationError):
        sedt.lr_schedule(1, 1e-4, 0)


def test_train_predict_evaluate(tmp_path):
    train_manifest = sedt.write_synthetic_dataset(tmp_path / "train", 4, seed=5, weak=1)
    sedt.write_synthetic_dataset(tmp_path / "valid", 2, seed=5, first_index=100)
    clips = sedt.load_manifest(train_manifest)
    assert len(clips) == 4
    assert clips[0]["supervision"] == "weak"

    best = sedt.train(json.dumps(TINY_CONFIG), tmp_path / "run", base_dir=tmp_path)
    tuned = sedt.train(json.dumps(TINY_CONFIG), tmp_path / "ft", stage="finetune", from_checkpoint=best, base_dir=tmp_path)
    det = sedt.Detector(tuned)
    assert det.stage == "finetune"
    assert det.classes == sorted(det.classes)

    wav = next((tmp_path / "valid" / "audio").glob("*.wav"))
    out = det.predict_wav(wav, fusion="1")
    assert set(out["tags"]) == set(det.classes)
    for e in out["events"]:
        assert e["label"] in det.classes
        assert 0.0 <= e["onset_s"] <= e["offset_s"]

    report = det.evaluate(tmp_path / "valid" / "manifest.jsonl", ["none", "3"])
    assert [r["fusion"] for r in report] == ["none", "3"]
    assert det.evaluate(tmp_path / "valid" / "manifest.jsonl") == det.evaluate(tmp_path / "valid" / "manifest.jsonl")

    with pytest.raises(sedt.ValidationError):
        sedt.train(json.dumps(TINY_CONFIG), tmp_path / "bad", stage="finetune", base_dir=tmp_path)
