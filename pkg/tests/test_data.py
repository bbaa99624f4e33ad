import json
import os

import numpy as np
import pytest

from affnet.data import (Dataset, SynthConfig, batch_order, batches, collate, generate_synthetic,
                         linear_probe_error, load_manifest, preprocess_sample, read_ppm, write_ppm)
from affnet.errors import ManifestError
from affnet.geometry import BoundingBox, crop_resize_normalize, hflip

DEVICE = {"screen_w_cm": 6.0, "screen_h_cm": 10.0, "screen_w_px": 600, "screen_h_px": 1000,
          "camera_offset_cm": [3.0, 0.0]}
BOXES = {"face_box": [10, 10, 90, 90], "left_eye_box": [20, 20, 40, 40], "right_eye_box": [60, 20, 80, 40]}


def write_lines(path, objs):
    path.write_text("".join((o if isinstance(o, str) else json.dumps(o)) + "\n" for o in objs))
    return path


def base_record(**extra):
    rec = {"subject_id": "a", "frame_path": "f.ppm", "frame_w": 100, "frame_h": 100, "label_cm": [1, 2], **BOXES}
    rec.update(extra)
    return rec


class TestPPM:
    def test_round_trip(self, tmp_path, rng):
        img = rng.integers(0, 256, size=(7, 5, 3), dtype=np.uint8)
        write_ppm(tmp_path / "x.ppm", img)
        np.testing.assert_array_equal(read_ppm(tmp_path / "x.ppm"), img)

    def test_comment_header(self, tmp_path):
        (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n2 1\n255\n" + bytes([1, 2, 3, 4, 5, 6]))
        assert read_ppm(tmp_path / "c.ppm").tolist() == [[[1, 2, 3], [4, 5, 6]]]

    def test_rejects_ascii_ppm(self, tmp_path):
        (tmp_path / "a.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(ValueError):
            read_ppm(tmp_path / "a.ppm")


class TestManifest:
    def test_empty(self, tmp_path):
        (tmp_path / "m.jsonl").write_text("")
        assert load_manifest(tmp_path / "m.jsonl") == []

    def test_label_px_conversion(self, tmp_path):
        rec = base_record(label_px=[300, 500], device=DEVICE)
        del rec["label_cm"]
        (r,) = load_manifest(write_lines(tmp_path / "m.jsonl", [rec]))
        assert r.label_cm == pytest.approx((0.0, 5.0), abs=1e-15)

    def test_missing_geometry_rejected(self, tmp_path):
        rec = base_record()
        for k in BOXES:
            del rec[k]
        with pytest.raises(ManifestError, match="landmarks"):
            load_manifest(write_lines(tmp_path / "m.jsonl", [rec]))

    def test_missing_label_listed(self, tmp_path):
        rec = base_record()
        del rec["label_cm"]
        with pytest.raises(ManifestError, match="label_px"):
            load_manifest(write_lines(tmp_path / "m.jsonl", [rec]))

    def test_malformed_line_number(self, tmp_path):
        path = write_lines(tmp_path / "m.jsonl", [base_record(), "{not json"])
        with pytest.raises(ManifestError, match=r"m\.jsonl:2"):
            load_manifest(path)

    def test_order_and_split(self, tmp_path):
        recs = [base_record(subject_id=s, split="test") for s in "cab"]
        loaded = load_manifest(write_lines(tmp_path / "m.jsonl", recs))
        assert [r.subject_id for r in loaded] == ["c", "a", "b"] and loaded[0].split == "test"

    def test_explicit_boxes_used(self, tmp_path):
        (r,) = load_manifest(write_lines(tmp_path / "m.jsonl", [base_record()]))
        assert r.boxes()[1] == BoundingBox(20, 20, 40, 40)


class TestSynthetic:
    def test_probe_is_exact(self, small_synth):
        path, truth, cfg = small_synth
        assert linear_probe_error(truth) < 0.1
        assert len(path.read_text().splitlines()) == cfg.n_samples

    def test_256_lines_and_labels_in_range(self, tmp_path):
        cfg = SynthConfig(n_samples=256, seed=1, frame_w=160, frame_h=120, eye_corner_px=10,
                          regime_px=15, jitter_px=5)
        path, truth = generate_synthetic(cfg, tmp_path)
        recs = load_manifest(path)
        assert len(recs) == 256
        labels = np.array([r.label_cm for r in recs])
        assert labels[:, 0].min() >= -6 and labels[:, 0].max() <= 6
        assert labels[:, 1].min() >= 1 and labels[:, 1].max() <= 11
        assert linear_probe_error(truth) < 0.1

    def test_byte_identical(self, tmp_path):
        cfg = SynthConfig(n_samples=4, seed=9, n_subjects=2)
        generate_synthetic(cfg, tmp_path / "a")
        generate_synthetic(cfg, tmp_path / "b")
        for rel in ["manifest.jsonl", "truth.jsonl"] + [f"frames/{i:06d}.ppm" for i in range(4)]:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_config_round_trip(self):
        cfg = SynthConfig(n_samples=3, label_range_cm=((0, 1), (2, 3)))
        assert SynthConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_empty_range_rejected(self):
        with pytest.raises(ValueError):
            SynthConfig(label_range_cm=((1, 1), (0, 2)))


class TestPreprocess:
    def test_clean_is_repeatable(self, small_dataset):
        a, b = small_dataset.sample(0), Dataset(small_dataset.records, small_dataset.root).sample(0)
        assert a is small_dataset.sample(0)
        for k in ("face", "eye_left", "eye_right_flipped", "rects"):
            np.testing.assert_array_equal(getattr(a, k), getattr(b, k))

    def test_augmented_is_seeded(self, small_dataset):
        a = small_dataset.sample(3, augment=True, seed=1, epoch=2)
        b = small_dataset.sample(3, augment=True, seed=1, epoch=2)
        c = small_dataset.sample(3, augment=True, seed=1, epoch=3)
        np.testing.assert_array_equal(a.face, b.face)
        np.testing.assert_array_equal(a.rects, b.rects)
        assert not np.array_equal(a.rects, c.rects)

    def test_invariants(self, small_dataset):
        for i in range(len(small_dataset)):
            s = small_dataset.sample(i, augment=True, seed=0, epoch=0)
            assert s.face.shape == (3, 224, 224) and s.eye_left.shape == (3, 112, 112)
            for img in (s.face, s.eye_left, s.eye_right_flipped):
                assert img.min() >= 0 and img.max() <= 1
            assert s.rects.shape == (12,)

    def test_right_eye_is_flipped_crop(self, small_dataset):
        rec = small_dataset.records[1]
        s = small_dataset.sample(1)
        raw = crop_resize_normalize(small_dataset.frame(1), rec.boxes()[2], (112, 112)).astype(np.float32)
        np.testing.assert_array_equal(s.eye_right_flipped, hflip(raw))

    def test_face_width_recorded_before_resize(self, small_dataset):
        s = small_dataset.sample(0)
        assert s.face_width_px == pytest.approx(small_dataset.records[0].boxes()[0].width)
        assert s.frame_short_px == 360

    def test_rects_follow_shift(self, small_dataset):
        rec = small_dataset.records[2]
        s = small_dataset.sample(2, augment=True, seed=4, epoch=0)
        face = s.rects[:4] * [rec.frame_w, rec.frame_h, rec.frame_w, rec.frame_h]
        assert face[2] - face[0] == pytest.approx(rec.boxes()[0].width)

    def test_sized_shares_frames(self, small_dataset):
        small = small_dataset.sized(32, 16)
        assert small.sample(0).face.shape == (3, 32, 32)
        assert small._frames is small_dataset._frames

    def test_thread_count_does_not_matter(self, small_dataset, monkeypatch):
        monkeypatch.setenv("AFFNET_THREADS", "1")
        serial = small_dataset.samples(range(8), augment=True, seed=2, epoch=1)
        monkeypatch.setenv("AFFNET_THREADS", "4")
        parallel = small_dataset.samples(range(8), augment=True, seed=2, epoch=1)
        for a, b in zip(serial, parallel):
            np.testing.assert_array_equal(a.face, b.face)


class TestBatching:
    def test_sizes(self):
        assert [len(b) for b in batch_order(10, 4)] == [4, 4, 2]

    def test_seeded_partition(self):
        a, b = batch_order(37, 8, 5), batch_order(37, 8, 5)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert sorted(np.concatenate(a).tolist()) == list(range(37))
        assert not np.array_equal(np.concatenate(a), np.arange(37))

    def test_bad_batch_size(self):
        with pytest.raises(ValueError):
            batch_order(3, 0)

    def test_collate(self, small_dataset):
        samples = small_dataset.samples(range(5))
        bs = batches(samples, 2)
        assert [len(b) for b in bs] == [2, 2, 1]
        b = collate(samples[:3], np.float64)
        assert b.face.shape == (3, 3, 224, 224) and b.face.dtype == np.float64
        assert b.labels.shape == (3, 2) and b.rects.shape == (3, 12)
