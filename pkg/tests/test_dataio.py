from datetime import date
from pathlib import Path

import numpy as np
import pytest

from rnflnet import dataio, imagefiles
from rnflnet.dataio import (ManifestError, OctRecord, PhotoRecord, augment,
                            load_manifest, load_manifest_detailed,
                            pair_photos_to_oct, preprocess, split_by_patient)

HEADER = ("patient_id,eye,photo_path,photo_date,oct_date,oct_avg_rnfl_um,"
          "oct_quality_db,diagnosis,sap_md_db,sap_psd_db,normative_class\n")


def row_line(pid="P1", eye="OD", path="img.pgm", photo="2020-01-01",
             oct_d="2020-02-01", rnfl="85.0", quality="25.0",
             diagnosis="normal", md="-1.0", psd="1.8", normative="within"):
    return f"{pid},{eye},{path},{photo},{oct_d},{rnfl},{quality},{diagnosis},{md},{psd},{normative}\n"


class TestLoadManifest:
    def test_low_signal_excluded(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text(HEADER + row_line(quality="14.9") + row_line(pid="P2"))
        rows, excluded = load_manifest_detailed(p)
        assert len(rows) == 1 and rows[0].patient_id == "P2"
        assert excluded == [(2, "low signal")]

    def test_boundary_quality_kept(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text(HEADER + row_line(quality="15.0"))
        assert len(load_manifest(p)) == 1

    def test_empty_after_header(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text(HEADER)
        assert load_manifest(p) == []

    def test_duplicates_collapse(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text(HEADER + row_line() + row_line())
        assert len(load_manifest(p)) == 1

    def test_missing_column_raises(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("patient_id,eye\nP1,OD\n")
        with pytest.raises(ManifestError, match="missing required columns"):
            load_manifest(p)

    def test_malformed_date_names_row(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text(HEADER + row_line() + row_line(photo="not-a-date"))
        with pytest.raises(ManifestError, match="row 3"):
            load_manifest(p)

    def test_out_of_range_thickness_rejected(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text(HEADER + row_line(rnfl="250.0"))
        with pytest.raises(ManifestError, match="row 2"):
            load_manifest(p)

    def test_round_trip(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text(HEADER + row_line() + row_line(pid="P2", normative=""))
        rows = load_manifest(p)
        out = tmp_path / "copy.csv"
        dataio.write_manifest(out, rows)
        again = load_manifest(out)
        assert again == rows


class TestPairing:
    def test_closest_within_window(self):
        photos = [PhotoRecord("P1", "OD", "a.pgm", date(2020, 1, 1))]
        octs = [OctRecord("P1", "OD", date(2019, 10, 1), 90.0),
                OctRecord("P1", "OD", date(2020, 8, 1), 85.0)]
        pairs = pair_photos_to_oct(photos, octs)
        assert len(pairs) == 1
        assert pairs[0][1].oct_date == date(2019, 10, 1)

    def test_window_boundary(self):
        photos = [PhotoRecord("P1", "OD", "a.pgm", date(2020, 1, 1))]
        just_inside = [OctRecord("P1", "OD", date(2020, 7, 2), 90.0)]   # 183 days
        just_outside = [OctRecord("P1", "OD", date(2020, 7, 3), 90.0)]  # 184 days
        assert len(pair_photos_to_oct(photos, just_inside)) == 1
        assert pair_photos_to_oct(photos, just_outside) == []

    def test_equidistant_tie_takes_earlier(self):
        photos = [PhotoRecord("P1", "OD", "a.pgm", date(2020, 3, 1))]
        octs = [OctRecord("P1", "OD", date(2020, 1, 31), 90.0),
                OctRecord("P1", "OD", date(2020, 3, 31), 85.0)]
        pairs = pair_photos_to_oct(photos, octs)
        assert pairs[0][1].oct_date == date(2020, 1, 31)

    def test_order_independent(self):
        rng = np.random.default_rng(0)
        photos = [PhotoRecord(f"P{i%3}", "OD", f"{i}.pgm",
                              date(2020, 1, 1) + __import__("datetime").timedelta(int(rng.integers(0, 300))))
                  for i in range(12)]
        octs = [OctRecord(f"P{i%3}", "OD",
                          date(2020, 1, 1) + __import__("datetime").timedelta(int(rng.integers(0, 300))),
                          80.0 + i) for i in range(9)]
        a = pair_photos_to_oct(photos, octs)
        b = pair_photos_to_oct(photos[::-1], octs[::-1])
        assert a == b


class _Row:
    def __init__(self, pid):
        self.patient_id = pid


class TestSplit:
    def test_ten_patients_eight_two(self):
        rows = [_Row(f"P{i}") for i in range(10)]
        assignment = split_by_patient(rows, (0.8, 0.0, 0.2), seed=0)
        counts = {s: sum(1 for v in assignment.values() if v == s) for s in ("train", "valid", "test")}
        assert counts == {"train": 8, "valid": 0, "test": 2}

    def test_no_overlap_many_seeds(self):
        rows = [_Row(f"P{i}") for i in range(23)]
        for seed in range(50):
            assignment = split_by_patient(rows, (0.7, 0.1, 0.2), seed=seed)
            by_split = {}
            for pid, split in assignment.items():
                by_split.setdefault(split, set()).add(pid)
            splits = list(by_split.values())
            for i in range(len(splits)):
                for j in range(i + 1, len(splits)):
                    assert not splits[i] & splits[j]

    def test_deterministic_in_seed(self):
        rows = [_Row(f"P{i}") for i in range(17)]
        a = split_by_patient(rows, (0.7, 0.1, 0.2), seed=42)
        b = split_by_patient(rows, (0.7, 0.1, 0.2), seed=42)
        assert a == b

    def test_fraction_within_one_patient(self):
        rows = [_Row(f"P{i}") for i in range(13)]
        assignment = split_by_patient(rows, (0.7, 0.1, 0.2), seed=3)
        for split, ratio in zip(("train", "valid", "test"), (0.7, 0.1, 0.2)):
            achieved = sum(1 for v in assignment.values() if v == split)
            assert abs(achieved - ratio * 13) < 1.0

    def test_too_few_patients(self):
        with pytest.raises(ValueError, match="cannot fill"):
            split_by_patient([_Row("P1"), _Row("P2")], (0.7, 0.1, 0.2), seed=0)

    def test_bad_ratios(self):
        rows = [_Row(f"P{i}") for i in range(5)]
        with pytest.raises(ValueError, match="sum to 1"):
            split_by_patient(rows, (0.5, 0.1, 0.2), seed=0)


class TestPreprocess:
    def test_stereo_frame_splits(self, tmp_path):
        frame = np.zeros((256, 512))
        frame[:, :256] = 0.25
        frame[:, 256:] = 0.75
        p = tmp_path / "stereo.pgm"
        imagefiles.write_pgm(p, frame)
        views = preprocess(p, input_size=256, channels=1)
        assert [v for v, _ in views] == ["left", "right"]
        left, right = views[0][1], views[1][1]
        assert left.shape == (1, 256, 256) and right.shape == (1, 256, 256)
        np.testing.assert_allclose(left, 0.25, atol=1 / 255)
        np.testing.assert_allclose(right, 0.75, atol=1 / 255)

    def test_all_white_is_one(self, tmp_path):
        p = tmp_path / "white.pgm"
        imagefiles.write_pgm(p, np.ones((64, 64)))
        (_, img), = preprocess(p, input_size=64, channels=1)
        np.testing.assert_array_equal(img, 1.0)

    def test_checkerboard_area_average(self, tmp_path):
        board = np.indices((4, 4)).sum(axis=0) % 2
        p = tmp_path / "board.pgm"
        imagefiles.write_pgm(p, board.astype(float))
        (_, img), = preprocess(p, input_size=2, channels=1, stereo=False)
        np.testing.assert_allclose(img, 0.5, atol=1e-12)

    def test_odd_width_stereo_rejected(self, tmp_path):
        p = tmp_path / "odd.pgm"
        imagefiles.write_pgm(p, np.zeros((3, 7)))
        with pytest.raises(ManifestError, match="odd width"):
            preprocess(p, input_size=2, channels=1, stereo=True)

    def test_undecodable_file(self, tmp_path):
        p = tmp_path / "bad.pgm"
        p.write_bytes(b"GIF89a nonsense")
        with pytest.raises(imagefiles.ImageFormatError):
            preprocess(p, input_size=8)

    def test_deterministic(self, tmp_path):
        rng = np.random.default_rng(5)
        p = tmp_path / "img.pgm"
        imagefiles.write_pgm(p, rng.random((48, 48)))
        a = preprocess(p, input_size=32)[0][1]
        b = preprocess(p, input_size=32)[0][1]
        np.testing.assert_array_equal(a, b)


class _ScriptedRng:
    """random() pops scripted values; uniform() returns the midpoint."""

    def __init__(self, randoms):
        self.randoms = list(randoms)

    def random(self):
        return self.randoms.pop(0)

    def uniform(self, lo, hi):
        return (lo + hi) / 2.0


class TestAugment:
    def test_all_off_is_identity(self):
        img = np.random.default_rng(1).random((1, 16, 16))
        out = augment(img, _ScriptedRng([0.9, 0.9, 0.9, 0.9]))
        np.testing.assert_array_equal(out, img)

    def test_double_hflip_is_identity(self):
        img = np.random.default_rng(2).random((1, 8, 8))
        once = augment(img, _ScriptedRng([0.9, 0.9, 0.1, 0.9]))
        twice = augment(once, _ScriptedRng([0.9, 0.9, 0.1, 0.9]))
        np.testing.assert_array_equal(twice, img)

    def test_neutral_parameters_are_identity(self):
        # lighting and rotation both fire but with b=0, c=1, theta=0
        img = np.random.default_rng(3).random((1, 12, 12)) * 0.8 + 0.1
        out = augment(img, _ScriptedRng([0.1, 0.1, 0.9, 0.9]))
        np.testing.assert_allclose(out, img, atol=1e-12)

    def test_deterministic_given_stream_key(self):
        img = np.random.default_rng(4).random((1, 16, 16))
        a = augment(img, np.random.default_rng([7, 3, 21]))
        b = augment(img, np.random.default_rng([7, 3, 21]))
        np.testing.assert_array_equal(a, b)

    def test_output_stays_in_unit_interval(self):
        img = np.random.default_rng(5).random((1, 16, 16))
        for seed in range(20):
            out = augment(img, np.random.default_rng(seed))
            assert out.min() >= 0.0 and out.max() <= 1.0


class TestPnmFiles:
    def test_pgm_round_trip(self, tmp_path):
        img = np.linspace(0, 1, 64).reshape(8, 8)
        p = tmp_path / "a.pgm"
        imagefiles.write_pgm(p, img)
        back = imagefiles.read_pnm(p)
        np.testing.assert_allclose(back, img, atol=1 / 510)

    def test_ppm_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        img = rng.random((5, 7, 3))
        p = tmp_path / "a.ppm"
        imagefiles.write_ppm(p, img)
        back = imagefiles.read_pnm(p)
        assert back.shape == (5, 7, 3)
        np.testing.assert_allclose(back, img, atol=1 / 510)

    def test_comment_in_header(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5\n# a comment\n2 2\n255\n" + bytes([0, 128, 255, 64]))
        img = imagefiles.read_pnm(p)
        assert img.shape == (2, 2)
        assert img[0, 1] == 128 / 255

    def test_png_encoder_is_valid(self, tmp_path):
        # decodable by a known-good reader
        from PIL import Image
        import io
        img = np.random.default_rng(9).random((10, 12, 3))
        data = imagefiles.png_bytes(img)
        decoded = np.asarray(Image.open(io.BytesIO(data))) / 255.0
        np.testing.assert_allclose(decoded, img, atol=1 / 510)
