import numpy as np
import pytest

from lusk.synth import (BLineSpec, DatasetError, GroundTruth, SceneSpec,
                        generate, load_dataset, load_frames, load_truth,
                        save_dataset)


class TestGenerate:
    def test_deterministic_bit_identical(self):
        spec = SceneSpec(frames=8, seed=42)
        a, ta = generate(spec)
        b, tb = generate(spec)
        assert np.array_equal(a, b)
        assert ta.pleura_rows == tb.pleura_rows

    def test_different_seed_differs(self):
        a, _ = generate(SceneSpec(frames=4, seed=0))
        b, _ = generate(SceneSpec(frames=4, seed=1))
        assert not np.array_equal(a, b)

    def test_shapes_and_range(self):
        video, truth = generate(SceneSpec(frames=6, size=48))
        assert video.shape == (6, 48, 48)
        assert video.min() >= 0.0 and video.max() <= 1.0
        assert len(truth) == 6

    def test_zero_amplitude_constant_pleura_row(self):
        _, truth = generate(SceneSpec(frames=10, amplitude=0.0))
        assert len(set(truth.pleura_rows)) == 1
        assert truth.pleura_rows[0] == pytest.approx(0.25 * 63)

    def test_pleura_is_brightest_row(self):
        # column-mean argmax lands on the pleural band
        spec = SceneSpec(frames=5, speckle_strength=0.0, b_lines=())
        video, truth = generate(spec)
        for frame, p in zip(video, truth.pleura_rows):
            got = int(np.argmax(frame.mean(axis=1)))
            assert abs(got - p) <= 0.5 + 1e-9

    def test_a_line_rows_are_multiples(self):
        _, truth = generate(SceneSpec(frames=3, amplitude=0.0, a_line_count=2))
        p = truth.pleura_rows[0]
        assert truth.a_line_rows[0] == pytest.approx([2 * p, 3 * p])

    def test_oscillation_matches_sine(self):
        spec = SceneSpec(frames=12, amplitude=0.03, frequency=0.05)
        _, truth = generate(spec)
        for t, p in enumerate(truth.pleura_rows):
            want = (0.25 + 0.03 * np.sin(2 * np.pi * 0.05 * t)) * 63
            assert p == pytest.approx(want)

    def test_b_line_clamped_at_edge(self):
        spec = SceneSpec(frames=60, b_lines=(BLineSpec(column=0.9, drift=1.0),))
        _, truth = generate(spec)
        cols = [c[0] for c in truth.b_line_cols]
        assert max(cols) == 63.0
        assert all(c <= 63.0 for c in cols)

    def test_b_line_wrap_mode(self):
        spec = SceneSpec(frames=60, b_line_wrap=True,
                         b_lines=(BLineSpec(column=0.9, drift=1.0),))
        _, truth = generate(spec)
        cols = [c[0] for c in truth.b_line_cols]
        assert min(cols) < 10.0  # wrapped around

    def test_invalid_specs_rejected(self):
        with pytest.raises(ValueError, match="pleura_depth"):
            generate(SceneSpec(pleura_depth=0.1))
        with pytest.raises(ValueError, match="upper half"):
            generate(SceneSpec(pleura_depth=0.39, amplitude=0.2))
        with pytest.raises(ValueError, match="brightness"):
            generate(SceneSpec(b_lines=(BLineSpec(brightness=1.5),)))


class TestDatasetIo:
    def test_round_trip(self, tmp_path):
        video, truth = generate(SceneSpec(frames=5, size=32))
        save_dataset(video, truth, tmp_path)
        frames, loaded = load_dataset(tmp_path)
        assert frames.shape == video.shape
        assert np.abs(frames - video).max() <= 1.0 / 255.0 + 1e-12
        assert loaded.pleura_rows == truth.pleura_rows
        assert loaded.a_line_rows == truth.a_line_rows
        assert loaded.b_line_cols == truth.b_line_cols

    def test_file_count(self, tmp_path):
        video, truth = generate(SceneSpec(frames=40, size=16))
        save_dataset(video, truth, tmp_path)
        assert len(list(tmp_path.glob("frame_*.pgm"))) == 40
        assert len((tmp_path / "truth.txt").read_text().splitlines()) == 40

    def test_missing_frame_names_index(self, tmp_path):
        video, truth = generate(SceneSpec(frames=4, size=16))
        save_dataset(video, truth, tmp_path)
        (tmp_path / "frame_00002.pgm").unlink()
        with pytest.raises(DatasetError, match="index 2"):
            load_frames(tmp_path)

    def test_empty_directory(self, tmp_path):
        with pytest.raises(DatasetError, match="no frame"):
            load_frames(tmp_path)

    def test_malformed_truth_line(self, tmp_path):
        path = tmp_path / "truth.txt"
        path.write_text("12.5 A 25.0 garbage\n")
        with pytest.raises(DatasetError, match="truth.txt:1"):
            load_truth(path)

    def test_count_mismatch(self, tmp_path):
        video, truth = generate(SceneSpec(frames=4, size=16))
        truth.pleura_rows.append(1.0)
        truth.a_line_rows.append([])
        truth.b_line_cols.append([])
        save_dataset(video, truth, tmp_path)
        with pytest.raises(DatasetError, match="4 frames but 5"):
            load_dataset(tmp_path)
