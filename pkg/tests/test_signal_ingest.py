import logging

import numpy as np
import pytest
from scipy.io import wavfile

from errors import ArgumentError, UnsupportedLayoutError, ValidationError, WavFormatError
from signal_ingest import (
    BloodPressureReading, GateConfig, HypertensionLabel, Waveform, Window, assemble_recording_samples,
    ingest_recording, label_from_bp, load_recording, quality_gate, read_label_manifest, read_sample_manifest,
    resample, segment_windows, window_count, write_sample_manifest,
)


def _write(path, rate, data):
    wavfile.write(str(path), rate, np.asarray(data, dtype=np.int16))
    return str(path)


class TestLoadRecording:
    def test_zero_file(self, tmp_path):
        w = load_recording(_write(tmp_path / "z.wav", 44100, np.zeros(44100)))
        assert len(w.samples) == 44100
        assert w.rate == 44100
        assert np.all(w.samples == 0.0)

    def test_scaling_boundaries(self, tmp_path):
        w = load_recording(_write(tmp_path / "s.wav", 8000, [32767, -32768]))
        assert w.samples[0] == pytest.approx(32767 / 32768)
        assert w.samples[1] == -1.0

    def test_stereo_rejected(self, tmp_path):
        path = _write(tmp_path / "st.wav", 8000, np.zeros((100, 2)))
        with pytest.raises(UnsupportedLayoutError):
            load_recording(path)

    def test_float_wav_rejected(self, tmp_path):
        wavfile.write(str(tmp_path / "f.wav"), 8000, np.zeros(10, dtype=np.float32))
        with pytest.raises(WavFormatError):
            load_recording(str(tmp_path / "f.wav"))

    def test_garbage_header(self, tmp_path):
        path = tmp_path / "bad.wav"
        path.write_bytes(b"not a wav file at all")
        with pytest.raises(WavFormatError):
            load_recording(str(path))


class TestResample:
    def test_zeros(self, waveform_of):
        out = resample(waveform_of(1.0, rate=44100), 4000)
        assert len(out.samples) == 4000
        assert out.rate == 4000
        assert np.all(out.samples == 0.0)

    def test_sine_against_analytic(self, waveform_of):
        w = waveform_of(1.0, rate=44100, fn=lambda t: np.sin(2 * np.pi * 100 * t))
        out = resample(w, 4000)
        t = np.arange(len(out.samples)) / 4000
        assert len(out.samples) == 4000
        assert np.max(np.abs(out.samples - np.sin(2 * np.pi * 100 * t))) <= 1e-3

    def test_identity_rate(self, waveform_of, rng):
        w = Waveform(samples=rng.uniform(-1, 1, 1234), rate=8000)
        out = resample(w, 8000)
        assert len(out.samples) == 1234
        assert np.max(np.abs(out.samples - w.samples)) <= 1e-9

    @pytest.mark.parametrize("rate", [8000, 44100, 22050])
    def test_duration_preserved(self, waveform_of, rate):
        w = waveform_of(2.3, rate=rate)
        out = resample(w, 4000)
        assert abs(out.duration - w.duration) <= 1 / 4000

    def test_bad_target(self, waveform_of):
        with pytest.raises(ArgumentError):
            resample(waveform_of(1.0), 0)


class TestSegmentWindows:
    def test_boundary_single_window(self, waveform_of):
        assert len(segment_windows(waveform_of(3.75))) == 1

    def test_offsets(self, waveform_of):
        windows = segment_windows(waveform_of(7.5))
        assert [w.origin_offset for w in windows] == pytest.approx([0.0, 0.75, 1.5, 2.25, 3.0, 3.75])
        assert all(len(w.samples) == 15000 for w in windows)

    def test_too_short(self, waveform_of):
        assert segment_windows(waveform_of(3.0)) == []

    def test_rate_precondition(self, waveform_of):
        with pytest.raises(ArgumentError):
            segment_windows(waveform_of(5.0, rate=8000))

    @pytest.mark.parametrize("n", list(range(14990, 15010)) + [18000, 18001, 20999, 21000, 45 * 4000])
    def test_count_matches_enumeration(self, n):
        offsets = [s for s in range(0, n) if s + 15000 <= n and s % 3000 == 0]
        assert window_count(n, 4000) == len(offsets)

    def test_consecutive_overlap_identical(self, waveform_of, rng):
        w = Waveform(samples=rng.uniform(-0.5, 0.5, 4000 * 10), rate=4000)
        windows = segment_windows(w)
        for a, b in zip(windows, windows[1:]):
            np.testing.assert_array_equal(a.samples[3000:], b.samples[:12000])


class TestQualityGate:
    def _win(self, samples):
        return Window(samples=np.asarray(samples, dtype=np.float64), rate=4000, origin_offset=0.0)

    def test_zero_window_rejected(self):
        assert not quality_gate(self._win(np.zeros(15000)), GateConfig())

    def test_square_wave_rejected(self):
        square = np.where(np.arange(15000) % 40 < 20, 1.0, -1.0)
        assert not quality_gate(self._win(square), GateConfig())

    def test_moderate_noise_passes(self, rng):
        assert quality_gate(self._win(0.1 * rng.standard_normal(15000)), GateConfig())

    def test_synthetic_pulse_train_passes(self):
        from synth import CohortConfig, generate_recording

        pcm, _ = generate_recording("N0000", HypertensionLabel.NORMOTENSIVE, CohortConfig(duration_s=8.0))
        w = resample(Waveform(samples=pcm / 32768.0, rate=8000), 4000)
        windows = segment_windows(w)
        assert windows
        assert all(quality_gate(win, GateConfig()) for win in windows)


class TestLabels:
    @pytest.mark.parametrize("values,expected", [
        ((138, 88, 141, 86), HypertensionLabel.HYPERTENSIVE),
        ((139, 89, 135, 85), HypertensionLabel.NORMOTENSIVE),
        ((120, 92, 118, 80), HypertensionLabel.HYPERTENSIVE),
    ])
    def test_thresholds(self, values, expected):
        assert label_from_bp(BloodPressureReading(*values)) is expected

    def test_arm_swap_invariant(self, rng):
        for _ in range(200):
            sbp = rng.integers(90, 200, 2)
            dbp = rng.integers(40, 89, 2)
            a = BloodPressureReading(sbp[0], dbp[0], sbp[1], dbp[1])
            b = BloodPressureReading(sbp[1], dbp[1], sbp[0], dbp[0])
            assert label_from_bp(a) is label_from_bp(b)

    @pytest.mark.parametrize("values", [(120, 130, 120, 80), (310, 80, 120, 80), (120, 80, 120, 20)])
    def test_invalid_reading(self, values):
        with pytest.raises(ValidationError):
            label_from_bp(BloodPressureReading(*values))


class TestAssemble:
    def _windows(self, n):
        return [Window(samples=np.zeros(4), rate=4000, origin_offset=0.75 * i) for i in range(n)]

    def test_normotensive_single_sample(self):
        out = assemble_recording_samples(self._windows(10), HypertensionLabel.NORMOTENSIVE, 5, recording_id="N1")
        assert len(out) == 1
        assert len(out[0].windows) == 10

    def test_hypertensive_capped(self):
        out = assemble_recording_samples(self._windows(57), HypertensionLabel.HYPERTENSIVE, 5, recording_id="H1")
        assert len(out) == 5
        used = [o for s in out for o in s.window_offsets]
        assert len(used) == len(set(used)) == 50
        assert used == sorted(used)

    def test_dropped_with_reason(self, caplog):
        with caplog.at_level(logging.INFO):
            out = assemble_recording_samples(self._windows(9), HypertensionLabel.HYPERTENSIVE, 5, recording_id="H2")
        assert out == []
        assert "H2" in caplog.text


class TestManifests:
    def test_label_manifest(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("recording_id,sbp_left,dbp_left,sbp_right,dbp_right\nA,120,80,118,79\n")
        readings = read_label_manifest(str(path))
        assert readings["A"] == BloodPressureReading(120.0, 80.0, 118.0, 79.0)

    def test_label_manifest_missing_column(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("recording_id,sbp_left\nA,120\n")
        with pytest.raises(ValidationError):
            read_label_manifest(str(path))

    def test_sample_manifest(self, tmp_path):
        windows = [Window(samples=np.zeros(4), rate=4000, origin_offset=0.75 * i) for i in range(10)]
        samples = assemble_recording_samples(windows, HypertensionLabel.NORMOTENSIVE, recording_id="N7")
        path = str(tmp_path / "samples.csv")
        write_sample_manifest(path, samples)
        rows = read_sample_manifest(path)
        assert rows[0][:3] == ("N7_b0", "N7", HypertensionLabel.NORMOTENSIVE)
        assert rows[0][3] == pytest.approx([0.75 * i for i in range(10)])


def test_ingest_recording_end_to_end(tmp_path):
    from config import default_config
    from synth import CohortConfig, generate_recording

    pcm, bp = generate_recording("H0000", HypertensionLabel.HYPERTENSIVE, CohortConfig(duration_s=20.0))
    path = _write(tmp_path / "H0000.wav", 8000, pcm)
    samples, counts = ingest_recording(path, "H0000", bp, default_config(str(tmp_path)))
    assert counts["windows"] == 22
    assert counts["gated"] == 22
    assert len(samples) == 2
    assert all(s.label is HypertensionLabel.HYPERTENSIVE for s in samples)
