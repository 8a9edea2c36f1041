import json

import numpy as np
import pytest

from onevc import frontend
from onevc.convert import (ConversionRequest, convert_file, mel_to_magnitude,
                           one_shot_convert, register_vocoder, vocode)
from onevc.data import FeatureDataset, load_manifest
from onevc.frontend import Waveform, mel_spectrogram
from onevc.trainer import Trainer, load_model

from test_trainer import mini_cfg


def sine(freq=220.0, duration=1.0, amp=0.5):
    t = np.arange(int(duration * 16000)) / 16000
    return Waveform((amp * np.sin(2 * np.pi * freq * t)).astype(np.float32))


@pytest.fixture(scope="module")
def mini_checkpoint(tiny_corpus, tmp_path_factory):
    """A one-epoch checkpoint: enough to exercise the conversion path."""
    out = tmp_path_factory.mktemp("mini_run")
    cfg = mini_cfg()
    cfg["train"]["batch_size"] = 4
    records = [r for r in load_manifest(tiny_corpus["manifest"]) if r.split == "train"]
    dataset = FeatureDataset(tiny_corpus["cache"], records, 128)
    return Trainer(cfg).train(dataset, out, epochs=1)


class TestVocoder:
    def test_sine_roundtrip_recovers_f0(self):
        mel = mel_spectrogram(sine(220.0))
        wav = vocode(mel)
        f0, voiced = frontend.extract_f0(wav)
        assert voiced.mean() > 0.5
        assert abs(np.median(f0[voiced]) - 220.0) < 10.0

    def test_silence_mel_gives_near_silence(self):
        mel = mel_spectrogram(Waveform(np.zeros(16000, dtype=np.float32)))
        wav = vocode(mel)
        assert np.sqrt(np.mean(wav.samples**2)) < 1e-3

    def test_output_length_is_overlap_add_arithmetic(self):
        mel = mel_spectrogram(sine(duration=1.3))
        t = mel.n_frames
        wav = vocode(mel)
        assert wav.samples.shape[0] == (t - 1) * 160 + 400

    def test_deterministic(self):
        mel = mel_spectrogram(sine(330.0, 0.5))
        a = vocode(mel)
        b = vocode(mel)
        assert np.array_equal(a.samples, b.samples)

    def test_plugin_registry(self):
        called = {}

        def fake(mel):
            called["mel"] = mel
            return Waveform(np.zeros(400, dtype=np.float32))

        register_vocoder("fake", fake)
        mel = mel_spectrogram(sine(duration=0.5))
        vocode(mel, "fake")
        assert called["mel"] is mel
        with pytest.raises(KeyError):
            vocode(mel, "missing")

    def test_mel_inversion_peaks_near_tone(self):
        mel = mel_spectrogram(sine(1000.0))
        mag = mel_to_magnitude(mel.frames)
        peak_bin = mag[mel.n_frames // 2].argmax()
        assert abs(peak_bin * 16000 / 400 - 1000.0) < 80.0


class TestOneShotConvert:
    def test_identity_pair_reports_self_reconstruction(self, mini_checkpoint):
        model, _ = load_model(mini_checkpoint)
        src = sine(220.0, 1.0)
        converted, info = one_shot_convert(model, src, src)
        assert converted.frames.shape == (98, 80)
        assert "self_reconstruction_l1" in info
        assert np.isfinite(info["self_reconstruction_l1"])

    def test_deterministic_across_runs(self, mini_checkpoint):
        model, _ = load_model(mini_checkpoint)
        src, tgt = sine(220.0), sine(150.0, 0.8)
        a, _ = one_shot_convert(model, src, tgt)
        b, _ = one_shot_convert(model, src, tgt)
        assert np.array_equal(a.frames, b.frames)

    def test_output_length_tracks_source_not_target(self, mini_checkpoint):
        model, _ = load_model(mini_checkpoint)
        src = sine(220.0, 1.0)         # 98 frames -> trimmed to 98
        for duration in (0.5, 1.5):
            converted, _ = one_shot_convert(model, src, sine(180.0, duration))
            assert converted.n_frames == 98

    def test_odd_source_trimmed_to_even(self, mini_checkpoint):
        model, _ = load_model(mini_checkpoint)
        # 16160 samples -> 99 frames, odd -> 98 after the trim
        src = sine(220.0, 1.01)
        converted, _ = one_shot_convert(model, src, src)
        assert converted.n_frames == 98

    def test_unvoiced_source_warns_and_proceeds(self, mini_checkpoint):
        model, _ = load_model(mini_checkpoint)
        rng = np.random.default_rng(0)
        noise = Waveform(rng.uniform(-0.2, 0.2, 16000).astype(np.float32))
        with pytest.warns(UserWarning):
            converted, _ = one_shot_convert(model, noise, sine(200.0))
        assert np.all(np.isfinite(converted.frames))

    def test_speaker_swap_changes_output(self, mini_checkpoint):
        model, _ = load_model(mini_checkpoint)
        src = sine(220.0)
        a, _ = one_shot_convert(model, src, sine(100.0, 0.7))
        b, _ = one_shot_convert(model, src, sine(300.0, 0.7))
        assert np.abs(a.frames - b.frames).mean() > 0


class TestConvertFile:
    def test_writes_wav_and_sidecar(self, mini_checkpoint, tiny_corpus, tmp_path):
        records = load_manifest(tiny_corpus["manifest"])
        req = ConversionRequest(records[0].wav, records[-1].wav, mini_checkpoint,
                                tmp_path / "out.wav")
        out = convert_file(req)
        assert out.exists()
        wav = frontend.load_waveform(out)
        assert wav.sample_rate == 16000
        sidecar = json.loads((tmp_path / "out.wav.json").read_text())
        assert sidecar["source"] == str(records[0].wav)
        assert "checkpoint_hash" in sidecar and "config_hash" in sidecar
        assert sidecar["frames"] > 0
