"""One-shot conversion and spectral-inversion vocoding.

Conversion takes content and pitch from the source utterance and the
speaker embedding from a single target utterance, then decodes.  The
output mel has exactly the source's frame count (trimmed to even length),
regardless of how long the target reference is.

The default vocoder inverts the log-mel via the filterbank pseudo-inverse
and runs iterative phase reconstruction with the same no-padding framing
used by analysis.  Alternative vocoders can be registered by name; they
receive a (T, 80) log-mel array and must return a Waveform.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from scipy.io import wavfile
from scipy.signal import get_window

from . import frontend
from .checkpoint import file_digest
from .config import config_hash
from .frontend import (HOP_LENGTH, N_FFT, WIN_LENGTH, MelSpectrogram,
                       PitchContour, Waveform)
from .model import VoiceConversionModel
from .trainer import load_model


@dataclass
class ConversionRequest:
    source_wav: Path
    target_wav: Path
    checkpoint: Path
    output: Path


def _istft(spec: np.ndarray, win: int = WIN_LENGTH, hop: int = HOP_LENGTH) -> np.ndarray:
    """Overlap-add inverse of the no-padding STFT, with squared-window
    normalization."""
    t = spec.shape[0]
    window = get_window("hann", win, fftbins=True)
    n = (t - 1) * hop + win
    out = np.zeros(n)
    norm = np.zeros(n)
    frames = np.fft.irfft(spec, n=win, axis=1)
    for i in range(t):
        lo = i * hop
        out[lo : lo + win] += frames[i] * window
        norm[lo : lo + win] += window**2
    return out / np.maximum(norm, 1e-8)


def griffin_lim(magnitude: np.ndarray, iterations: int = 64) -> np.ndarray:
    """Phase reconstruction from a (T, bins) magnitude spectrogram.

    Deterministic: phases start at zero and are refined by analysis /
    synthesis round trips.
    """
    angles = np.zeros_like(magnitude)
    signal = _istft(magnitude * np.exp(1j * angles))
    for _ in range(iterations):
        spec = np.fft.rfft(
            frontend._frame(signal) * get_window("hann", WIN_LENGTH, fftbins=True),
            n=N_FFT, axis=1,
        )
        signal = _istft(magnitude * np.exp(1j * np.angle(spec)))
    return signal


def mel_to_magnitude(log_mel: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    """Invert the log-mel projection with the filterbank pseudo-inverse."""
    fb = frontend.mel_filterbank()
    mel = np.maximum(np.exp(np.asarray(log_mel, dtype=np.float64)) - floor, 0.0)
    return np.maximum(mel @ np.linalg.pinv(fb).T, 0.0)


def _griffin_lim_vocoder(mel: MelSpectrogram, iterations: int = 64) -> Waveform:
    magnitude = mel_to_magnitude(mel.frames)
    samples = griffin_lim(magnitude, iterations)
    peak = np.max(np.abs(samples))
    if peak > 1.0:
        samples = samples / peak
    return Waveform(samples.astype(np.float32))


VocoderFn = Callable[[MelSpectrogram], Waveform]

_VOCODERS: dict[str, VocoderFn] = {}


def register_vocoder(name: str, fn: VocoderFn) -> None:
    _VOCODERS[name] = fn


register_vocoder("griffinlim", _griffin_lim_vocoder)


def vocode(mel: MelSpectrogram, name: str = "griffinlim", **kwargs) -> Waveform:
    """Render a mel-spectrogram to audio with the named vocoder plugin."""
    if name not in _VOCODERS:
        raise KeyError(f"unknown vocoder {name!r}; registered: {sorted(_VOCODERS)}")
    return _VOCODERS[name](mel, **kwargs)


def _even_trim(mel: MelSpectrogram, pitch: PitchContour) -> tuple[np.ndarray, PitchContour]:
    t = mel.n_frames - mel.n_frames % 2
    return mel.frames[:t], PitchContour(pitch.values[:t], pitch.voiced[:t])


def one_shot_convert(
    model: VoiceConversionModel,
    source: Waveform,
    target: Waveform,
) -> tuple[MelSpectrogram, dict]:
    """Convert source content+pitch to the target speaker's voice.

    Returns the converted mel and an info dict with the source frame
    count and, when source and target are the same signal, a
    self-reconstruction L1 score against the source mel.
    """
    src_mel = frontend.mel_spectrogram(source)
    src_pitch = frontend.pitch_contour(source)
    if not src_pitch.voiced.any():
        warnings.warn("source has no voiced frames; converting with a zero pitch contour")
    mel_frames, pitch = _even_trim(src_mel, src_pitch)
    tgt_mel = frontend.mel_spectrogram(target)

    model.eval()
    with torch.no_grad():
        mel_t = torch.from_numpy(mel_frames).unsqueeze(0)
        dense = model.encode_content(mel_t)
        codes, _ = model.quantizer(dense)
        speaker = model.encode_speaker(torch.from_numpy(tgt_mel.frames).unsqueeze(0))
        pitch_t = torch.from_numpy(pitch.values).unsqueeze(0)
        _, post = model.decode(codes, speaker, pitch_t)
    converted = MelSpectrogram(post.squeeze(0).numpy())
    info = {"frames": converted.n_frames}
    if np.array_equal(source.samples, target.samples):
        info["self_reconstruction_l1"] = float(
            np.abs(converted.frames - mel_frames).mean()
        )
    return converted, info


def convert_file(req: ConversionRequest, vocoder: str = "griffinlim",
                 vocoder_kwargs: dict | None = None) -> Path:
    """Full file-to-file conversion: decode, vocode, write WAV + sidecar."""
    model, cfg = load_model(req.checkpoint)
    source = frontend.load_waveform(req.source_wav)
    target = frontend.load_waveform(req.target_wav)
    converted, info = one_shot_convert(model, source, target)
    wav = vocode(converted, vocoder, **(vocoder_kwargs or {}))

    out = Path(req.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(out, wav.sample_rate, (np.clip(wav.samples, -1, 1) * 32767.0).astype(np.int16))
    sidecar = {
        "source": str(req.source_wav),
        "target": str(req.target_wav),
        "checkpoint": str(req.checkpoint),
        "checkpoint_hash": file_digest(req.checkpoint),
        "config_hash": config_hash(cfg),
        **info,
    }
    out.with_name(out.name + ".json").write_text(json.dumps(sidecar, indent=1))
    return out
