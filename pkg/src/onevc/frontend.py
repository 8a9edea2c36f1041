"""Acoustic feature extraction: log-mel spectrograms and normalized log-F0.

The framing contract is shared by every operation in this module: 25 ms
(400-sample) analysis windows advanced by 10 ms (160 samples) at 16 kHz,
with **no** padding, so an utterance of N samples yields exactly

    T = 1 + (N - 400) // 160

frames.  Mel-spectrogram and pitch contour of one utterance therefore
always have the same length, which downstream training relies on.

Mel filterbank is HTK-style (mel = 2595 * log10(1 + f/700)), applied to
magnitude spectra, followed by a natural log with a 1e-5 floor.

F0 is tracked per frame by normalized autocorrelation (NCCF) over a
60-400 Hz search range, with parabolic interpolation of the peak lag.
Log-F0 is z-normalized per utterance over voiced frames only.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly

TARGET_SR = 16000
N_FFT = 400
WIN_LENGTH = 400
HOP_LENGTH = 160
N_MELS = 80


class IngestError(RuntimeError):
    """Raised when an audio file cannot be read or converted."""


class FeatureError(RuntimeError):
    """Raised when a waveform cannot be turned into features."""


@dataclass
class Waveform:
    """Mono audio in [-1, 1] at 16 kHz."""

    samples: np.ndarray
    sample_rate: int = TARGET_SR

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if not np.all(np.isfinite(self.samples)):
            raise IngestError("waveform contains non-finite samples")


@dataclass
class MelSpectrogram:
    """T x 80 log-mel magnitude matrix plus the framing that produced it."""

    frames: np.ndarray
    hop: int = HOP_LENGTH
    win: int = WIN_LENGTH
    fft_size: int = N_FFT

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[1] != N_MELS:
            raise FeatureError(f"mel matrix must be (T, {N_MELS}), got {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class PitchContour:
    """Per-utterance z-normalized log-F0 with a voicing mask.

    Unvoiced frames carry 0 (the post-normalization mean); statistics are
    computed per utterance over voiced frames only.
    """

    values: np.ndarray
    voiced: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.voiced = np.asarray(self.voiced, dtype=bool)
        if self.values.shape != self.voiced.shape:
            raise FeatureError("pitch values and voicing mask must have equal length")

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass
class TrainingSegment:
    """Fixed-length (mel, pitch) crop; speaker_id is metadata only."""

    mel: np.ndarray
    pitch: np.ndarray
    voiced: np.ndarray
    utterance_id: str = ""
    speaker_id: str = ""


def load_waveform(path: str | Path, target_sr: int = TARGET_SR) -> Waveform:
    """Read a WAV file as mono float32 in [-1, 1], resampled to 16 kHz.

    PCM 16/32-bit and float encodings are accepted; stereo is downmixed by
    averaging.  More than two channels is an ingest error.
    """
    path = Path(path)
    try:
        sr, data = wavfile.read(path)
    except Exception as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc
    if data.size == 0:
        raise IngestError(f"{path} contains no audio samples")
    if data.ndim == 2:
        if data.shape[1] > 2:
            raise IngestError(f"{path}: unsupported channel layout ({data.shape[1]} channels)")
        data = data.mean(axis=1)
    elif data.ndim != 1:
        raise IngestError(f"{path}: unsupported sample layout {data.shape}")

    if np.issubdtype(data.dtype, np.integer):
        scale = float(np.iinfo(data.dtype).max) + 1.0
        samples = data.astype(np.float64) / scale
    else:
        samples = data.astype(np.float64)
    if not np.all(np.isfinite(samples)):
        raise IngestError(f"{path}: non-finite samples")

    if sr != target_sr:
        g = np.gcd(int(sr), target_sr)
        samples = resample_poly(samples, target_sr // g, sr // g)

    peak = np.max(np.abs(samples)) if samples.size else 0.0
    if peak > 1.0:
        samples = samples / peak
    return Waveform(samples.astype(np.float32), target_sr)


def _frame(samples: np.ndarray, win: int = WIN_LENGTH, hop: int = HOP_LENGTH) -> np.ndarray:
    """Slice a signal into (T, win) frames with no padding."""
    n = samples.shape[0]
    if n < win:
        raise FeatureError(f"waveform too short: {n} samples < {win}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(samples, win)[::hop]
    return np.ascontiguousarray(frames)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int = N_MELS,
    n_fft: int = N_FFT,
    sample_rate: int = TARGET_SR,
    fmin: float = 0.0,
    fmax: float = 8000.0,
) -> np.ndarray:
    """HTK-style triangular filterbank, shape (n_mels, n_fft // 2 + 1)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    fb = np.zeros((n_mels, freqs.shape[0]), dtype=np.float64)
    for i in range(n_mels):
        left, center, right = edges[i], edges[i + 1], edges[i + 2]
        up = (freqs - left) / max(center - left, 1e-12)
        down = (right - freqs) / max(right - center, 1e-12)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


def stft_magnitude(samples: np.ndarray, n_fft: int = N_FFT,
                   win: int = WIN_LENGTH, hop: int = HOP_LENGTH) -> np.ndarray:
    """Magnitude spectrogram (T, n_fft//2+1) with a periodic Hann window."""
    frames = _frame(np.asarray(samples, dtype=np.float64), win, hop)
    window = get_window("hann", win, fftbins=True)
    return np.abs(np.fft.rfft(frames * window, n=n_fft, axis=1))


def mel_spectrogram(
    wav: Waveform,
    n_mels: int = N_MELS,
    fmin: float = 0.0,
    fmax: float = 8000.0,
    floor: float = 1e-5,
) -> MelSpectrogram:
    """Log-mel magnitude spectrogram of one utterance.

    Raises FeatureError when the waveform is shorter than one window.
    """
    mag = stft_magnitude(wav.samples)
    fb = mel_filterbank(n_mels, N_FFT, wav.sample_rate, fmin, fmax)
    mel = mag @ fb.T
    return MelSpectrogram(np.log(mel + floor).astype(np.float32))


def expected_frames(n_samples: int, win: int = WIN_LENGTH, hop: int = HOP_LENGTH) -> int:
    """Frame count produced by the no-padding framing contract."""
    if n_samples < win:
        raise FeatureError(f"waveform too short: {n_samples} samples < {win}")
    return 1 + (n_samples - win) // hop


def _nccf(frame: np.ndarray, lag_min: int, lag_max: int) -> np.ndarray:
    """Normalized cross-correlation of one frame for lags [lag_min, lag_max].

    nccf(tau) = sum(x[n] x[n+tau]) / sqrt(sum_head(x^2) * sum_tail(x^2)),
    computed for all lags at once using an FFT autocorrelation for the
    numerator and cumulative energies for the denominator.
    """
    n = frame.shape[0]
    x = frame - frame.mean()
    spec = np.fft.rfft(x, 2 * n)
    acf = np.fft.irfft(spec * np.conj(spec))[: lag_max + 1].real
    sq = np.cumsum(x * x)
    total = sq[-1]
    lags = np.arange(lag_min, lag_max + 1)
    head = sq[n - lags - 1]                # energy of x[0 : n-tau]
    tail = total - np.concatenate(([0.0], sq[: n - 1]))[lags]  # energy of x[tau : n]
    denom = np.sqrt(np.maximum(head * tail, 1e-20))
    return acf[lags] / denom


def extract_f0(
    wav: Waveform,
    f0_min: float = 60.0,
    f0_max: float = 400.0,
    voicing_threshold: float = 0.5,
    energy_floor: float = 1e-4,
) -> tuple[np.ndarray, np.ndarray]:
    """Frame-wise F0 in Hz plus a voicing mask, aligned to the mel framing.

    A frame is voiced when its best NCCF peak clears the threshold and its
    RMS energy clears the floor.  Among near-best peaks (>= 0.85 of the
    maximum) the shortest lag wins, which suppresses octave-down errors on
    strongly periodic signals.  Unvoiced frames report F0 = 0.
    """
    frames = _frame(np.asarray(wav.samples, dtype=np.float64))
    sr = wav.sample_rate
    lag_min = max(2, int(np.floor(sr / f0_max)))
    lag_max = min(frames.shape[1] - 2, int(np.ceil(sr / f0_min)))
    f0 = np.zeros(frames.shape[0], dtype=np.float32)
    voiced = np.zeros(frames.shape[0], dtype=bool)
    for i, frame in enumerate(frames):
        if np.sqrt(np.mean(frame**2)) < energy_floor:
            continue
        nccf = _nccf(frame, lag_min, lag_max)
        best = float(nccf.max())
        if best < voicing_threshold:
            continue
        # local maxima competitive with the global best, earliest lag first
        interior = np.r_[False, (nccf[1:-1] >= nccf[:-2]) & (nccf[1:-1] >= nccf[2:]), False]
        candidates = np.flatnonzero(interior & (nccf >= 0.85 * best))
        j = int(candidates[0]) if candidates.size else int(np.argmax(nccf))
        lag = float(lag_min + j)
        if 0 < j < nccf.shape[0] - 1:
            a, b, c = nccf[j - 1], nccf[j], nccf[j + 1]
            denom = a - 2.0 * b + c
            if abs(denom) > 1e-12:
                lag += 0.5 * (a - c) / denom
        f0[i] = sr / lag
        voiced[i] = True
    return f0, voiced


def normalize_logf0(f0: np.ndarray, voiced: np.ndarray) -> PitchContour:
    """z-normalize log-F0 over this utterance's voiced frames.

    Natural log; population statistics; std guarded by max(std, 1e-8) so a
    constant contour normalizes to zeros.  With fewer than two voiced
    frames the statistics are undefined: the contour is all zeros and a
    warning is emitted.
    """
    f0 = np.asarray(f0, dtype=np.float64)
    voiced = np.asarray(voiced, dtype=bool)
    values = np.zeros(f0.shape[0], dtype=np.float32)
    if voiced.sum() < 2:
        if f0.shape[0] > 0:
            warnings.warn("fewer than 2 voiced frames; emitting all-zero pitch contour")
        return PitchContour(values, voiced.copy())
    logf0 = np.log(f0[voiced])
    std = logf0.std()  # population std
    values[voiced] = ((logf0 - logf0.mean()) / max(std, 1e-8)).astype(np.float32)
    return PitchContour(values, voiced.copy())


def pitch_contour(wav: Waveform, **kwargs) -> PitchContour:
    """extract_f0 followed by normalize_logf0."""
    f0, voiced = extract_f0(wav, **kwargs)
    return normalize_logf0(f0, voiced)


def random_crop(
    mel: MelSpectrogram,
    pitch: PitchContour,
    length: int = 128,
    rng: np.random.Generator | None = None,
    utterance_id: str = "",
    speaker_id: str = "",
) -> TrainingSegment:
    """Crop an aligned (mel, pitch) pair to a fixed length at a shared offset.

    Exact-length input is an identity crop.  Shorter utterances are padded
    at the end: mel by repeating the final frame, pitch with zeros marked
    unvoiced.
    """
    t = mel.n_frames
    if len(pitch) != t:
        raise FeatureError(f"mel has {t} frames but pitch has {len(pitch)}")
    if t >= length:
        if t == length:
            offset = 0
        else:
            if rng is None:
                rng = np.random.default_rng()
            offset = int(rng.integers(0, t - length + 1))
        mel_seg = mel.frames[offset : offset + length]
        val_seg = pitch.values[offset : offset + length]
        voi_seg = pitch.voiced[offset : offset + length]
    else:
        pad = length - t
        mel_seg = np.concatenate([mel.frames, np.repeat(mel.frames[-1:], pad, axis=0)])
        val_seg = np.concatenate([pitch.values, np.zeros(pad, dtype=np.float32)])
        voi_seg = np.concatenate([pitch.voiced, np.zeros(pad, dtype=bool)])
    return TrainingSegment(
        mel=np.ascontiguousarray(mel_seg),
        pitch=np.ascontiguousarray(val_seg),
        voiced=np.ascontiguousarray(voi_seg),
        utterance_id=utterance_id,
        speaker_id=speaker_id,
    )


# ---------------------------------------------------------------------------
# Feature cache: JSON sidecar + raw little-endian float32 blobs per utterance.
# The pitch blob stores (T, 2) columns [normalized log-F0, voicing flag].
# ---------------------------------------------------------------------------


@dataclass
class FeatureRecord:
    utterance_id: str
    speaker_id: str
    mel: np.ndarray
    pitch: PitchContour
    meta: dict = field(default_factory=dict)


def _cache_paths(cache_dir: Path, utterance_id: str) -> tuple[Path, Path, Path]:
    return (
        cache_dir / f"{utterance_id}.json",
        cache_dir / f"{utterance_id}.mel.f32",
        cache_dir / f"{utterance_id}.pitch.f32",
    )


def write_features(
    cache_dir: str | Path,
    utterance_id: str,
    speaker_id: str,
    mel: MelSpectrogram,
    pitch: PitchContour,
) -> Path:
    """Persist one utterance's features; writes are atomic per utterance."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    if len(pitch) != mel.n_frames:
        raise FeatureError("mel/pitch length mismatch; refusing to cache misaligned features")
    sidecar, mel_path, pitch_path = _cache_paths(cache_dir, utterance_id)
    pitch_blob = np.stack([pitch.values, pitch.voiced.astype(np.float32)], axis=1)
    meta = {
        "utterance_id": utterance_id,
        "speaker_id": speaker_id,
        "T": int(mel.n_frames),
        "dims": {"mel": [int(mel.n_frames), N_MELS], "pitch": [int(mel.n_frames), 2]},
        "dtype": "<f4",
    }
    for path, payload in (
        (mel_path, mel.frames.astype("<f4").tobytes()),
        (pitch_path, pitch_blob.astype("<f4").tobytes()),
        (sidecar, json.dumps(meta, indent=None).encode()),
    ):
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(payload)
        os.replace(tmp, path)
    return sidecar


def has_features(cache_dir: str | Path, utterance_id: str) -> bool:
    return all(p.exists() for p in _cache_paths(Path(cache_dir), utterance_id))


def read_features(cache_dir: str | Path, utterance_id: str) -> FeatureRecord:
    sidecar, mel_path, pitch_path = _cache_paths(Path(cache_dir), utterance_id)
    meta = json.loads(sidecar.read_text())
    t = meta["T"]
    mel = np.frombuffer(mel_path.read_bytes(), dtype="<f4").reshape(t, N_MELS)
    blob = np.frombuffer(pitch_path.read_bytes(), dtype="<f4").reshape(t, 2)
    pitch = PitchContour(blob[:, 0].copy(), blob[:, 1] > 0.5)
    return FeatureRecord(
        utterance_id=meta["utterance_id"],
        speaker_id=meta["speaker_id"],
        mel=mel.copy(),
        pitch=pitch,
        meta=meta,
    )
