"""Synthetic three-speaker corpus of formant-like tones.

Each utterance is a sequence of "vowel" segments: a harmonic source at a
slowly varying F0, shaped by Gaussian formant envelopes, optionally
interleaved with unvoiced noise bursts.  Speakers differ in pitch range,
formant scaling and spectral tilt; utterances differ in vowel sequence
and intonation contour.  The vowel sequence doubles as the reference
transcript, giving the recognizer-based metrics something to score.

Usage: ``python -m onevc.toy OUT_DIR [--seed N]`` writes WAVs, per-
utterance transcripts and a corpus manifest with train/test split tags.
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .data import UtteranceRecord, save_manifest

SR = 16000

VOWELS = {
    "aa": (730.0, 1090.0, 2440.0),
    "ee": (530.0, 1840.0, 2480.0),
    "ii": (270.0, 2290.0, 3010.0),
    "oo": (570.0, 840.0, 2410.0),
    "uu": (300.0, 870.0, 2240.0),
}


@dataclass
class SpeakerProfile:
    speaker_id: str
    base_f0: float
    formant_scale: float
    tilt: float  # per-harmonic amplitude rolloff exponent


# base F0s sit where the mel filterbank resolves harmonics cleanly, so
# pitch survives the mel -> vocoder -> tracker roundtrip
SPEAKERS = [
    SpeakerProfile("spk_low", 150.0, 0.92, 0.4),
    SpeakerProfile("spk_mid", 210.0, 1.00, 0.6),
    SpeakerProfile("spk_high", 280.0, 1.12, 0.8),
]


def _f0_contour(rng: np.random.Generator, n_samples: int, base_f0: float) -> np.ndarray:
    """Smooth per-utterance intonation: random walk over +-3 semitones."""
    n_knots = 6
    knots = rng.uniform(-3.0, 3.0, size=n_knots)
    x = np.linspace(0.0, 1.0, n_knots)
    semitones = np.interp(np.linspace(0.0, 1.0, n_samples), x, knots)
    # light smoothing to remove corners at the knots
    kernel = np.hanning(2049)
    kernel /= kernel.sum()
    semitones = np.convolve(np.pad(semitones, 1024, mode="edge"), kernel, mode="valid")
    return base_f0 * 2.0 ** (semitones / 12.0)


def _vowel_segment(rng: np.random.Generator, profile: SpeakerProfile,
                   vowel: str, f0: np.ndarray) -> np.ndarray:
    """Additive harmonic synthesis of one vowel over the given F0 samples."""
    formants = np.array(VOWELS[vowel]) * profile.formant_scale
    bws = np.array([90.0, 120.0, 160.0])
    phase = 2.0 * np.pi * np.cumsum(f0) / SR
    out = np.zeros_like(f0)
    mean_f0 = float(f0.mean())
    n_harm = min(40, int(7600.0 / max(mean_f0, 1.0)))
    for h in range(1, n_harm + 1):
        freq = h * mean_f0
        gain = np.exp(-((freq - formants) ** 2) / (2.0 * bws**2)).sum()
        gain = (gain + 0.01) / h**profile.tilt
        if h == 1:
            gain += 1.0  # strong fundamental keeps pitch trackable after vocoding
        out += gain * np.sin(h * phase + rng.uniform(0.0, 2.0 * np.pi))
    return out


def _noise_burst(rng: np.random.Generator, n: int) -> np.ndarray:
    noise = rng.standard_normal(n)
    return np.diff(noise, prepend=noise[0]) * 0.06  # first difference: high-pass hiss


def synth_utterance(rng: np.random.Generator, profile: SpeakerProfile,
                    duration: float = 1.5) -> tuple[np.ndarray, str]:
    """One utterance and its transcript (the vowel sequence)."""
    n_total = int(duration * SR)
    f0 = _f0_contour(rng, n_total, profile.base_f0)
    vowel_names = list(VOWELS)
    n_segments = int(rng.integers(5, 8))
    words: list[str] = []
    pieces: list[np.ndarray] = []
    lengths = rng.dirichlet(np.ones(n_segments)) * 0.7 + 0.3 / n_segments
    lengths = (lengths / lengths.sum() * n_total).astype(int)
    lengths[-1] = n_total - lengths[:-1].sum()
    cursor = 0
    for seg_len in lengths:
        if seg_len <= 0:
            continue
        if rng.random() < 0.15 and words:
            pieces.append(_noise_burst(rng, seg_len))
        else:
            vowel = vowel_names[int(rng.integers(0, len(vowel_names)))]
            words.append(vowel)
            pieces.append(_vowel_segment(rng, profile, vowel, f0[cursor : cursor + seg_len]))
        cursor += seg_len
    samples = np.concatenate(pieces)
    # short raised-cosine fades at segment joins to avoid clicks
    fade = int(0.005 * SR)
    env = np.ones_like(samples)
    edge = 0
    for seg_len in lengths[:-1]:
        edge += seg_len
        lo, hi = max(0, edge - fade), min(samples.shape[0], edge + fade)
        env[lo:hi] *= np.hanning(2 * (hi - lo))[: hi - lo] * 0.5 + 0.5
    samples = samples * env
    samples = 0.7 * samples / max(np.max(np.abs(samples)), 1e-9)
    return samples.astype(np.float32), " ".join(words)


def build_toy_corpus(out_dir: str | Path, n_train: int = 20, n_test: int = 6,
                     seed: int = 0) -> Path:
    """Write the corpus and return the manifest path."""
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    txt_dir = out_dir / "txt"
    wav_dir.mkdir(parents=True, exist_ok=True)
    txt_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for profile in SPEAKERS:
        for i in range(n_train + n_test):
            split = "train" if i < n_train else "test"
            uid = f"{profile.speaker_id}_{i:03d}"
            duration = float(rng.uniform(1.4, 1.8))
            samples, transcript = synth_utterance(rng, profile, duration)
            wav_path = wav_dir / f"{uid}.wav"
            txt_path = txt_dir / f"{uid}.txt"
            wavfile.write(wav_path, SR, (samples * 32767.0).astype(np.int16))
            txt_path.write_text(transcript + "\n")
            records.append(UtteranceRecord(uid, profile.speaker_id, wav_path, txt_path, split))
    return save_manifest(out_dir / "manifest.json", records)


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out_dir")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--n-train", type=int, default=20)
    parser.add_argument("--n-test", type=int, default=6)
    args = parser.parse_args(argv)
    manifest = build_toy_corpus(args.out_dir, args.n_train, args.n_test, args.seed)
    print(manifest)


if __name__ == "__main__":
    main()
