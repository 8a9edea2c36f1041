"""Disentanglement measurement: MI reports, probe classifiers, pitch
predictor, F0 correlation, the Same/Mixed generation protocol and
recognizer-based scoring of its output.

All measurements operate on frozen representations extracted from held-
out utterances; nothing here ever updates conversion-model parameters.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import frontend, mi as mi_mod
from .convert import vocode
from .data import UtteranceRecord
from .frontend import MelSpectrogram, Waveform
from .model import VoiceConversionModel

from scipy.io import wavfile


class EvalError(RuntimeError):
    """Raised when a measurement's preconditions are not met."""


# ------------------------------------------------------------------ reps --


@dataclass
class Representations:
    """Fixed-length representations of a set of utterances."""

    codes: torch.Tensor        # (N, T/2, D)
    speaker: torch.Tensor      # (N, S)
    pitch: torch.Tensor        # (N, T)
    speaker_ids: list[str]
    utterance_ids: list[str]

    @property
    def pitch_ds(self) -> torch.Tensor:
        return mi_mod.downsample_pitch(self.pitch)


def _center_crop(mel: np.ndarray, pitch: frontend.PitchContour,
                 length: int) -> tuple[np.ndarray, np.ndarray]:
    t = mel.shape[0]
    if t < length:
        seg = frontend.random_crop(MelSpectrogram(mel), pitch, length)
        return seg.mel, seg.pitch
    off = (t - length) // 2
    return mel[off : off + length], pitch.values[off : off + length]


def extract_representations(
    model: VoiceConversionModel,
    cache_dir: str | Path,
    records: list[UtteranceRecord],
    crop_len: int = 128,
) -> Representations:
    """Run the frozen encoders on center crops of the listed utterances."""
    model.eval()
    mels, pitches, spk_ids, utt_ids = [], [], [], []
    for record in records:
        feats = frontend.read_features(cache_dir, record.utterance_id)
        mel, pitch = _center_crop(feats.mel, feats.pitch, crop_len)
        mels.append(mel)
        pitches.append(pitch)
        spk_ids.append(record.speaker_id)
        utt_ids.append(record.utterance_id)
    mel_t = torch.from_numpy(np.stack(mels))
    with torch.no_grad():
        dense = model.encode_content(mel_t)
        codes, _ = model.quantizer(dense)
        speaker = model.encode_speaker(mel_t)
    return Representations(codes, speaker, torch.from_numpy(np.stack(pitches)),
                           spk_ids, utt_ids)


# ------------------------------------------------------------------- MI --


def _fit_approximators(reps: Representations, idx: np.ndarray, cfg: dict,
                       seed: int) -> nn.ModuleDict:
    torch.manual_seed(seed)
    mi_cfg = cfg["mi"]
    kw = dict(hidden=mi_cfg["hidden"], n_hidden=mi_cfg["n_hidden"],
              logvar_clamp=mi_cfg["logvar_clamp"])
    content_dim = reps.codes.shape[-1]
    speaker_dim = reps.speaker.shape[-1]
    approx = nn.ModuleDict({
        "content_speaker": mi_mod.GaussianConditional(speaker_dim, content_dim, **kw),
        "pitch_speaker": mi_mod.GaussianConditional(speaker_dim, 1, **kw),
        "content_pitch": mi_mod.GaussianConditional(1, content_dim, **kw),
    })
    opt = torch.optim.Adam(approx.parameters(), lr=cfg["eval"]["mi_fit_lr"])
    codes, speaker, pitch = reps.codes[idx], reps.speaker[idx], reps.pitch[idx]
    pairs = mi_mod.approximator_pairs(codes, speaker, pitch)
    for _ in range(cfg["eval"]["mi_fit_steps"]):
        loss = -sum(mi_mod.log_likelihood(u, v, approx[name])
                    for name, (u, v) in pairs.items())
        opt.zero_grad()
        loss.backward()
        opt.step()
    return approx


def measure_mi(reps: Representations, cfg: dict, rounds: int = 10,
               seed: int = 0) -> dict:
    """Repeatedly refit conditionals on half the utterances and estimate MI
    on the other half; report mean and std per pair.

    Needs at least four utterances so both halves contain the two
    utterances the estimators require.
    """
    n = reps.codes.shape[0]
    if n < 4:
        raise EvalError(f"MI measurement needs >= 4 utterances, got {n}")
    rng = np.random.default_rng(seed)
    values: dict[str, list[float]] = {pair: [] for pair in mi_mod.PAIRS}
    for r in range(rounds):
        order = rng.permutation(n)
        fit_idx, eval_idx = order[: n // 2], order[n // 2 :]
        approx = _fit_approximators(reps, fit_idx, cfg, seed=seed * 1000 + r)
        with torch.no_grad():
            estimates = mi_mod.estimate_all(reps.codes[eval_idx], reps.speaker[eval_idx],
                                            reps.pitch[eval_idx], approx)
        for pair in mi_mod.PAIRS:
            values[pair].append(float(estimates[pair]))
    report = {
        "rounds": rounds,
        "n_utterances": n,
        "lambda_mi": cfg["train"]["lambda_mi"],
        "pairs": {
            pair: {
                "mean": float(np.mean(vals)),
                "std": float(np.std(vals, ddof=1)) if rounds >= 2 else 0.0,
                "values": vals,
            }
            for pair, vals in values.items()
        },
    }
    return report


# ---------------------------------------------------------------- probes --


class _Probe(nn.Module):
    """Fully connected probe: 4 hidden layers, shared by classifier and
    regressor heads."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 256):
        super().__init__()
        layers: list[nn.Module] = [nn.Linear(in_dim, hidden), nn.ReLU()]
        for _ in range(3):
            layers += [nn.Linear(hidden, hidden), nn.ReLU()]
        layers.append(nn.Linear(hidden, out_dim))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def _split_by_utterance(n_utts: int, ratio: float, rng: np.random.Generator):
    order = rng.permutation(n_utts)
    cut = max(1, min(n_utts - 1, int(round(n_utts * ratio))))
    return order[:cut], order[cut:]


def _train_probe(probe: nn.Module, x: torch.Tensor, y: torch.Tensor,
                 loss_fn, epochs: int, lr: float) -> None:
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    for _ in range(epochs):
        opt.zero_grad()
        loss_fn(probe(x), y).backward()
        opt.step()


def probe_speaker_accuracy(features: torch.Tensor, speaker_ids: list[str],
                           cfg: dict, seed: int = 0) -> float:
    """Held-out speaker classification accuracy of a probe on frozen features.

    ``features`` is (N, D) for utterance-level inputs or (N, T, D) for
    frame-level inputs; the train/test split is always by utterance.
    """
    labels = sorted(set(speaker_ids))
    if len(labels) < 2:
        raise EvalError("speaker probe needs at least 2 speakers")
    y_utt = torch.tensor([labels.index(s) for s in speaker_ids])
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    train_idx, test_idx = _split_by_utterance(features.shape[0], cfg["eval"]["probe_split"], rng)

    def flatten(idx):
        x = features[idx]
        y = y_utt[idx]
        if x.dim() == 3:
            y = y.unsqueeze(1).expand(-1, x.shape[1]).reshape(-1)
            x = x.reshape(-1, x.shape[-1])
        return x.float(), y

    x_train, y_train = flatten(torch.from_numpy(train_idx))
    x_test, y_test = flatten(torch.from_numpy(test_idx))
    probe = _Probe(features.shape[-1], len(labels), cfg["eval"]["probe_hidden"])
    _train_probe(probe, x_train, y_train, nn.functional.cross_entropy,
                 cfg["eval"]["probe_epochs"], cfg["eval"]["probe_lr"])
    with torch.no_grad():
        pred = probe(x_test).argmax(-1)
    return float((pred == y_test).float().mean())


def pitch_prediction_loss(codes: torch.Tensor, pitch_ds: torch.Tensor,
                          cfg: dict, seed: int = 0) -> float:
    """Held-out MSE of a probe predicting downsampled pitch from content
    frames; higher means less pitch information in the codes."""
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    train_idx, test_idx = _split_by_utterance(codes.shape[0], cfg["eval"]["probe_split"], rng)
    tr, te = torch.from_numpy(train_idx), torch.from_numpy(test_idx)
    x_train = codes[tr].reshape(-1, codes.shape[-1]).float()
    y_train = pitch_ds[tr].reshape(-1, 1).float()
    x_test = codes[te].reshape(-1, codes.shape[-1]).float()
    y_test = pitch_ds[te].reshape(-1, 1).float()
    probe = _Probe(codes.shape[-1], 1, cfg["eval"]["probe_hidden"])
    _train_probe(probe, x_train, y_train, nn.functional.mse_loss,
                 cfg["eval"]["probe_epochs"], cfg["eval"]["probe_lr"])
    with torch.no_grad():
        return float(nn.functional.mse_loss(probe(x_test), y_test))


# ----------------------------------------------------------------- F0 PCC --


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0.0:
        raise EvalError("PCC undefined for constant input")
    return float(np.clip((a * b).sum() / denom, -1.0, 1.0))


def f0_pcc(source: Waveform, converted: Waveform) -> float:
    """Pearson correlation of the two F0 tracks over jointly voiced frames.

    Tracks are truncated to the shorter length first; fewer than two
    jointly voiced frames is an error.
    """
    f0_a, voiced_a = frontend.extract_f0(source)
    f0_b, voiced_b = frontend.extract_f0(converted)
    t = min(f0_a.shape[0], f0_b.shape[0])
    both = voiced_a[:t] & voiced_b[:t]
    if both.sum() < 2:
        raise EvalError("fewer than 2 jointly voiced frames; F0-PCC undefined")
    return pearson(f0_a[:t][both], f0_b[:t][both])


# ------------------------------------------------------------ Same/Mixed --


def same_mixed_generate(
    model: VoiceConversionModel,
    cache_dir: str | Path,
    records: list[UtteranceRecord],
    out_dir: str | Path,
    vocoder: str = "griffinlim",
    vocoder_kwargs: dict | None = None,
) -> Path:
    """Generate paired audio per utterance: one decoding with its own
    speaker embedding (same) and one with the embedding of a different
    utterance of the same speaker (mixed; the next utterance, cyclically).

    Writes WAVs plus a JSON-lines manifest for external recognizer
    scoring; returns the manifest path.  Speakers with fewer than two
    utterances are skipped with a warning.
    """
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    by_speaker: dict[str, list[UtteranceRecord]] = {}
    for record in sorted(records, key=lambda r: r.utterance_id):
        by_speaker.setdefault(record.speaker_id, []).append(record)

    model.eval()
    manifest_path = out_dir / "same_mixed_manifest.jsonl"
    with open(manifest_path, "w") as manifest:
        for speaker_id, utts in sorted(by_speaker.items()):
            if len(utts) < 2:
                warnings.warn(f"speaker {speaker_id} has {len(utts)} utterance(s); "
                              "skipping Same/Mixed generation")
                continue
            embeds = {}
            feats = {}
            for record in utts:
                feats[record.utterance_id] = frontend.read_features(cache_dir,
                                                                    record.utterance_id)
            with torch.no_grad():
                for record in utts:
                    mel = torch.from_numpy(feats[record.utterance_id].mel).unsqueeze(0)
                    embeds[record.utterance_id] = model.encode_speaker(mel)
            for i, record in enumerate(utts):
                donor = utts[(i + 1) % len(utts)]
                f = feats[record.utterance_id]
                t = f.mel.shape[0] - f.mel.shape[0] % 2
                mel = torch.from_numpy(f.mel[:t]).unsqueeze(0)
                pitch = torch.from_numpy(f.pitch.values[:t]).unsqueeze(0)
                with torch.no_grad():
                    dense = model.encode_content(mel)
                    codes, _ = model.quantizer(dense)
                    for condition, spk_utt in (("same", record.utterance_id),
                                               ("mixed", donor.utterance_id)):
                        _, post = model.decode(codes, embeds[spk_utt], pitch)
                        gen = MelSpectrogram(post.squeeze(0).numpy())
                        wav = vocode(gen, vocoder, **(vocoder_kwargs or {}))
                        path = audio_dir / f"{record.utterance_id}.{condition}.wav"
                        wavfile.write(path, wav.sample_rate,
                                      (np.clip(wav.samples, -1, 1) * 32767.0).astype(np.int16))
                        manifest.write(json.dumps({
                            "condition": condition,
                            "speaker": speaker_id,
                            "content_utt": record.utterance_id,
                            "speaker_utt": spk_utt,
                            "audio": str(path),
                            "reference": str(record.transcript) if record.transcript else None,
                        }) + "\n")
    return manifest_path


# --------------------------------------------------------------- CER/WER --


def edit_distance(ref: list, hyp: list) -> int:
    """Levenshtein distance (substitutions, insertions, deletions all cost 1)."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def _normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


def cer(reference: str, hypothesis: str) -> float:
    ref = list(_normalize_text(reference))
    if not ref:
        raise EvalError("empty reference; CER undefined")
    return edit_distance(ref, list(_normalize_text(hypothesis))) / len(ref)


def wer(reference: str, hypothesis: str) -> float:
    ref = _normalize_text(reference).split()
    if not ref:
        raise EvalError("empty reference; WER undefined")
    return edit_distance(ref, _normalize_text(hypothesis).split()) / len(ref)


def asr_score_hook(manifest_path: str | Path, command: str | None) -> dict:
    """Score Same/Mixed audio with an external recognizer.

    The command receives the audio paths as extra arguments and on stdin
    (one per line) and must print one transcript line per input, in
    order.  Without a command the report is marked skipped.
    """
    entries = [json.loads(line) for line in Path(manifest_path).read_text().splitlines()]
    if command is None:
        return {"skipped": True, "reason": "no ASR command configured",
                "n_utterances": len(entries)}
    audio_paths = [e["audio"] for e in entries]
    proc = subprocess.run(
        shlex.split(command) + audio_paths,
        input="\n".join(audio_paths) + "\n",
        capture_output=True, text=True, check=True,
    )
    transcripts = proc.stdout.splitlines()
    if len(transcripts) != len(entries):
        raise EvalError(f"ASR command returned {len(transcripts)} transcripts "
                        f"for {len(entries)} inputs")
    scores: dict[str, dict[str, list[float]]] = {
        "same": {"cer": [], "wer": []}, "mixed": {"cer": [], "wer": []},
    }
    for entry, hyp in zip(entries, transcripts):
        if entry["reference"] is None:
            continue
        ref = Path(entry["reference"]).read_text()
        scores[entry["condition"]]["cer"].append(cer(ref, hyp))
        scores[entry["condition"]]["wer"].append(wer(ref, hyp))
    report: dict = {"skipped": False, "n_utterances": len(entries)}
    for condition, metrics in scores.items():
        report[condition] = {name: float(np.mean(vals)) if vals else None
                             for name, vals in metrics.items()}
    for metric, delta in (("cer", "delta_c"), ("wer", "delta_w")):
        a, b = report["mixed"][metric], report["same"][metric]
        report[delta] = (a - b) if (a is not None and b is not None) else None
    return report
