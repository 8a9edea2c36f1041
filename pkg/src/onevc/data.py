"""Corpus manifests and the training-time dataset over cached features."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import frontend


class ManifestError(ValueError):
    """Raised for malformed or inconsistent corpus manifests."""


@dataclass
class UtteranceRecord:
    utterance_id: str
    speaker_id: str
    wav: Path
    transcript: Path | None = None
    split: str = "train"


def load_manifest(path: str | Path, check_files: bool = True) -> list[UtteranceRecord]:
    path = Path(path)
    doc = json.loads(path.read_text())
    entries = doc["utterances"] if isinstance(doc, dict) else doc
    records = []
    seen = set()
    base = path.parent
    for entry in entries:
        uid = entry["utterance_id"]
        if uid in seen:
            raise ManifestError(f"duplicate utterance_id: {uid}")
        seen.add(uid)
        wav = Path(entry["wav"])
        if not wav.is_absolute():
            wav = base / wav
        transcript = entry.get("transcript")
        if transcript is not None:
            transcript = Path(transcript)
            if not transcript.is_absolute():
                transcript = base / transcript
        if check_files:
            if not wav.exists():
                raise ManifestError(f"missing wav for {uid}: {wav}")
            if transcript is not None and not transcript.exists():
                raise ManifestError(f"missing transcript for {uid}: {transcript}")
        records.append(UtteranceRecord(uid, entry["speaker_id"], wav, transcript,
                                       entry.get("split", "train")))
    if not records:
        raise ManifestError(f"manifest {path} lists no utterances")
    return records


def save_manifest(path: str | Path, records: list[UtteranceRecord]) -> Path:
    path = Path(path)
    doc = {"utterances": []}
    for r in records:
        entry = {
            "utterance_id": r.utterance_id,
            "speaker_id": r.speaker_id,
            "wav": str(r.wav),
            "split": r.split,
        }
        if r.transcript is not None:
            entry["transcript"] = str(r.transcript)
        doc["utterances"].append(entry)
    path.write_text(json.dumps(doc, indent=1))
    return path


class FeatureDataset:
    """Cached features for a set of utterances, batched for training.

    Every epoch visits each utterance once with a fresh random crop; the
    visit order and crop offsets are fully determined by the generator
    passed to ``batches``, so training runs are reproducible from a seed.
    """

    def __init__(self, cache_dir: str | Path, records: list[UtteranceRecord],
                 segment_len: int = 128):
        self.cache_dir = Path(cache_dir)
        self.records = sorted(records, key=lambda r: r.utterance_id)
        self.segment_len = segment_len
        missing = [r.utterance_id for r in self.records
                   if not frontend.has_features(self.cache_dir, r.utterance_id)]
        if missing:
            raise ManifestError(
                f"feature cache {self.cache_dir} is missing {len(missing)} utterances "
                f"(first: {missing[0]}); run the extract step first"
            )

    def __len__(self) -> int:
        return len(self.records)

    def segment(self, record: UtteranceRecord, rng: np.random.Generator) -> frontend.TrainingSegment:
        feats = frontend.read_features(self.cache_dir, record.utterance_id)
        mel = frontend.MelSpectrogram(feats.mel)
        return frontend.random_crop(mel, feats.pitch, self.segment_len, rng,
                                    record.utterance_id, record.speaker_id)

    def batches(self, batch_size: int, rng: np.random.Generator):
        """Yield (mel, pitch, voiced) tensor triples covering one epoch.

        A trailing batch of a single utterance is dropped: the MI
        estimators need at least two utterances per batch.
        """
        order = rng.permutation(len(self.records))
        for start in range(0, len(order), batch_size):
            chunk = order[start : start + batch_size]
            if len(chunk) < 2:
                continue
            segs = [self.segment(self.records[i], rng) for i in chunk]
            mel = torch.from_numpy(np.stack([s.mel for s in segs]))
            pitch = torch.from_numpy(np.stack([s.pitch for s in segs]))
            voiced = torch.from_numpy(np.stack([s.voiced for s in segs]))
            yield mel, pitch, voiced
