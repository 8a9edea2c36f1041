import json
from pathlib import Path

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from onevc import frontend
from onevc.config import preset
from onevc.data import FeatureDataset, load_manifest
from onevc.toy import build_toy_corpus
from onevc.trainer import Trainer


def extract_corpus(manifest_path: Path, cache_dir: Path) -> None:
    for record in load_manifest(manifest_path):
        wav = frontend.load_waveform(record.wav)
        mel = frontend.mel_spectrogram(wav)
        f0, voiced = frontend.extract_f0(wav)
        pitch = frontend.normalize_logf0(f0, voiced)
        frontend.write_features(cache_dir, record.utterance_id, record.speaker_id, mel, pitch)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """Three synthetic speakers, 20 train + 6 test utterances each, with
    features extracted into a cache."""
    root = tmp_path_factory.mktemp("toy_corpus")
    manifest = build_toy_corpus(root, n_train=20, n_test=6, seed=0)
    cache = root / "cache"
    extract_corpus(manifest, cache)
    return {"root": root, "manifest": manifest, "cache": cache}


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Three speakers x three utterances, for fast CLI and protocol tests."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    manifest = build_toy_corpus(root, n_train=2, n_test=1, seed=7)
    cache = root / "cache"
    extract_corpus(manifest, cache)
    return {"root": root, "manifest": manifest, "cache": cache}


def train_toy(corpus, out_dir: Path, seed: int, lambda_mi: float,
              epochs: int | None = None) -> Path:
    cfg = preset("desk")
    cfg["seed"] = seed
    cfg["train"]["lambda_mi"] = lambda_mi
    records = [r for r in load_manifest(corpus["manifest"]) if r.split == "train"]
    dataset = FeatureDataset(corpus["cache"], records, cfg["train"]["segment_len"])
    trainer = Trainer(cfg)
    return trainer.train(dataset, out_dir, epochs=epochs)


@pytest.fixture(scope="session")
def trained_runs(toy_corpus, tmp_path_factory):
    """Paired desk-preset runs: three seeds at lambda_mi 0 and 1e-2.

    Returns {(seed, lambda): {"checkpoint": path, "log": path,
    "seconds": float}}; the timing of the lambda=1e-2 arm feeds the
    training-smoke budget check.
    """
    import time

    root = tmp_path_factory.mktemp("runs")
    runs = {}
    for seed in (0, 1, 2):
        for lam in (0.0, 1e-2):
            out = root / f"seed{seed}_lam{lam:g}"
            start = time.monotonic()
            ckpt = train_toy(toy_corpus, out, seed, lam)
            runs[(seed, lam)] = {
                "checkpoint": ckpt,
                "log": out / "train_log.jsonl",
                "seconds": time.monotonic() - start,
            }
    return runs


@pytest.fixture(scope="session")
def desk_checkpoint(trained_runs):
    """The seed-0, lambda=1e-2 run shared by converter/evaluation tests."""
    return trained_runs[(0, 1e-2)]["checkpoint"]


def read_log(path: Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines()]


@pytest.fixture
def rng():
    return np.random.default_rng(0)
