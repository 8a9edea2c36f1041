"""Command-line surface: extract -> train -> convert -> eval.

Every command exits 0 on success and writes a machine-readable JSON error
record to stderr on failure.  Exit codes: 1 usage/config error, 2 partial
data failure, 3 numeric failure.  All randomness flows from --seed.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import convert as convert_mod
from . import evaluate as eval_mod
from . import frontend
from .config import ConfigError, config_hash, resolve
from .data import FeatureDataset, ManifestError, load_manifest
from .trainer import NumericError, Trainer, load_model

EXIT_USAGE = 1
EXIT_PARTIAL = 2
EXIT_NUMERIC = 3

CACHE_ROOT_ENV = "ONEVC_CACHE_ROOT"


def _fail(code: int, kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "detail": message}) + "\n")
    sys.exit(code)


def _resolve_cache(cache: str) -> Path:
    path = Path(cache)
    root = os.environ.get(CACHE_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _load_cfg(preset: str, config: str | None, seed: int | None,
              lambda_mi: float | None) -> dict:
    overrides: dict = {}
    if seed is not None:
        overrides["seed"] = seed
    if lambda_mi is not None:
        overrides["train"] = {"lambda_mi": lambda_mi}
    try:
        return resolve(preset, config, overrides)
    except (ConfigError, FileNotFoundError) as exc:
        _fail(EXIT_USAGE, "config", str(exc))


common_options = [
    click.option("--config", type=click.Path(), default=None, help="JSON config overrides."),
    click.option("--preset", type=click.Choice(["paper", "desk"]), default="desk",
                 show_default=True),
    click.option("--seed", type=int, default=None, help="Override the config seed."),
]


def _with_options(options):
    def wrap(fn):
        for option in reversed(options):
            fn = option(fn)
        return fn
    return wrap


@click.group()
def main():
    """One-shot voice conversion with disentangled representations."""


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--force", is_flag=True, help="Re-extract even when cached.")
@_with_options(common_options)
def extract(manifest, out_dir, force, config, preset, seed):
    """Extract mel and pitch features for every utterance in a manifest."""
    cfg = _load_cfg(preset, config, seed, None)
    f = cfg["features"]
    try:
        records = load_manifest(manifest)
    except (ManifestError, OSError, json.JSONDecodeError) as exc:
        _fail(EXIT_USAGE, "manifest", str(exc))
    cache = _resolve_cache(out_dir)
    written = skipped = failed = 0
    for record in records:
        if not force and frontend.has_features(cache, record.utterance_id):
            skipped += 1
            continue
        try:
            wav = frontend.load_waveform(record.wav)
            mel = frontend.mel_spectrogram(wav, f["n_mels"], f["fmin"], f["fmax"],
                                           f["mel_floor"])
            f0, voiced = frontend.extract_f0(wav, f["f0_min"], f["f0_max"],
                                             f["voicing_threshold"])
            pitch = frontend.normalize_logf0(f0, voiced)
            frontend.write_features(cache, record.utterance_id, record.speaker_id, mel, pitch)
            written += 1
        except (frontend.IngestError, frontend.FeatureError) as exc:
            failed += 1
            sys.stderr.write(json.dumps({"error": "extract", "utterance_id":
                                         record.utterance_id, "detail": str(exc)}) + "\n")
    click.echo(json.dumps({"written": written, "skipped": skipped, "failed": failed,
                           "cache": str(cache), "config_hash": config_hash(cfg)}))
    if failed:
        sys.exit(EXIT_PARTIAL)


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--cache", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--lambda-mi", type=float, default=None, help="Override train.lambda_mi.")
@click.option("--epochs", type=int, default=None, help="Override train.epochs.")
@click.option("--resume", is_flag=True, help="Continue from the latest checkpoint in --out.")
@_with_options(common_options)
def train(manifest, cache, out_dir, lambda_mi, epochs, resume, config, preset, seed):
    """Train on the cached features of a manifest's train split."""
    cfg = _load_cfg(preset, config, seed, lambda_mi)
    try:
        records = [r for r in load_manifest(manifest) if r.split == "train"]
        dataset = FeatureDataset(_resolve_cache(cache), records, cfg["train"]["segment_len"])
    except (ManifestError, OSError) as exc:
        _fail(EXIT_USAGE, "data", str(exc))
    out = Path(out_dir)
    latest = out / "latest.ckpt"
    if resume and latest.exists():
        trainer = Trainer.from_checkpoint(latest)
    else:
        trainer = Trainer(cfg)
    try:
        ckpt = trainer.train(dataset, out, epochs=epochs)
    except NumericError as exc:
        _fail(EXIT_NUMERIC, "numeric", str(exc))
    click.echo(json.dumps({"checkpoint": str(ckpt), "epochs": trainer.epoch,
                           "steps": trainer.step, "config_hash": config_hash(trainer.cfg)}))


@main.command()
@click.option("--source", type=click.Path(exists=True), default=None)
@click.option("--target", type=click.Path(exists=True), default=None)
@click.option("--pairs", type=click.Path(exists=True), default=None,
              help="File of 'source target output' triples, one per line.")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--out", "output", type=click.Path(), default=None)
def convert(source, target, pairs, checkpoint, output):
    """Convert source utterances to a target speaker's voice."""
    if not Path(checkpoint).exists():
        _fail(EXIT_USAGE, "checkpoint", f"checkpoint not found: {checkpoint}")
    requests = []
    if pairs is not None:
        for line in Path(pairs).read_text().splitlines():
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3:
                _fail(EXIT_USAGE, "pairs", f"expected 'source target output', got: {line!r}")
            requests.append(convert_mod.ConversionRequest(
                Path(parts[0]), Path(parts[1]), Path(checkpoint), Path(parts[2])))
    else:
        if source is None or target is None or output is None:
            _fail(EXIT_USAGE, "usage", "--source/--target/--out or --pairs is required")
        requests.append(convert_mod.ConversionRequest(
            Path(source), Path(target), Path(checkpoint), Path(output)))
    failed = 0
    outputs = []
    for req in requests:
        try:
            outputs.append(str(convert_mod.convert_file(req)))
        except (frontend.IngestError, frontend.FeatureError) as exc:
            failed += 1
            sys.stderr.write(json.dumps({"error": "convert", "source": str(req.source_wav),
                                         "detail": str(exc)}) + "\n")
    click.echo(json.dumps({"outputs": outputs, "failed": failed}))
    if failed:
        sys.exit(EXIT_PARTIAL)


@main.command("eval")
@click.option("--kind", required=True,
              type=click.Choice(["mi", "probe", "pcc", "same-mixed"]))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--cache", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--asr-cmd", default=None, help="External recognizer command for CER/WER.")
@click.option("--pcc-pairs", type=click.Path(exists=True), default=None,
              help="File of 'source converted' WAV pairs; default: identity pairs.")
@click.option("--seed", type=int, default=0)
def eval_cmd(kind, checkpoint, manifest, cache, out_dir, asr_cmd, pcc_pairs, seed):
    """Measurement protocols over a trained checkpoint and the test split."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = _resolve_cache(cache)
    try:
        records = load_manifest(manifest)
    except (ManifestError, OSError) as exc:
        _fail(EXIT_USAGE, "manifest", str(exc))
    test_records = [r for r in records if r.split == "test"] or records
    model, cfg = load_model(checkpoint)
    report: dict = {"kind": kind, "checkpoint": str(checkpoint),
                    "config_hash": config_hash(cfg)}

    if kind == "mi":
        reps = eval_mod.extract_representations(model, cache, test_records,
                                                cfg["eval"]["crop_len"])
        try:
            report["mi"] = eval_mod.measure_mi(reps, cfg, cfg["eval"]["mi_rounds"], seed)
        except eval_mod.EvalError as exc:
            _fail(EXIT_USAGE, "eval", str(exc))
    elif kind == "probe":
        reps = eval_mod.extract_representations(model, cache, test_records,
                                                cfg["eval"]["crop_len"])
        try:
            report["probe"] = {
                "content_speaker_accuracy": eval_mod.probe_speaker_accuracy(
                    reps.codes, reps.speaker_ids, cfg, seed),
                "speaker_embedding_accuracy": eval_mod.probe_speaker_accuracy(
                    reps.speaker, reps.speaker_ids, cfg, seed),
                "pitch_prediction_mse": eval_mod.pitch_prediction_loss(
                    reps.codes, reps.pitch_ds, cfg, seed),
                "chance": 1.0 / len(set(reps.speaker_ids)),
            }
        except eval_mod.EvalError as exc:
            _fail(EXIT_USAGE, "eval", str(exc))
    elif kind == "pcc":
        values = {}
        if pcc_pairs is not None:
            pair_list = [line.split() for line in Path(pcc_pairs).read_text().splitlines()
                         if line.strip()]
        else:
            pair_list = [(str(r.wav), str(r.wav)) for r in test_records]
        for src, conv in pair_list:
            try:
                values[f"{Path(src).stem}:{Path(conv).stem}"] = eval_mod.f0_pcc(
                    frontend.load_waveform(src), frontend.load_waveform(conv))
            except eval_mod.EvalError as exc:
                values[f"{Path(src).stem}:{Path(conv).stem}"] = None
                sys.stderr.write(json.dumps({"error": "pcc", "source": src,
                                             "detail": str(exc)}) + "\n")
        valid = [v for v in values.values() if v is not None]
        report["pcc"] = {"values": values,
                         "mean": float(np.mean(valid)) if valid else None}
    elif kind == "same-mixed":
        manifest_path = eval_mod.same_mixed_generate(
            model, cache, test_records, out,
            cfg["vocoder"]["name"], {"iterations": cfg["vocoder"]["iterations"]})
        report["manifest"] = str(manifest_path)
        report["asr"] = eval_mod.asr_score_hook(manifest_path, asr_cmd)

    report_path = out / f"report_{kind}.json"
    report_path.write_text(json.dumps(report, indent=1))
    _write_flat_csv(report, out / f"report_{kind}.csv")
    click.echo(json.dumps({"report": str(report_path)}))


def _write_flat_csv(report: dict, path: Path) -> None:
    rows = []

    def walk(prefix, node):
        if isinstance(node, dict):
            for key, value in node.items():
                walk(f"{prefix}.{key}" if prefix else key, value)
        elif isinstance(node, (int, float)) and not isinstance(node, bool):
            rows.append((prefix, node))

    walk("", report)
    path.write_text("metric,value\n" + "\n".join(f"{k},{v}" for k, v in rows) + "\n")


if __name__ == "__main__":
    main()
