"""Alternating training of the conversion network and the variational
conditionals.

Every iteration runs two strictly ordered phases on the same batch:

1. approximator phase: encoder outputs are computed without gradient and
   the three conditionals ascend their matched log-likelihood at a fixed
   learning rate;
2. conversion phase: the full model is re-run with gradients, and the
   combined commitment + contrastive + reconstruction + weighted-MI loss
   descends on the encoder/decoder parameters while the conditionals stay
   frozen; afterwards the codebook takes its EMA update.

Phase isolation is a hard contract: phase 1 never changes conversion
parameters and phase 2 never changes conditional parameters.  Training is
deterministic given the seed, and checkpoints restore every tensor of
state (parameters, EMA buffers, optimizer moments, RNG) so a resumed run
reproduces an uninterrupted one exactly.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import mi as mi_mod
from .checkpoint import load_archive, save_archive
from .config import config_hash
from .data import FeatureDataset
from .model import VoiceConversionModel, load_state_tensors, state_tensors
from .objectives import cpc_loss, rec_loss, vq_loss

logger = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Raised when a loss or parameter becomes non-finite; carries the
    diagnostic record written to the training log."""

    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


def lr_schedule(
    epoch: int,
    base_lr: float = 1e-3,
    floor_lr: float = 1e-6,
    warmup_epochs: int = 15,
    decay_start: int = 200,
    decay_every: int = 100,
) -> float:
    """Linear warmup from the floor to the base rate, flat plateau, then a
    halving every ``decay_every`` epochs starting ``decay_every`` after
    ``decay_start``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch <= warmup_epochs:
        return floor_lr + (base_lr - floor_lr) * epoch / warmup_epochs
    halvings = max(0, (epoch - decay_start) // decay_every)
    return base_lr * 0.5**halvings


def _optimizer_tensors(opt: torch.optim.Optimizer, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for idx, state in opt.state_dict()["state"].items():
        for key, value in state.items():
            if torch.is_tensor(value):
                out[f"{prefix}{idx}.{key}"] = value.detach().cpu().numpy().astype("<f4")
    return out


def _restore_optimizer(opt: torch.optim.Optimizer, tensors: dict[str, np.ndarray],
                       prefix: str, lr: float) -> None:
    sd = opt.state_dict()
    state: dict[int, dict] = {}
    for name, arr in tensors.items():
        if not name.startswith(prefix):
            continue
        idx_str, key = name[len(prefix):].split(".", 1)
        entry = state.setdefault(int(idx_str), {})
        tensor = torch.from_numpy(np.asarray(arr).copy())
        entry[key] = tensor.reshape(()) if arr.shape == () else tensor
    sd["state"] = state
    for group in sd["param_groups"]:
        group["lr"] = lr
    opt.load_state_dict(sd)


class Trainer:
    """Owns the model, the conditionals, both optimizers and the RNG streams."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        t = cfg["train"]
        torch.manual_seed(cfg["seed"])
        self.model = VoiceConversionModel(cfg)
        self.approximators = mi_mod.build_approximators(cfg)
        betas = (t["adam_beta1"], t["adam_beta2"])
        self.opt_vc = torch.optim.Adam(self.model.parameters(), lr=t["floor_lr"],
                                       betas=betas, eps=t["adam_eps"])
        self.opt_approx = torch.optim.Adam(self.approximators.parameters(),
                                           lr=t["approx_lr"], betas=betas, eps=t["adam_eps"])
        self.data_rng = np.random.default_rng([cfg["seed"], 1])
        self.neg_rng = np.random.default_rng([cfg["seed"], 2])
        self.epoch = 0
        self.step = 0
        self.history: list[dict] = []

    # ----------------------------------------------------------- phases --

    def approximator_step(self, mel: torch.Tensor, pitch: torch.Tensor) -> dict[str, float]:
        """Phase 1: ascend matched log-likelihood of the three conditionals.

        Encoder outputs are computed under no_grad, so nothing can reach
        the conversion parameters.
        """
        self.model.eval()
        with torch.no_grad():
            dense = self.model.encode_content(mel)
            codes, _ = self.model.quantizer(dense)
            speaker = self.model.encode_speaker(mel)
        pairs = mi_mod.approximator_pairs(codes, speaker, pitch)
        lls = {name: mi_mod.log_likelihood(u, v, self.approximators[name])
               for name, (u, v) in pairs.items()}
        loss = -sum(lls.values())
        self.opt_approx.zero_grad()
        loss.backward()
        self.opt_approx.step()
        return {f"ll_{name}": float(value.detach()) for name, value in lls.items()}

    def vc_step(self, mel: torch.Tensor, pitch: torch.Tensor) -> dict[str, float]:
        """Phase 2: descend the conversion loss with conditionals frozen,
        then apply the EMA codebook update."""
        t = self.cfg["train"]
        lam = t["lambda_mi"]
        self.model.train()
        self.approximators.requires_grad_(False)
        try:
            out = self.model(mel, pitch)
            l_vq = vq_loss(out["dense"], out["codes"])
            l_cpc = cpc_loss(out["codes"], out["aggregate"], self.model.cpc, self.neg_rng)
            l_rec = rec_loss(out["pre"], out["post"], mel)
            if lam > 0:
                estimates = mi_mod.estimate_all(out["codes"], out["speaker"], pitch,
                                                self.approximators)
                l_mi = mi_mod.total_mi(estimates["content_speaker"],
                                       estimates["content_pitch"],
                                       estimates["pitch_speaker"])
                l_vc = l_vq + l_cpc + l_rec + lam * l_mi
            else:
                with torch.no_grad():
                    estimates = mi_mod.estimate_all(out["codes"], out["speaker"], pitch,
                                                    self.approximators)
                    l_mi = mi_mod.total_mi(estimates["content_speaker"],
                                           estimates["content_pitch"],
                                           estimates["pitch_speaker"])
                l_vc = l_vq + l_cpc + l_rec
            self.opt_vc.zero_grad()
            l_vc.backward()
            nn.utils.clip_grad_norm_(self.model.parameters(), t["grad_clip"])
            self.opt_vc.step()
        finally:
            self.approximators.requires_grad_(True)
        self.model.quantizer.ema_update(out["dense"], out["indices"])

        record = {
            "loss_vq": float(l_vq.detach()),
            "loss_cpc": float(l_cpc.detach()),
            "loss_rec": float(l_rec.detach()),
            "loss_mi": float(l_mi.detach()),
            "loss_vc": float(l_vc.detach()),
            "mi_content_speaker": float(estimates["content_speaker"].detach()),
            "mi_content_pitch": float(estimates["content_pitch"].detach()),
            "mi_pitch_speaker": float(estimates["pitch_speaker"].detach()),
        }
        if not np.isfinite(record["loss_vc"]):
            raise NumericError("non-finite conversion loss", {"event": "numeric_failure",
                                                              "step": self.step, **record})
        for name, param in self.model.named_parameters():
            if not torch.isfinite(param).all():
                raise NumericError(f"non-finite parameter {name}",
                                   {"event": "numeric_failure", "step": self.step,
                                    "parameter": name, **record})
        return record

    def train_step(self, mel: torch.Tensor, pitch: torch.Tensor) -> dict:
        """One full iteration: approximator phase strictly before VC phase."""
        if not (torch.isfinite(mel).all() and torch.isfinite(pitch).all()):
            raise NumericError("non-finite values in training batch",
                               {"event": "numeric_failure", "step": self.step,
                                "detail": "non-finite batch"})
        lls = self.approximator_step(mel, pitch)
        record = self.vc_step(mel, pitch)
        record.update(lls)
        record["step"] = self.step
        record["epoch"] = self.epoch
        record["lr"] = self.opt_vc.param_groups[0]["lr"]
        self.step += 1
        return record

    # ------------------------------------------------------------- loop --

    def train(self, dataset: FeatureDataset, out_dir: str | Path,
              epochs: int | None = None, log_name: str = "train_log.jsonl") -> Path:
        """Run epochs of fresh-crop batches; returns the final checkpoint path."""
        t = self.cfg["train"]
        epochs = t["epochs"] if epochs is None else epochs
        if len(dataset) == 0:
            raise ValueError("dataset is empty")
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(self.cfg, indent=1))
        log_path = out_dir / log_name
        ckpt_path = out_dir / "latest.ckpt"
        with open(log_path, "a") as log:
            while self.epoch < epochs:
                lr = lr_schedule(self.epoch, t["base_lr"], t["floor_lr"],
                                 t["warmup_epochs"], t["decay_start"], t["decay_every"])
                for group in self.opt_vc.param_groups:
                    group["lr"] = lr
                for mel, pitch, _ in dataset.batches(t["batch_size"], self.data_rng):
                    try:
                        record = self.train_step(mel, pitch)
                    except NumericError as err:
                        log.write(json.dumps(err.record) + "\n")
                        raise
                    self.history.append(record)
                    log.write(json.dumps(record) + "\n")
                dead = self.model.quantizer.reset_usage()
                log.write(json.dumps({"event": "epoch_end", "epoch": self.epoch,
                                      "dead_codes": dead}) + "\n")
                log.flush()
                self.epoch += 1
                if self.epoch % t["checkpoint_every"] == 0 or self.epoch == epochs:
                    self.save_checkpoint(out_dir / f"epoch{self.epoch:04d}.ckpt")
                    self.save_checkpoint(ckpt_path)
        if not ckpt_path.exists():
            self.save_checkpoint(ckpt_path)
        logger.info("training finished at epoch %d (%d steps)", self.epoch, self.step)
        return ckpt_path

    # ------------------------------------------------------ persistence --

    def save_checkpoint(self, path: str | Path) -> Path:
        tensors = {}
        tensors.update(state_tensors(self.model, "model."))
        tensors.update(state_tensors(self.approximators, "approx."))
        tensors.update(_optimizer_tensors(self.opt_vc, "optim_vc."))
        tensors.update(_optimizer_tensors(self.opt_approx, "optim_approx."))
        manifest = {
            "config": self.cfg,
            "config_hash": config_hash(self.cfg),
            "epoch": self.epoch,
            "step": self.step,
            "lr": self.opt_vc.param_groups[0]["lr"],
            "rng": {
                "data": self.data_rng.bit_generator.state,
                "negatives": self.neg_rng.bit_generator.state,
            },
            "history": self.history,
        }
        return save_archive(path, tensors, manifest)

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "Trainer":
        tensors, manifest = load_archive(path)
        trainer = cls(manifest["config"])
        load_state_tensors(trainer.model, tensors, "model.")
        load_state_tensors(trainer.approximators, tensors, "approx.")
        _restore_optimizer(trainer.opt_vc, tensors, "optim_vc.", manifest["lr"])
        _restore_optimizer(trainer.opt_approx, tensors, "optim_approx.",
                           trainer.cfg["train"]["approx_lr"])
        trainer.data_rng.bit_generator.state = manifest["rng"]["data"]
        trainer.neg_rng.bit_generator.state = manifest["rng"]["negatives"]
        trainer.epoch = manifest["epoch"]
        trainer.step = manifest["step"]
        trainer.history = list(manifest["history"])
        return trainer


def load_model(path: str | Path) -> tuple[VoiceConversionModel, dict]:
    """Rebuild just the conversion model from a checkpoint, in eval mode."""
    tensors, manifest = load_archive(path)
    cfg = manifest["config"]
    model = VoiceConversionModel(cfg)
    load_state_tensors(model, tensors, "model.")
    model.eval()
    return model, cfg
