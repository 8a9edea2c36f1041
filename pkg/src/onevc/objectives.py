"""Representation-learning losses: commitment, future-prediction
contrastive, and reconstruction.

Shapes follow the convention: K utterances per batch, T mel frames per
segment, T/2 content frames.  All losses are means, so duplicating a
batch leaves them unchanged.
"""

from __future__ import annotations

import warnings

import numpy as np
import torch
from torch import nn


def vq_loss(dense: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
    """Commitment loss: mean squared distance from encoder outputs to their
    assigned (gradient-stopped) codes.

    Equals (2 / (K*T)) * sum_k sum_t ||z - sg(z_q)||^2 for T mel frames,
    i.e. the mean over the K*T/2 content frames.  Gradient reaches only
    ``dense``.
    """
    if dense.shape != codes.shape:
        raise ValueError(f"shape mismatch: {tuple(dense.shape)} vs {tuple(codes.shape)}")
    return ((dense - codes.detach()) ** 2).sum(-1).mean()


def rec_loss(pred_pre: torch.Tensor, pred_post: torch.Tensor,
             target: torch.Tensor) -> torch.Tensor:
    """Reconstruction loss: per-frame L1 plus per-frame Euclidean norm,
    averaged over frames, applied to both decoder outputs and summed.

    The L2 term is the per-frame norm, not its square.
    """
    if pred_pre.shape != target.shape or pred_post.shape != target.shape:
        raise ValueError("prediction/target shape mismatch")

    def one(pred):
        diff = pred - target
        return (diff.abs().sum(-1) + diff.pow(2).sum(-1).sqrt()).mean()

    return one(pred_pre) + one(pred_post)


def sample_negatives(
    n_frames: int,
    t: int,
    m: int,
    n: int = 10,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Indices of ``n`` negative samples for one (t, m) position.

    Drawn uniformly without replacement from the utterance's frames with
    the positive frame t+m excluded.  Utterances with at most n+1 frames
    fall back to sampling with replacement (and warn).
    """
    if rng is None:
        rng = np.random.default_rng()
    positive = t + m
    if not 0 <= positive < n_frames:
        raise ValueError(f"positive index {positive} outside utterance of {n_frames} frames")
    eligible = n_frames - 1
    if eligible >= n:
        keys = rng.random(n_frames)
        keys[positive] = np.inf
        return np.argpartition(keys, n)[:n]
    warnings.warn(f"utterance of {n_frames} frames too short for {n} distinct negatives; "
                  "sampling with replacement")
    pool = np.delete(np.arange(n_frames), positive)
    return pool[rng.integers(0, eligible, size=n)]


def sample_negative_indices(
    k: int,
    n_frames: int,
    t_max: int,
    steps: int,
    n: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Batched negatives, shape (k, t_max, steps, n), same contract as
    sample_negatives for every (utterance, t, m) cell."""
    eligible = n_frames - 1
    positives = (np.arange(t_max)[:, None] + np.arange(1, steps + 1)[None, :])  # (t_max, steps)
    if eligible >= n:
        keys = rng.random((k, t_max, steps, n_frames))
        np.put_along_axis(keys, positives[None, :, :, None], np.inf, axis=3)
        return np.argpartition(keys, n, axis=3)[..., :n]
    warnings.warn(f"utterance of {n_frames} frames too short for {n} distinct negatives; "
                  "sampling with replacement")
    draws = rng.integers(0, eligible, size=(k, t_max, steps, n))
    # skip the positive index by shifting draws at or above it
    return draws + (draws >= positives[None, :, :, None])


class ContrastivePredictor(nn.Module):
    """Bilinear future-prediction scores over M steps.

    Holds one projection matrix per prediction step; score of candidate c
    against context r at horizon m is c^T W_m r.
    """

    def __init__(self, content_dim: int, context_dim: int,
                 prediction_steps: int = 6, n_negatives: int = 10):
        super().__init__()
        self.prediction_steps = prediction_steps
        self.n_negatives = n_negatives
        self.proj = nn.Parameter(torch.empty(prediction_steps, content_dim, context_dim))
        nn.init.xavier_uniform_(self.proj)


def cpc_loss(
    codes: torch.Tensor,
    aggregate: torch.Tensor,
    predictor: ContrastivePredictor,
    rng: np.random.Generator,
) -> torch.Tensor:
    """Future-prediction contrastive loss.

    For every context position t and horizon m, the quantized frame at
    t+m must outrank n_negatives frames sampled from the same utterance;
    the softmax denominator includes the positive, so the loss is bounded
    below by 0 and equals ln(n_negatives + 1) when all scores tie.
    """
    k, t2, dim = codes.shape
    steps = predictor.prediction_steps
    n_neg = predictor.n_negatives
    t_max = t2 - steps
    if t_max <= 0:
        raise ValueError(f"content length {t2} must exceed prediction steps {steps}")

    neg_idx = torch.from_numpy(
        np.ascontiguousarray(sample_negative_indices(k, t2, t_max, steps, n_neg, rng))
    ).long()  # (k, t_max, steps, n_neg)

    # projected contexts per step: (k, t_max, steps, dim)
    proj = torch.einsum("mdr,ktr->ktmd", predictor.proj, aggregate[:, :t_max])

    pos_idx = (torch.arange(t_max).unsqueeze(1) + torch.arange(1, steps + 1)).unsqueeze(0)
    pos = codes.gather(1, pos_idx.reshape(1, -1, 1).expand(k, -1, dim))
    pos = pos.view(k, t_max, steps, dim)
    pos_score = (pos * proj).sum(-1)  # (k, t_max, steps)

    flat_neg = neg_idx.reshape(k, -1, 1).expand(-1, -1, dim)
    negs = codes.gather(1, flat_neg).view(k, t_max, steps, n_neg, dim)
    neg_score = torch.einsum("ktmnd,ktmd->ktmn", negs, proj)

    logits = torch.cat([pos_score.unsqueeze(-1), neg_score], dim=-1)
    return -torch.log_softmax(logits, dim=-1)[..., 0].mean()
