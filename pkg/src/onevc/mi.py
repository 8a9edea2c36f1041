"""Mutual-information upper-bound estimation between representations.

Each pair (u, v) gets a Gaussian conditional model q(u | v) with learned
mean and diagonal variance.  The upper-bound estimate is the difference
between matched conditional log-likelihoods (utterance k's u under
utterance k's condition) and all-pairs cross log-likelihoods (utterance
l's u under utterance k's condition), averaged.  With the published
prefactors every estimator reduces to exactly

    mean_{k,t} log q(u_{k,t} | v_k)  -  mean_{k,l,t} log q(u_{l,t} | v_k)

which the brute-force oracles in the test suite confirm term by term.
Estimates may be negative in finite samples; no flooring is applied.

Three pairs are tracked:

* ``content_speaker``: quantized content frames conditioned on the
  utterance's speaker embedding;
* ``pitch_speaker``: per-frame pitch values conditioned on the speaker
  embedding;
* ``content_pitch``: content frames conditioned on the time-aligned
  2:1-downsampled pitch value.
"""

from __future__ import annotations

import math
import warnings

import torch
from torch import nn

PAIRS = ("content_speaker", "pitch_speaker", "content_pitch")

LOG_TWO_PI = math.log(2.0 * math.pi)


class GaussianConditional(nn.Module):
    """q(u | v) = N(u; mu(v), diag sigma^2(v)).

    Mean and log-variance heads are separate fully connected networks with
    ``n_hidden`` hidden layers of ``hidden`` units.  The log-variance is
    clamped so densities stay finite for any finite input.
    """

    def __init__(self, cond_dim: int, out_dim: int, hidden: int = 256,
                 n_hidden: int = 4, logvar_clamp: float = 10.0):
        super().__init__()
        self.cond_dim = cond_dim
        self.out_dim = out_dim
        self.logvar_clamp = logvar_clamp

        def head():
            layers: list[nn.Module] = [nn.Linear(cond_dim, hidden), nn.ReLU()]
            for _ in range(n_hidden - 1):
                layers += [nn.Linear(hidden, hidden), nn.ReLU()]
            layers.append(nn.Linear(hidden, out_dim))
            return nn.Sequential(*layers)

        self.mean_net = head()
        self.logvar_net = head()

    def condition(self, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Mean and clamped log-variance of q(. | v)."""
        mean = self.mean_net(v)
        logvar = self.logvar_net(v).clamp(-self.logvar_clamp, self.logvar_clamp)
        return mean, logvar

    def log_prob(self, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        """Per-sample log-density of u under q(. | v); u and v are paired."""
        if u.shape[-1] != self.out_dim or v.shape[-1] != self.cond_dim:
            raise ValueError(
                f"expected dims (u={self.out_dim}, v={self.cond_dim}), "
                f"got (u={u.shape[-1]}, v={v.shape[-1]})"
            )
        mean, logvar = self.condition(v)
        return gaussian_log_density(u, mean, logvar)


def gaussian_log_density(u: torch.Tensor, mean: torch.Tensor,
                         logvar: torch.Tensor) -> torch.Tensor:
    """Diagonal-Gaussian log-density summed over the last axis."""
    return (-0.5 * (LOG_TWO_PI + logvar) - (u - mean) ** 2 / (2.0 * logvar.exp())).sum(-1)


def downsample_pitch(pitch: torch.Tensor) -> torch.Tensor:
    """Average adjacent pitch frames: (K, T) -> (K, T/2); T must be even."""
    if pitch.shape[-1] % 2 != 0:
        raise ValueError(f"pitch length {pitch.shape[-1]} must be even")
    return pitch.reshape(*pitch.shape[:-1], pitch.shape[-1] // 2, 2).mean(-1)


def _club_shared_condition(u: torch.Tensor, mean: torch.Tensor,
                           logvar: torch.Tensor) -> torch.Tensor:
    """Matched-minus-cross estimate when the condition is per utterance.

    u: (K, T, D) frames; mean/logvar: (K, D) from each utterance's v.
    """
    k = u.shape[0]
    if k < 2:
        warnings.warn("MI estimate needs >= 2 utterances; returning 0")
    inv = torch.exp(-logvar)                      # (K, D)
    mu_inv = mean * inv
    const = (LOG_TWO_PI + logvar).sum(-1)         # (K,)
    quad = (
        torch.einsum("ltd,kd->klt", u**2, inv)
        - 2.0 * torch.einsum("ltd,kd->klt", u, mu_inv)
        + (mean**2 * inv).sum(-1)[:, None, None]
    )
    logq = -0.5 * (const[:, None, None] + quad)   # [k, l, t] = log q(u_{l,t} | v_k)
    idx = torch.arange(k)
    return logq[idx, idx].mean() - logq.mean()


def _club_framewise_condition(u: torch.Tensor, mean: torch.Tensor,
                              logvar: torch.Tensor) -> torch.Tensor:
    """Matched-minus-cross estimate when the condition varies per frame.

    u: (K, T, D); mean/logvar: (K, T, D) from each utterance's per-frame v.
    Cross terms pair frame t of utterance l with utterance k's condition
    at the same t.
    """
    k = u.shape[0]
    if k < 2:
        warnings.warn("MI estimate needs >= 2 utterances; returning 0")
    inv = torch.exp(-logvar)
    mu_inv = mean * inv
    const = (LOG_TWO_PI + logvar).sum(-1)         # (K, T)
    quad = (
        torch.einsum("ltd,ktd->klt", u**2, inv)
        - 2.0 * torch.einsum("ltd,ktd->klt", u, mu_inv)
        + (mean**2 * inv).sum(-1)[:, None, :]
    )
    logq = -0.5 * (const[:, None, :] + quad)
    idx = torch.arange(k)
    return logq[idx, idx].mean() - logq.mean()


def content_speaker_mi(codes: torch.Tensor, speaker: torch.Tensor,
                       q: GaussianConditional) -> torch.Tensor:
    """Upper-bound MI estimate between content frames and speaker embeddings."""
    mean, logvar = q.condition(speaker)
    return _club_shared_condition(codes, mean, logvar)


def pitch_speaker_mi(pitch: torch.Tensor, speaker: torch.Tensor,
                     q: GaussianConditional) -> torch.Tensor:
    """Upper-bound MI estimate between scalar pitch frames and speaker embeddings."""
    mean, logvar = q.condition(speaker)
    return _club_shared_condition(pitch.unsqueeze(-1), mean, logvar)


def content_pitch_mi(codes: torch.Tensor, pitch_ds: torch.Tensor,
                     q: GaussianConditional) -> torch.Tensor:
    """Upper-bound MI estimate between content frames and downsampled pitch.

    ``pitch_ds`` is the (K, T/2) output of downsample_pitch, aligned
    one-to-one with content frames.
    """
    mean, logvar = q.condition(pitch_ds.unsqueeze(-1))
    return _club_framewise_condition(codes, mean, logvar)


def total_mi(content_speaker: torch.Tensor, content_pitch: torch.Tensor,
             pitch_speaker: torch.Tensor) -> torch.Tensor:
    """Sum of the three pairwise estimates; the regularizer weight is applied
    by the caller."""
    return content_speaker + content_pitch + pitch_speaker


def log_likelihood(u: torch.Tensor, v: torch.Tensor, q: GaussianConditional) -> torch.Tensor:
    """Mean matched-pair log-likelihood, the quantity the approximators ascend."""
    return q.log_prob(u, v).mean()


def approximator_pairs(codes: torch.Tensor, speaker: torch.Tensor,
                       pitch: torch.Tensor) -> dict[str, tuple[torch.Tensor, torch.Tensor]]:
    """Matched (u, v) training pairs for the three conditionals.

    Frame-level pairs are flattened; the speaker embedding is repeated for
    each of its utterance's frames.
    """
    k, t2, d = codes.shape
    t = pitch.shape[1]
    pitch_ds = downsample_pitch(pitch)
    return {
        "content_speaker": (
            codes.reshape(k * t2, d),
            speaker.unsqueeze(1).expand(-1, t2, -1).reshape(k * t2, -1),
        ),
        "pitch_speaker": (
            pitch.reshape(k * t, 1),
            speaker.unsqueeze(1).expand(-1, t, -1).reshape(k * t, -1),
        ),
        "content_pitch": (
            codes.reshape(k * t2, d),
            pitch_ds.reshape(k * t2, 1),
        ),
    }


def build_approximators(cfg: dict) -> nn.ModuleDict:
    """One conditional per tracked pair, sized from the config."""
    m, mi_cfg = cfg["model"], cfg["mi"]
    kw = dict(hidden=mi_cfg["hidden"], n_hidden=mi_cfg["n_hidden"],
              logvar_clamp=mi_cfg["logvar_clamp"])
    return nn.ModuleDict({
        "content_speaker": GaussianConditional(m["speaker_dim"], m["content_dim"], **kw),
        "pitch_speaker": GaussianConditional(m["speaker_dim"], 1, **kw),
        "content_pitch": GaussianConditional(1, m["content_dim"], **kw),
    })


def estimate_all(codes: torch.Tensor, speaker: torch.Tensor, pitch: torch.Tensor,
                 approximators: nn.ModuleDict) -> dict[str, torch.Tensor]:
    """The three pairwise estimates on one batch of representations."""
    return {
        "content_speaker": content_speaker_mi(codes, speaker, approximators["content_speaker"]),
        "pitch_speaker": pitch_speaker_mi(pitch, speaker, approximators["pitch_speaker"]),
        "content_pitch": content_pitch_mi(codes, downsample_pitch(pitch),
                                          approximators["content_pitch"]),
    }
