"""Learnable components: content encoder, quantizer, aggregator, speaker
encoder, decoder and postnet.

All modules are batch-first.  Mel input is (B, T, 80) with even T; the
content path halves the temporal resolution, the decoder restores it.
The codebook is a buffer, not a parameter: it is updated by exponential
moving averages of assigned encoder outputs, never by gradients.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .objectives import ContrastivePredictor


class _CodeLookup(torch.autograd.Function):
    """Codebook gather with a straight-through gradient.

    Forward returns codebook rows bitwise (no arithmetic on the input),
    backward hands the incoming gradient to the pre-quantization vectors
    unchanged.  The codebook itself receives no gradient.
    """

    @staticmethod
    def forward(ctx, dense, codebook, indices):
        return codebook.index_select(0, indices.reshape(-1)).view(*indices.shape, -1)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output, None, None


class VectorQuantizer(nn.Module):
    """Nearest-neighbor quantizer with EMA codebook updates.

    Ties in the distance argmin break toward the lowest code index.
    ``usage`` accumulates per-code assignment counts between calls to
    ``reset_usage`` so dead codes can be reported per epoch.
    """

    def __init__(self, n_codes: int, dim: int, decay: float = 0.999, eps: float = 1e-5):
        super().__init__()
        self.n_codes = n_codes
        self.dim = dim
        self.decay = decay
        self.eps = eps
        init = (torch.rand(n_codes, dim) * 2.0 - 1.0) / n_codes
        self.register_buffer("codebook", init)
        self.register_buffer("ema_counts", torch.ones(n_codes))
        self.register_buffer("ema_sums", init.clone())
        self.register_buffer("usage", torch.zeros(n_codes))

    @torch.no_grad()
    def assign(self, dense: torch.Tensor) -> torch.Tensor:
        """Indices of the nearest codebook row for each input row."""
        flat = dense.detach().reshape(-1, self.dim)
        if not torch.isfinite(flat).all():
            raise ValueError("non-finite content vectors cannot be quantized")
        indices = torch.empty(flat.shape[0], dtype=torch.long, device=flat.device)
        arange = torch.arange(self.n_codes, device=flat.device)
        big = torch.tensor(self.n_codes, dtype=torch.long, device=flat.device)
        for start in range(0, flat.shape[0], 1024):
            chunk = flat[start : start + 1024]
            d = ((chunk[:, None, :] - self.codebook[None, :, :]) ** 2).sum(-1)
            lowest = torch.where(d == d.min(dim=1, keepdim=True).values, arange, big)
            indices[start : start + 1024] = lowest.min(dim=1).values
        return indices.view(dense.shape[:-1])

    def forward(self, dense: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Quantize (..., dim) vectors; returns (codes, indices).

        Code rows are bitwise members of the codebook; gradients pass
        straight through to ``dense``.
        """
        indices = self.assign(dense)
        codes = _CodeLookup.apply(dense, self.codebook, indices)
        return codes, indices

    @torch.no_grad()
    def ema_update(self, dense: torch.Tensor, indices: torch.Tensor) -> None:
        """Move codebook rows toward the mean of their assigned vectors."""
        flat = dense.detach().reshape(-1, self.dim)
        idx = indices.reshape(-1)
        one_hot = F.one_hot(idx, self.n_codes).to(flat.dtype)
        counts = one_hot.sum(0)
        sums = one_hot.t() @ flat
        self.ema_counts.mul_(self.decay).add_(counts, alpha=1.0 - self.decay)
        self.ema_sums.mul_(self.decay).add_(sums, alpha=1.0 - self.decay)
        total = self.ema_counts.sum()
        smoothed = (self.ema_counts + self.eps) / (total + self.n_codes * self.eps) * total
        self.codebook.copy_(self.ema_sums / smoothed.unsqueeze(1))
        self.usage.add_(counts)

    def reset_usage(self) -> int:
        """Return the number of codes unused since the last reset, then clear."""
        dead = int((self.usage == 0).sum().item())
        self.usage.zero_()
        return dead


class ContentEncoder(nn.Module):
    """Strided conv (time / 2) followed by four LayerNorm+Linear+ReLU blocks."""

    def __init__(self, mel_dim: int = 80, width: int = 512, content_dim: int = 64):
        super().__init__()
        self.conv = nn.Conv1d(mel_dim, width, kernel_size=4, stride=2, padding=1)
        self.blocks = nn.ModuleList(
            nn.Sequential(nn.LayerNorm(width), nn.Linear(width, width), nn.ReLU())
            for _ in range(4)
        )
        self.proj = nn.Linear(width, content_dim)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        if mel.dim() != 3:
            raise ValueError(f"expected (B, T, mel) input, got {tuple(mel.shape)}")
        t = mel.shape[1]
        if t < 2 or t % 2 != 0:
            raise ValueError(f"content encoder requires even T >= 2, got T={t}")
        x = self.conv(mel.transpose(1, 2)).transpose(1, 2)  # (B, T/2, width)
        for block in self.blocks:
            x = block(x)
        return self.proj(x)


class ContextAggregator(nn.Module):
    """Causal recurrent summary of the quantized content sequence."""

    def __init__(self, content_dim: int = 64, hidden: int = 256):
        super().__init__()
        self.rnn = nn.GRU(content_dim, hidden, batch_first=True)

    def forward(self, codes: torch.Tensor) -> torch.Tensor:
        out, _ = self.rnn(codes)
        return out


def _same_pad(x: torch.Tensor, kernel: int) -> torch.Tensor:
    # asymmetric padding keeps even kernels length-preserving
    left = kernel // 2
    return F.pad(x, (left, kernel - 1 - left))


class SpeakerEncoder(nn.Module):
    """Utterance-level embedding: conv bank, residual convs, mean pool, MLP.

    Output shape is independent of T (temporal average pooling), so a
    single reference utterance of any length produces one embedding.
    """

    def __init__(self, mel_dim: int = 80, width: int = 512, embed_dim: int = 256,
                 bank_kernels: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8)):
        super().__init__()
        self.bank_kernels = bank_kernels
        self.bank = nn.ModuleList(nn.Conv1d(mel_dim, width, k) for k in bank_kernels)
        self.bank_proj = nn.Conv1d(width * len(bank_kernels), width, 1)
        self.convs = nn.ModuleList(
            nn.Sequential(nn.Conv1d(width, width, 3, padding=1), nn.GroupNorm(1, width), nn.ReLU())
            for _ in range(12)
        )
        self.linears = nn.Sequential(
            nn.Linear(width, width), nn.ReLU(),
            nn.Linear(width, width), nn.ReLU(),
            nn.Linear(width, width), nn.ReLU(),
            nn.Linear(width, embed_dim),
        )

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        if mel.dim() != 3:
            raise ValueError(f"expected (B, T, mel) input, got {tuple(mel.shape)}")
        x = mel.transpose(1, 2)  # (B, mel, T)
        banked = torch.cat(
            [conv(_same_pad(x, k)) for conv, k in zip(self.bank, self.bank_kernels)], dim=1
        )
        h = F.relu(self.bank_proj(banked))
        for i, conv in enumerate(self.convs):
            out = conv(h)
            h = h + out if i % 2 == 1 else out  # residual every second layer
        pooled = h.mean(dim=2)  # average pooling over time
        return self.linears(pooled)


class Decoder(nn.Module):
    """Map aligned (content, speaker, pitch) streams back to mel frames.

    Content codes are upsampled x2 by linear interpolation, the speaker
    embedding is repeated at every frame, pitch contributes one scalar per
    frame; the concatenation feeds an LSTM / conv / LSTM stack.
    """

    def __init__(self, content_dim: int = 64, speaker_dim: int = 256,
                 mel_dim: int = 80, width: int = 1024):
        super().__init__()
        in_dim = content_dim + speaker_dim + 1
        self.lstm1 = nn.LSTM(in_dim, width, batch_first=True)
        self.convs = nn.ModuleList(
            nn.Sequential(nn.Conv1d(width, width, 5, padding=2), nn.GroupNorm(1, width), nn.ReLU())
            for _ in range(3)
        )
        self.lstm2 = nn.LSTM(width, width, num_layers=2, batch_first=True)
        self.proj = nn.Linear(width, mel_dim)

    def forward(self, codes: torch.Tensor, speaker: torch.Tensor,
                pitch: torch.Tensor) -> torch.Tensor:
        if pitch.shape[1] != 2 * codes.shape[1]:
            raise ValueError(
                f"pitch length {pitch.shape[1]} must be twice the code length {codes.shape[1]}"
            )
        up = F.interpolate(codes.transpose(1, 2), scale_factor=2.0, mode="linear",
                           align_corners=False).transpose(1, 2)
        spk = speaker.unsqueeze(1).expand(-1, up.shape[1], -1)
        x = torch.cat([up, spk, pitch.unsqueeze(-1)], dim=-1)
        x, _ = self.lstm1(x)
        x = x.transpose(1, 2)
        for conv in self.convs:
            x = conv(x)
        x = x.transpose(1, 2)
        x, _ = self.lstm2(x)
        return self.proj(x)


class Postnet(nn.Module):
    """Five-layer convolutional residual refinement of the predicted mel."""

    def __init__(self, mel_dim: int = 80, width: int = 512):
        super().__init__()
        self.layers = nn.ModuleList()
        dims = [mel_dim, width, width, width, width, mel_dim]
        for i in range(5):
            block: list[nn.Module] = [nn.Conv1d(dims[i], dims[i + 1], 5, padding=2)]
            if i < 4:
                block += [nn.GroupNorm(1, dims[i + 1]), nn.Tanh()]
            self.layers.append(nn.Sequential(*block))

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        x = mel.transpose(1, 2)
        for layer in self.layers:
            x = layer(x)
        return x.transpose(1, 2)


class VoiceConversionModel(nn.Module):
    """The trainable system, assembled from a config dict.

    The decoder consumes quantized content codes; the aggregator output
    exists only to drive the future-prediction contrastive objective.
    """

    def __init__(self, cfg: dict):
        super().__init__()
        m = cfg["model"]
        self.cfg = cfg
        self.content_encoder = ContentEncoder(m["mel_dim"], m["width"], m["content_dim"])
        self.quantizer = VectorQuantizer(m["codebook_size"], m["content_dim"],
                                         m["ema_decay"], m["ema_eps"])
        self.aggregator = ContextAggregator(m["content_dim"], m["aggregator_dim"])
        self.speaker_encoder = SpeakerEncoder(m["mel_dim"], m["speaker_width"], m["speaker_dim"])
        self.decoder = Decoder(m["content_dim"], m["speaker_dim"], m["mel_dim"],
                               m["decoder_width"])
        self.postnet = Postnet(m["mel_dim"], m["postnet_width"])
        self.cpc = ContrastivePredictor(
            m["content_dim"], m["aggregator_dim"],
            cfg["cpc"]["prediction_steps"], cfg["cpc"]["n_negatives"],
        )

    def encode_content(self, mel: torch.Tensor) -> torch.Tensor:
        return self.content_encoder(mel)

    def encode_speaker(self, mel: torch.Tensor) -> torch.Tensor:
        return self.speaker_encoder(mel)

    def decode(self, codes: torch.Tensor, speaker: torch.Tensor,
               pitch: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        pre = self.decoder(codes, speaker, pitch)
        post = pre + self.postnet(pre)
        return pre, post

    def forward(self, mel: torch.Tensor, pitch: torch.Tensor) -> dict:
        """Full training-time pass; returns every intermediate needed by losses."""
        dense = self.encode_content(mel)
        codes, indices = self.quantizer(dense)
        agg = self.aggregator(codes)
        speaker = self.encode_speaker(mel)
        pre, post = self.decode(codes, speaker, pitch)
        return {
            "dense": dense, "codes": codes, "indices": indices,
            "aggregate": agg, "speaker": speaker, "pre": pre, "post": post,
        }


def parameter_digest(module: nn.Module) -> str:
    """Hash of all parameters and buffers; used for phase-isolation checks."""
    import hashlib

    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def state_tensors(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    """Flatten a module's state dict into named float32 numpy arrays."""
    out = {}
    for name, tensor in module.state_dict().items():
        out[prefix + name] = tensor.detach().cpu().numpy().astype("<f4")
    return out


def load_state_tensors(module: nn.Module, tensors: dict[str, np.ndarray],
                       prefix: str = "") -> None:
    state = {}
    for name, ref in module.state_dict().items():
        arr = tensors[prefix + name]
        state[name] = torch.from_numpy(np.asarray(arr).copy()).to(ref.dtype).view(ref.shape)
    module.load_state_dict(state)
