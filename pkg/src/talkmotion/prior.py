"""Stage one: vector-quantized autoencoder over facial motion sequences.

The encoder maps a motion sequence to a (T', H, C) latent grid, each slot is
snapped to its nearest codebook entry, and the decoder reconstructs motions
from the quantized grid. Training uses an L1 reconstruction term plus the two
stop-gradient code-level terms, with a straight-through estimator across the
quantization step.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import Corpus, MotionSequence


class TrainingDiverged(RuntimeError):
    """Raised when a training loss turns non-finite."""


class CheckpointError(RuntimeError):
    """Checkpoint blob and sidecar disagree, or shapes do not match."""


@dataclass
class PriorConfig:
    vertex_count: int
    num_codes: int = 256        # N
    code_dim: int = 64          # C
    temporal_unit: int = 1      # P: frames per latent step
    components: int = 8         # H: latent slots per step
    beta: float = 0.25          # commitment weight
    width: int = 128
    feedforward: int = 256
    heads: int = 4
    layers: int = 2
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    dropout: float = 0.1
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        for name in ("vertex_count", "num_codes", "code_dim", "temporal_unit",
                     "components", "width", "feedforward", "heads", "layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.num_codes < 2:
            raise ValueError("num_codes must be >= 2")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not isinstance(self.learning_rate, (int, float)) or self.learning_rate <= 0:
            raise ValueError("learning_rate must be a positive number")


def instance_norm(x: torch.Tensor, gamma: torch.Tensor, beta_affine: torch.Tensor,
                  eps: float = 1e-5) -> torch.Tensor:
    """Normalize per channel over the temporal (last) axis, then affine map.

    x is (C, T) or (N, C, T); gamma/beta_affine are (C,).
    """
    mu = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    normed = (x - mu) / torch.sqrt(var + eps)
    return gamma.unsqueeze(-1) * normed + beta_affine.unsqueeze(-1)


class TemporalInstanceNorm(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta_affine = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return instance_norm(x, self.gamma, self.beta_affine, self.eps)


def quantize(latents: torch.Tensor, codebook: torch.Tensor):
    """Snap every (t, h) latent vector to its nearest codebook entry.

    Ties break to the smallest entry index. Returns (values, indices); the
    values are a differentiable codebook lookup.
    """
    if latents.shape[-1] != codebook.shape[-1]:
        raise ValueError(
            f"latent dim {latents.shape[-1]} != codebook dim {codebook.shape[-1]}")
    if codebook.shape[0] < 2:
        raise ValueError("codebook needs at least two entries")
    diff = latents.unsqueeze(-2) - codebook  # (..., N, C)
    d2 = (diff * diff).sum(dim=-1)
    indices = d2.argmin(dim=-1)
    return codebook[indices], indices


def straight_through(latents: torch.Tensor, quantized: torch.Tensor) -> torch.Tensor:
    """Forward = quantized values; backward = identity into the latents."""
    if latents.shape != quantized.shape:
        raise ValueError(f"shape mismatch {latents.shape} vs {quantized.shape}")
    return latents + (quantized - latents).detach()


def vq_loss(motions, recon, latents, quantized, beta: float):
    """Returns (total, parts); all terms are means over elements."""
    if motions.shape != recon.shape or latents.shape != quantized.shape:
        raise ValueError("shape mismatch in vq_loss")
    recon_term = (motions - recon).abs().mean()
    codebook_term = ((latents.detach() - quantized) ** 2).mean()
    commit_term = ((latents - quantized.detach()) ** 2).mean()
    total = recon_term + codebook_term + beta * commit_term
    return total, {"recon": recon_term, "codebook": codebook_term,
                   "commit": commit_term}


class _ConvBlock(nn.Module):
    """Shared body: 1-D conv (k5 s1 p2) over time with instance norm."""

    def __init__(self, width: int, pre_activation: bool):
        super().__init__()
        self.pre_activation = pre_activation
        self.conv = nn.Conv1d(width, width, kernel_size=5, stride=1, padding=2)
        self.norm = TemporalInstanceNorm(width)

    def forward(self, x):  # (T, width)
        if self.pre_activation:
            x = torch.nn.functional.leaky_relu(x, 0.2)
        x = self.conv(x.t().unsqueeze(0))
        x = torch.nn.functional.leaky_relu(x, 0.2)
        x = self.norm(x)
        return x.squeeze(0).t()


def _transformer_encoder(config: PriorConfig) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(
        d_model=config.width, nhead=config.heads,
        dim_feedforward=config.feedforward, dropout=config.dropout,
        batch_first=True)
    return nn.TransformerEncoder(layer, config.layers, enable_nested_tensor=False)


class MotionEncoder(nn.Module):
    def __init__(self, config: PriorConfig):
        super().__init__()
        in_dim = config.temporal_unit * config.vertex_count * 3
        self.lin_in = nn.Linear(in_dim, config.width)
        self.block = _ConvBlock(config.width, pre_activation=True)
        self.lin_mid = nn.Linear(config.width, config.width)
        self.transformer = _transformer_encoder(config)
        self.lin_out = nn.Linear(config.width, config.components * config.code_dim)
        self.config = config

    def forward(self, grouped):  # (T', P*V*3)
        x = self.lin_in(grouped)
        x = self.block(x)
        x = self.lin_mid(x)
        x = self.transformer(x.unsqueeze(0)).squeeze(0)
        x = self.lin_out(x)
        cfg = self.config
        return x.view(-1, cfg.components, cfg.code_dim)


class MotionDecoder(nn.Module):
    def __init__(self, config: PriorConfig):
        super().__init__()
        self.lin_in = nn.Linear(config.components * config.code_dim, config.width)
        self.block = _ConvBlock(config.width, pre_activation=False)
        self.lin_mid = nn.Linear(config.width, config.width)
        self.transformer = _transformer_encoder(config)
        out_dim = config.temporal_unit * config.vertex_count * 3
        self.lin_out = nn.Linear(config.width, out_dim)
        # Start from the identity-zero output so early training is not fighting
        # random large-scale reconstructions.
        nn.init.zeros_(self.lin_out.weight)
        nn.init.zeros_(self.lin_out.bias)
        self.config = config

    def forward(self, grid):  # (T', H, C)
        cfg = self.config
        x = grid.reshape(grid.shape[0], cfg.components * cfg.code_dim)
        x = self.lin_in(x)
        x = self.block(x)
        x = self.lin_mid(x)
        x = self.transformer(x.unsqueeze(0)).squeeze(0)
        x = self.lin_out(x)
        return x.view(-1, cfg.vertex_count, 3)  # (T'*P, V, 3)


class PriorModel(nn.Module):
    """Encoder E, codebook Z, decoder D."""

    def __init__(self, config: PriorConfig):
        super().__init__()
        self.config = config
        self.encoder = MotionEncoder(config)
        self.decoder = MotionDecoder(config)
        bound = 1.0 / config.num_codes
        self.codebook = nn.Parameter(
            torch.empty(config.num_codes, config.code_dim).uniform_(-bound, bound))

    def _group_frames(self, frames: torch.Tensor) -> torch.Tensor:
        """(T, V, 3) -> (T', P*V*3), right-padding by repeating the last frame."""
        p = self.config.temporal_unit
        t = frames.shape[0]
        if t % p:
            pad = frames[-1:].expand(p - t % p, -1, -1)
            frames = torch.cat([frames, pad], dim=0)
        return frames.reshape(frames.shape[0] // p, -1)

    def _as_tensor(self, motions) -> torch.Tensor:
        if isinstance(motions, MotionSequence):
            if motions.vertex_count != self.config.vertex_count:
                raise ValueError(
                    f"motion V={motions.vertex_count} does not match "
                    f"model V={self.config.vertex_count}")
            return torch.from_numpy(np.asarray(motions.frames, dtype=np.float32))
        motions = torch.as_tensor(motions, dtype=torch.float32)
        if motions.ndim != 3 or motions.shape[1] != self.config.vertex_count:
            raise ValueError(f"expected (T, {self.config.vertex_count}, 3) motions")
        return motions

    def encode(self, motions) -> torch.Tensor:
        frames = self._as_tensor(motions)
        if frames.shape[0] < 1:
            raise ValueError("empty motion sequence")
        return self.encoder(self._group_frames(frames))

    def decode(self, grid: torch.Tensor, num_frames: int | None = None) -> torch.Tensor:
        cfg = self.config
        if grid.ndim != 3 or grid.shape[1:] != (cfg.components, cfg.code_dim):
            raise ValueError(
                f"expected (T', {cfg.components}, {cfg.code_dim}) grid, got {tuple(grid.shape)}")
        out = self.decoder(grid)
        if num_frames is not None:
            out = out[:num_frames]
        return out

    def reconstruct(self, motions):
        """decode(straight_through(encode(M))) plus the pieces for the loss."""
        frames = self._as_tensor(motions)
        latents = self.encode(frames)
        values, indices = quantize(latents, self.codebook)
        recon = self.decode(straight_through(latents, values), frames.shape[0])
        return recon, latents, values, indices


def train_prior(corpus: Corpus, config: PriorConfig, log=None):
    """Train on the corpus train split; returns (model, per-epoch loss log)."""
    items = corpus.split("train")
    if not items:
        raise ValueError("corpus has no train items")
    if corpus.rig.vertex_count != config.vertex_count:
        raise ValueError("config vertex_count does not match corpus rig")
    torch.manual_seed(config.seed)
    model = PriorModel(config)
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                            betas=(0.9, 0.999), eps=1e-8,
                            weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=config.epochs * len(items))
    gen = torch.Generator().manual_seed(config.seed)
    history = []
    model.train()
    for epoch in range(config.epochs):
        order = torch.randperm(len(items), generator=gen).tolist()
        sums = {"total": 0.0, "recon": 0.0, "codebook": 0.0, "commit": 0.0}
        for i in order:
            motions = torch.from_numpy(items[i].motion.frames.astype(np.float32))
            recon, latents, values, _ = model.reconstruct(motions)
            total, parts = vq_loss(motions, recon, latents, values, config.beta)
            if not torch.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, item {i}: {total.item()}")
            opt.zero_grad()
            total.backward()
            opt.step()
            sched.step()
            sums["total"] += total.item()
            for k, v in parts.items():
                sums[k] += v.item()
        record = {"epoch": epoch, **{k: v / len(items) for k, v in sums.items()}}
        history.append(record)
        if log is not None:
            log(record)
    model.eval()
    return model, history


def codebook_stats(indices, num_codes: int):
    """Usage histogram over {0..N-1} and exp-entropy perplexity."""
    idx = np.asarray(indices).ravel()
    if idx.size == 0:
        raise ValueError("empty index array")
    hist = np.bincount(idx, minlength=num_codes).astype(np.float64)
    probs = hist / hist.sum()
    nz = probs[probs > 0]
    perplexity = float(np.exp(-(nz * np.log(nz)).sum()))
    return hist, perplexity


def reconstruction_error(model: PriorModel, items) -> float:
    """Mean per-element L1 reconstruction error over the given items."""
    was_training = model.training
    model.eval()
    with torch.no_grad():
        errs = []
        for it in items:
            motions = torch.from_numpy(it.motion.frames.astype(np.float32))
            recon, _, _, _ = model.reconstruct(motions)
            errs.append((motions - recon).abs().mean().item())
    if was_training:
        model.train()
    return float(np.mean(errs))


# ---------------------------------------------------------------------------
# Checkpoints


def frozen_prior_hash(model: PriorModel) -> str:
    """SHA-256 over codebook + decoder parameter bytes, in name order."""
    h = hashlib.sha256()
    h.update(model.codebook.detach().numpy().tobytes())
    for name, p in sorted(model.decoder.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


def save_prior(model: PriorModel, path, history=None) -> str:
    path = Path(path)
    torch.save(model.state_dict(), path)
    blob_hash = hashlib.sha256(path.read_bytes()).hexdigest()
    sidecar = {
        "kind": "prior",
        "config": asdict(model.config),
        "epochs_trained": len(history) if history else None,
        "final_losses": history[-1] if history else None,
        "blob_sha256": blob_hash,
        "frozen_hash": frozen_prior_hash(model),
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))
    return blob_hash


def load_prior(path) -> PriorModel:
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not sidecar_path.exists():
        raise CheckpointError(f"missing sidecar {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text())
    if sidecar.get("kind") != "prior":
        raise CheckpointError("sidecar is not a prior checkpoint")
    blob = path.read_bytes()
    if hashlib.sha256(blob).hexdigest() != sidecar["blob_sha256"]:
        raise CheckpointError("checkpoint blob does not match sidecar hash")
    config = PriorConfig(**sidecar["config"])
    model = PriorModel(config)
    try:
        model.load_state_dict(torch.load(path, weights_only=True), strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"state does not match config: {e}") from e
    return model
