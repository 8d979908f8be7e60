"""Raw waveform -> contextualized, frame-aligned speech representations.

A seven-layer temporal convolution stack (strides 5,2,2,2,2,2,2; 320 samples
per feature step at 16 kHz) feeds a small full-context transformer encoder.
Features are linearly resampled to n steps per visual frame before the
transformer. Trained from random initialization jointly with stage two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .data import SAMPLE_RATE, AudioClip

DEFAULT_CONV_SPECS = ((10, 5), (3, 2), (3, 2), (3, 2), (3, 2), (2, 2), (2, 2))


@dataclass
class SpeechEncoderConfig:
    conv_specs: tuple = DEFAULT_CONV_SPECS  # (kernel, stride) pairs
    channels: int = 64
    width: int = 96
    feedforward: int = 192
    heads: int = 4
    layers: int = 2
    out_dim: int = 128
    frames_per_visual: int = 1  # n
    dropout: float = 0.1

    def __post_init__(self):
        if self.frames_per_visual not in (1, 2):
            raise ValueError("frames_per_visual must be 1 or 2")
        for name in ("channels", "width", "feedforward", "heads", "layers", "out_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


def conv_output_length(num_samples: int, conv_specs=DEFAULT_CONV_SPECS) -> int:
    """Closed-form feature length for the conv stack (no padding)."""
    length = num_samples
    for kernel, stride in conv_specs:
        if length < kernel:
            return 0
        length = (length - kernel) // stride + 1
    return length


def receptive_field(conv_specs=DEFAULT_CONV_SPECS) -> int:
    """Minimum clip length producing one feature step."""
    span = 1
    for kernel, stride in reversed(conv_specs):
        span = (span - 1) * stride + kernel
    return span


def align_features(features: torch.Tensor, num_frames: int,
                   frames_per_visual: int) -> torch.Tensor:
    """Linearly resample (L, C) features onto n*T positions spanning [0, L-1]."""
    if features.ndim != 2:
        raise ValueError("features must be (L, C)")
    length = features.shape[0]
    if length < 2:
        raise ValueError("need at least two feature steps to interpolate")
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    target = frames_per_visual * num_frames
    pos = torch.linspace(0.0, float(length - 1), target, dtype=features.dtype)
    lo = pos.floor().long().clamp(max=length - 1)
    hi = (lo + 1).clamp(max=length - 1)
    frac = (pos - lo.to(features.dtype)).unsqueeze(1)
    return features[lo] * (1 - frac) + features[hi] * frac


class SinusoidalPositions(nn.Module):
    def __init__(self, dim: int, max_len: int = 8192):
        super().__init__()
        pos = torch.arange(max_len).unsqueeze(1)
        div = torch.exp(torch.arange(0, dim, 2) * (-math.log(10000.0) / dim))
        table = torch.zeros(max_len, dim)
        table[:, 0::2] = torch.sin(pos * div)
        table[:, 1::2] = torch.cos(pos * div)
        self.register_buffer("table", table, persistent=False)

    def forward(self, x):  # (T, dim)
        return x + self.table[: x.shape[0]]


class SpeechEncoder(nn.Module):
    def __init__(self, config: SpeechEncoderConfig | None = None):
        super().__init__()
        self.config = config or SpeechEncoderConfig()
        cfg = self.config
        convs = []
        in_ch = 1
        for kernel, stride in cfg.conv_specs:
            convs.append(nn.Conv1d(in_ch, cfg.channels, kernel, stride))
            convs.append(nn.GroupNorm(cfg.channels, cfg.channels))
            convs.append(nn.GELU())
            in_ch = cfg.channels
        self.tcn = nn.Sequential(*convs)
        self.norm = nn.LayerNorm(cfg.channels)
        self.proj = nn.Linear(cfg.channels, cfg.width)
        self.dropout = nn.Dropout(cfg.dropout)
        self.positions = SinusoidalPositions(cfg.width)
        layer = nn.TransformerEncoderLayer(
            d_model=cfg.width, nhead=cfg.heads, dim_feedforward=cfg.feedforward,
            dropout=cfg.dropout, batch_first=True)
        self.transformer = nn.TransformerEncoder(layer, cfg.layers,
                                                 enable_nested_tensor=False)
        self.lin_out = nn.Linear(cfg.width, cfg.out_dim)

    def _waveform(self, clip) -> torch.Tensor:
        if isinstance(clip, AudioClip):
            if clip.sample_rate != SAMPLE_RATE:
                raise ValueError(f"expected {SAMPLE_RATE} Hz audio")
            return torch.from_numpy(clip.samples)
        return torch.as_tensor(clip, dtype=torch.float32)

    def extract_audio_features(self, clip) -> torch.Tensor:
        """TCN features, (L, channels); L follows conv_output_length."""
        wav = self._waveform(clip)
        if wav.ndim != 1:
            raise ValueError("waveform must be 1-D")
        # Normalization and interpolation both need at least two feature
        # steps, i.e. one stride past the receptive field.
        if conv_output_length(wav.shape[0], self.config.conv_specs) < 2:
            raise ValueError(
                f"clip of {wav.shape[0]} samples is shorter than the "
                f"receptive field ({receptive_field(self.config.conv_specs)}) "
                f"plus one stride")
        out = self.tcn(wav.view(1, 1, -1))
        return out.squeeze(0).t()  # (L, channels)

    def encode_speech(self, aligned: torch.Tensor) -> torch.Tensor:
        """Contextualize aligned (n*T, channels) features into (n*T, out_dim)."""
        if aligned.shape[-1] != self.config.channels:
            raise ValueError(
                f"expected {self.config.channels} channels, got {aligned.shape[-1]}")
        x = self.norm(aligned)
        x = self.dropout(self.proj(x))
        x = self.positions(x)
        x = self.transformer(x.unsqueeze(0)).squeeze(0)
        return self.lin_out(x)

    def forward(self, clip, num_frames: int) -> torch.Tensor:
        feats = self.extract_audio_features(clip)
        aligned = align_features(feats, num_frames, self.config.frames_per_visual)
        return self.encode_speech(aligned)
