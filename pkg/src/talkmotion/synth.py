"""Stage two: autoregressive speech-to-motion synthesis over the frozen prior.

Past motions plus an L1-normalized style embedding feed a causally masked
transformer decoder that cross-attends to the full speech representation.
Predicted features are quantized against the frozen codebook and decoded by
the frozen stage-one decoder. A token-classification variant predicts code
indices directly under a cross-entropy loss.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import AudioClip, Corpus, FaceRig, MotionSequence, animate_template, samples_per_frame
from .prior import (CheckpointError, PriorModel, TrainingDiverged,
                    frozen_prior_hash, quantize, straight_through)
from .speech import SinusoidalPositions, SpeechEncoder, SpeechEncoderConfig

MODES = ("regression", "token")


@dataclass
class SynthConfig:
    num_styles: int             # M; one style basis vector per training speaker
    width: int = 128
    feedforward: int = 256
    heads: int = 4
    layers: int = 2
    dropout: float = 0.1
    past_dropout: float = 0.5
    learning_rate: float = 1e-3
    epochs: int = 50
    seed: int = 0
    mode: str = "regression"
    reg_weight: float = 1.0
    motion_weight: float = 1.0
    speech: SpeechEncoderConfig = field(default_factory=SpeechEncoderConfig)

    def __post_init__(self):
        if self.num_styles < 1:
            raise ValueError("num_styles must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if isinstance(self.speech, dict):
            self.speech = SpeechEncoderConfig(**self.speech)
        if self.speech.out_dim != self.width:
            raise ValueError("speech encoder out_dim must equal decoder width")


def _as_style(weights, num_styles: int) -> torch.Tensor:
    s = torch.as_tensor(np.asarray(weights, dtype=np.float32))
    if s.shape != (num_styles,):
        raise ValueError(f"style vector must have shape ({num_styles},)")
    if (s < 0).any():
        raise ValueError("style weights must be non-negative")
    return s


def unit_style(num_styles: int, index: int) -> np.ndarray:
    s = np.zeros(num_styles, dtype=np.float32)
    s[index] = 1.0
    return s


def interpolate_style(num_styles: int, i: int, j: int, omega: float) -> np.ndarray:
    """Convex combination omega*e_i + (1-omega)*e_j of two unit styles."""
    if not 0.0 <= omega <= 1.0:
        raise ValueError("omega must lie in [0, 1]")
    s = np.zeros(num_styles, dtype=np.float32)
    s[i] += omega
    s[j] += 1.0 - omega
    return s


def synth_loss(latents, quantized, pred_motions, gt_motions,
               reg_weight: float = 1.0, motion_weight: float = 1.0):
    """Feature-regularity term + motion term (means over elements)."""
    if latents.shape != quantized.shape or pred_motions.shape != gt_motions.shape:
        raise ValueError("shape mismatch in synth_loss")
    reg = ((latents - quantized.detach()) ** 2).mean()
    motion = ((pred_motions - gt_motions) ** 2).mean()
    total = reg_weight * reg + motion_weight * motion
    return total, {"reg": reg, "motion": motion}


def ce_token_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean categorical cross-entropy over all (t, h) code positions."""
    if logits.ndim != 3:
        raise ValueError("logits must be (T', H, N)")
    n = logits.shape[-1]
    if targets.shape != logits.shape[:2]:
        raise ValueError("targets must be (T', H)")
    if (targets < 0).any() or (targets >= n).any():
        raise ValueError(f"target indices must lie in [0, {n})")
    return F.cross_entropy(logits.reshape(-1, n), targets.reshape(-1))


class SynthModel(nn.Module):
    """Speech encoder + style-conditioned causal cross-modal decoder."""

    def __init__(self, prior: PriorModel, config: SynthConfig):
        super().__init__()
        if prior.config.temporal_unit != 1:
            raise ValueError("stage two requires a prior with temporal_unit == 1")
        self.config = config
        self.prior = prior
        for p in self.prior.parameters():
            p.requires_grad_(False)

        cfg = config
        self.speech = SpeechEncoder(cfg.speech)
        v3 = prior.config.vertex_count * 3
        self.past_proj = nn.Linear(v3, cfg.width)
        self.start_embedding = nn.Parameter(torch.zeros(cfg.width))
        nn.init.normal_(self.start_embedding, std=0.02)
        self.style_basis = nn.Parameter(torch.randn(cfg.width, cfg.num_styles) * 0.02)
        self.positions = SinusoidalPositions(cfg.width)
        layer = nn.TransformerDecoderLayer(
            d_model=cfg.width, nhead=cfg.heads, dim_feedforward=cfg.feedforward,
            dropout=cfg.dropout, batch_first=True, norm_first=True)
        self.decoder = nn.TransformerDecoder(layer, cfg.layers)
        # Both attention operands carry the same additive sinusoidal positions.
        # Starting the cross-attention query/key maps at identity makes the
        # initial attention pattern follow position similarity (peaked on the
        # diagonal), which the tiny corpus cannot discover from scratch.
        eye = torch.eye(cfg.width)
        for lay in self.decoder.layers:
            with torch.no_grad():
                lay.multihead_attn.in_proj_weight[:cfg.width] = eye
                lay.multihead_attn.in_proj_weight[cfg.width:2 * cfg.width] = eye
        h, c, n = prior.config.components, prior.config.code_dim, prior.config.num_codes
        out = h * (n if cfg.mode == "token" else c)
        self.head = nn.Linear(cfg.width, out)

    # -- embedding -----------------------------------------------------------

    def style_term(self, style) -> torch.Tensor:
        s = _as_style(style, self.config.num_styles)
        l1 = s.sum()
        if l1 == 0:
            return torch.zeros(self.config.width)
        return self.style_basis @ (s / l1)

    def embed_past(self, past_motions, style) -> torch.Tensor:
        """Decoder inputs for positions 1..t: start embedding followed by the
        projected past frames, each shifted by the style term."""
        term = self.style_term(style)
        rows = [self.start_embedding.unsqueeze(0)]
        if past_motions is not None and len(past_motions) > 0:
            past = torch.as_tensor(np.asarray(past_motions, dtype=np.float32))
            if past.ndim != 3 or past.shape[1] != self.prior.config.vertex_count:
                raise ValueError("past motions must be (k, V, 3)")
            projected = self.past_proj(past.reshape(past.shape[0], -1))
            if self.training and self.config.past_dropout > 0:
                # Blank out contiguous spans of history rows. Motion is smooth
                # enough that isolated dropped rows can be interpolated from
                # their neighbors, which lets the decoder learn a
                # copy-the-past shortcut and ignore speech entirely; span
                # masking removes whole stretches so the speech stream has to
                # carry the content inside them.
                k = projected.shape[0]
                keep = torch.ones(k, 1, dtype=projected.dtype)
                target = int(round(self.config.past_dropout * k))
                for _ in range(8):
                    if int(k - keep.sum()) >= target:
                        break
                    span = int(torch.randint(8, 25, (1,)))
                    start = int(torch.randint(0, max(k - span, 0) + 1, (1,)))
                    keep[start:start + span] = 0
                projected = projected * keep
            rows.append(projected)
        return torch.cat(rows, dim=0) + term

    # -- core decoding -------------------------------------------------------

    def _decode_features(self, speech_repr: torch.Tensor,
                         embedded: torch.Tensor) -> torch.Tensor:
        if speech_repr.shape[-1] != self.config.width:
            raise ValueError("speech representation width mismatch")
        tgt = self.positions(embedded).unsqueeze(0)
        # The speech encoder ends in a learned projection, so its own positional
        # encoding does not survive to the output in a basis the decoder can
        # match against; add positions again so query/key alignment is direct.
        mem = self.positions(speech_repr).unsqueeze(0)
        mask = nn.Transformer.generate_square_subsequent_mask(embedded.shape[0])
        out = self.decoder(tgt, mem, tgt_mask=mask)
        return self.head(out.squeeze(0))

    def _to_grid(self, raw: torch.Tensor):
        h = self.prior.config.components
        if self.config.mode == "token":
            return raw.view(raw.shape[0], h, self.prior.config.num_codes)
        return raw.view(raw.shape[0], h, self.prior.config.code_dim)

    def teacher_forced(self, speech_repr: torch.Tensor, style,
                       gt_motions: torch.Tensor) -> dict:
        """Full-sequence training pass with ground-truth motion history."""
        t = gt_motions.shape[0]
        embedded = self.embed_past(gt_motions[:-1], style)
        raw = self._to_grid(self._decode_features(speech_repr, embedded))
        out = {"frames": t}
        if self.config.mode == "token":
            out["logits"] = raw
            indices = raw.argmax(dim=-1)
            out["indices"] = indices
            out["pred_motions"] = self.prior.decode(self.prior.codebook[indices], t)
        else:
            values, indices = quantize(raw, self.prior.codebook)
            out["latents"] = raw
            out["quantized"] = values
            out["indices"] = indices
            out["pred_motions"] = self.prior.decode(straight_through(raw, values), t)
        return out

    def decode_step(self, speech_repr: torch.Tensor, style, past_motions,
                    t: int | None = None) -> torch.Tensor:
        """Predict the motion frame at position t (1-based).

        The full past-motion history may be passed; the causal mask guarantees
        the result only depends on positions before t.
        """
        k = 0 if past_motions is None else len(past_motions)
        if t is None:
            t = k + 1
        if not 1 <= t <= k + 1:
            raise ValueError(f"step t={t} needs at least {t - 1} past frames")
        embedded = self.embed_past(past_motions, style)
        raw = self._to_grid(self._decode_features(speech_repr, embedded))
        if self.config.mode == "token":
            grid = self.prior.codebook[raw[:t].argmax(dim=-1)]
        else:
            grid, _ = quantize(raw[:t], self.prior.codebook)
        motions = self.prior.decode(grid, t)
        return motions[t - 1]


def synthesize(model: SynthModel, clip: AudioClip, style, rig: FaceRig,
               fps: float = 25.0):
    """Autoregressive inference; returns (MotionSequence, animated meshes)."""
    d = samples_per_frame(fps)
    num_frames = clip.samples.size // d
    if num_frames < 1:
        raise ValueError("audio is shorter than one visual frame")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            speech_repr = model.speech(clip, num_frames)
            past = torch.zeros(0, model.prior.config.vertex_count, 3)
            grid = None
            for t in range(1, num_frames + 1):
                embedded = model.embed_past(past, style)
                raw = model._to_grid(model._decode_features(speech_repr, embedded))
                if model.config.mode == "token":
                    grid = model.prior.codebook[raw[:t].argmax(dim=-1)]
                else:
                    grid, _ = quantize(raw[:t], model.prior.codebook)
                # The frozen decoder is full-context, so the history is the
                # re-decoded prefix, not a concatenation of stale frames.
                past = model.prior.decode(grid, t)
            frames = model.prior.decode(grid, num_frames)
    finally:
        model.train(was_training)
    motions = MotionSequence(frames.numpy().astype(np.float32), fps)
    return motions, animate_template(rig, motions)


def train_synth(corpus: Corpus, prior: PriorModel, config: SynthConfig, log=None):
    """Teacher-forced stage-two training; returns (model, per-epoch loss log).

    Speaker i is conditioned with the unit style vector e_i, so num_styles
    must cover every training speaker id.
    """
    items = corpus.split("train")
    if not items:
        raise ValueError("corpus has no train items")
    if prior.config.vertex_count != corpus.rig.vertex_count:
        raise ValueError("prior vertex_count does not match corpus rig")
    if any(it.speaker_id >= config.num_styles for it in items):
        raise ValueError("num_styles must cover all training speaker ids")

    torch.manual_seed(config.seed)
    model = SynthModel(prior, config)
    before = frozen_prior_hash(prior)
    trainable = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(trainable, lr=config.learning_rate,
                           betas=(0.9, 0.999), eps=1e-8)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=config.epochs * len(items))
    gen = torch.Generator().manual_seed(config.seed)

    history = []
    model.train()
    model.prior.eval()
    for epoch in range(config.epochs):
        order = torch.randperm(len(items), generator=gen).tolist()
        sums = {"total": 0.0, "reg": 0.0, "motion": 0.0, "ce": 0.0}
        for i in order:
            it = items[i]
            # Random temporal crops: full-length items let the model memorize
            # trajectories by absolute position and speaker, which fits the
            # train split but transfers nothing. Crops shift speech and motion
            # together, so only the local audio-to-motion mapping survives.
            frames = it.motion.frames
            num = frames.shape[0]
            lo = min(40, num)
            length = int(torch.randint(lo, num + 1, (1,), generator=gen))
            start = int(torch.randint(0, num - length + 1, (1,), generator=gen))
            d = samples_per_frame(it.motion.fps)
            gt = torch.from_numpy(frames[start:start + length].astype(np.float32))
            clip = AudioClip(it.audio.samples[start * d:(start + length) * d])
            style = unit_style(config.num_styles, it.speaker_id)
            speech_repr = model.speech(clip, gt.shape[0])
            out = model.teacher_forced(speech_repr, style, gt)
            if config.mode == "token":
                with torch.no_grad():
                    crop = MotionSequence(gt.numpy(), it.motion.fps)
                    _, target = quantize(prior.encode(crop), prior.codebook)
                total = ce_token_loss(out["logits"], target)
                sums["ce"] += total.item()
            else:
                total, parts = synth_loss(out["latents"], out["quantized"],
                                          out["pred_motions"], gt,
                                          config.reg_weight, config.motion_weight)
                for k, v in parts.items():
                    sums[k] += v.item()
            if not torch.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, item {i}: {total.item()}")
            opt.zero_grad()
            total.backward()
            opt.step()
            sched.step()
            sums["total"] += total.item()
        record = {"epoch": epoch, **{k: v / len(items) for k, v in sums.items()}}
        history.append(record)
        if log is not None:
            log(record)

    after = frozen_prior_hash(prior)
    if before != after:
        raise RuntimeError("frozen prior parameters changed during training")
    model.eval()
    return model, history


# ---------------------------------------------------------------------------
# Checkpoints


def save_synth(model: SynthModel, path, history=None) -> str:
    path = Path(path)
    torch.save(model.state_dict(), path)
    blob_hash = hashlib.sha256(path.read_bytes()).hexdigest()
    cfg = asdict(model.config)
    sidecar = {
        "kind": "synth",
        "config": cfg,
        "prior_config": asdict(model.prior.config),
        "prior_frozen_hash": frozen_prior_hash(model.prior),
        "epochs_trained": len(history) if history else None,
        "final_losses": history[-1] if history else None,
        "blob_sha256": blob_hash,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))
    return blob_hash


def load_synth(path, prior: PriorModel | None = None) -> SynthModel:
    from .prior import PriorConfig

    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not sidecar_path.exists():
        raise CheckpointError(f"missing sidecar {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text())
    if sidecar.get("kind") != "synth":
        raise CheckpointError("sidecar is not a synth checkpoint")
    blob = path.read_bytes()
    if hashlib.sha256(blob).hexdigest() != sidecar["blob_sha256"]:
        raise CheckpointError("checkpoint blob does not match sidecar hash")
    if prior is None:
        prior = PriorModel(PriorConfig(**sidecar["prior_config"]))
    elif frozen_prior_hash(prior) != sidecar["prior_frozen_hash"]:
        raise CheckpointError("prior checkpoint hash does not match synth sidecar")
    config = SynthConfig(**sidecar["config"])
    model = SynthModel(prior, config)
    try:
        model.load_state_dict(torch.load(path, weights_only=True), strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"state does not match config: {e}") from e
    if sidecar["prior_frozen_hash"] != frozen_prior_hash(model.prior):
        raise CheckpointError("restored prior does not match recorded frozen hash")
    return model
