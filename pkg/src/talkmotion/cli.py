"""Command-line surface for the pipeline.

Subcommands: gen-data, train-prior, train-synth, synthesize, evaluate, plot,
reproduce. Exit codes are a stable contract: 0 success, 2 usage or
validation error, 3 numerical abort during training, 4 checkpoint
incompatibility. The CODETALKER_SEED environment variable overrides every
configured seed, so CI can pin runs without editing configs.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .acceptance import run_all
from .data import (Corpus, FormatError, SynthesisConfig, animate_template,
                   generate_synthetic_corpus, load_audio, load_corpus,
                   load_rig, load_sequence, save_corpus, save_sequence)
from .metrics import EvalReport, evaluate_pair, motion_dynamics_stats
from .prior import (CheckpointError, PriorConfig, TrainingDiverged,
                    load_prior, save_prior, train_prior)
from .speech import SpeechEncoderConfig
from .synth import SynthConfig, load_synth, save_synth, synthesize, train_synth

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_CHECKPOINT = 4

SEED_ENV = "CODETALKER_SEED"


class CliError(Exception):
    """Validation failure mapped to exit code 2."""


# ---------------------------------------------------------------------------
# Config files


def _build_section(cls, values: dict, label: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise CliError(f"unknown key(s) in [{label}]: {', '.join(sorted(unknown))}")
    return values


def load_run_config(path) -> dict:
    """Parse a YAML config file with data/prior/synth sections.

    Unknown sections or keys are rejected. Returns a dict of plain dicts;
    the caller merges flag overrides before constructing dataclasses.
    """
    import yaml

    raw = yaml.safe_load(Path(path).read_text())
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise CliError("config file must be a mapping of sections")
    sections = {"data": SynthesisConfig, "prior": PriorConfig, "synth": SynthConfig}
    unknown = set(raw) - set(sections)
    if unknown:
        raise CliError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    out = {}
    for name, cls in sections.items():
        values = raw.get(name) or {}
        if not isinstance(values, dict):
            raise CliError(f"section [{name}] must be a mapping")
        if name == "synth" and "speech" in values:
            _build_section(SpeechEncoderConfig, values["speech"], "synth.speech")
        out[name] = _build_section(
            cls, {k: v for k, v in values.items()}, name)
    return out


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"{SEED_ENV} must be an integer, got {raw!r}")


def _resolve_seed(flag_seed, section: dict) -> int | None:
    env = _env_seed()
    if env is not None:
        return env
    if flag_seed is not None:
        return flag_seed
    return section.get("seed")


# ---------------------------------------------------------------------------
# Styles


def parse_style_spec(spec: str, num_styles: int) -> np.ndarray:
    """`i` means the unit vector e_i; `i:w_i,j:w_j` are explicit weights.

    Weights must be non-negative; the model L1-normalizes internally, so
    scale does not matter.
    """
    spec = spec.strip()
    weights = np.zeros(num_styles, dtype=np.float32)
    try:
        if ":" not in spec:
            idx = int(spec)
            if not 0 <= idx < num_styles:
                raise CliError(f"style index {idx} out of range [0, {num_styles})")
            weights[idx] = 1.0
            return weights
        for part in spec.split(","):
            key, _, val = part.partition(":")
            idx, w = int(key), float(val)
            if not 0 <= idx < num_styles:
                raise CliError(f"style index {idx} out of range [0, {num_styles})")
            if w < 0:
                raise CliError(f"style weight {w} must be non-negative")
            weights[idx] += w
    except ValueError as e:
        raise CliError(f"bad style spec {spec!r}: {e}")
    if weights.sum() == 0:
        raise CliError("style spec has zero total weight")
    return weights


# ---------------------------------------------------------------------------
# Commands


def _write_loss_log(path, history) -> None:
    keys = list(history[0]) if history else ["epoch"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        writer.writerows(history)


def cmd_gen_data(args) -> int:
    section = load_run_config(args.config)["data"] if args.config else {}
    for key, flag in (("speakers", args.speakers),
                      ("utterances_per_speaker", args.utterances),
                      ("fps", args.fps)):
        if flag is not None:
            section[key] = flag
    seed = _resolve_seed(args.seed, section)
    if seed is not None:
        section["seed"] = seed
    if "frames_range" in section:
        section["frames_range"] = tuple(section["frames_range"])
    try:
        config = SynthesisConfig(**section)
    except (TypeError, ValueError) as e:
        raise CliError(str(e))
    corpus = generate_synthetic_corpus(config)
    out = Path(args.out)
    generator = asdict(config)
    generator["frames_range"] = list(generator["frames_range"])
    content_hash = save_corpus(out, corpus, generator=generator)
    print(f"wrote {len(corpus.items)} items to {out} "
          f"(content_sha256={content_hash[:16]}...)")
    return EXIT_OK


def cmd_train_prior(args) -> int:
    corpus = load_corpus(args.data)
    section = load_run_config(args.config)["prior"] if args.config else {}
    section.setdefault("vertex_count", corpus.rig.vertex_count)
    if args.epochs is not None:
        section["epochs"] = args.epochs
    seed = _resolve_seed(args.seed, section)
    if seed is not None:
        section["seed"] = seed
    try:
        config = PriorConfig(**section)
    except (TypeError, ValueError) as e:
        raise CliError(str(e))
    model, history = train_prior(corpus, config)
    save_prior(model, args.out, history)
    _write_loss_log(Path(args.out).with_suffix(".losses.csv"), history)
    print(f"trained prior for {len(history)} epochs, "
          f"final loss {history[-1]['total']:.6f}, checkpoint {args.out}")
    return EXIT_OK


def cmd_train_synth(args) -> int:
    corpus = load_corpus(args.data)
    prior = load_prior(args.prior)
    section = load_run_config(args.config)["synth"] if args.config else {}
    section.setdefault("num_styles", corpus.speakers)
    section.setdefault("learning_rate", 1e-3)
    if args.epochs is not None:
        section["epochs"] = args.epochs
    if args.mode is not None:
        section["mode"] = args.mode
    seed = _resolve_seed(args.seed, section)
    if seed is not None:
        section["seed"] = seed
    try:
        config = SynthConfig(**section)
    except (TypeError, ValueError) as e:
        raise CliError(str(e))
    model, history = train_synth(corpus, prior, config)
    save_synth(model, args.out, history)
    _write_loss_log(Path(args.out).with_suffix(".losses.csv"), history)
    print(f"trained synthesizer for {len(history)} epochs, "
          f"final loss {history[-1]['total']:.6f}, checkpoint {args.out}")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    model = load_synth(args.model)
    rig = load_rig(args.rig)
    if rig.vertex_count != model.prior.config.vertex_count:
        raise CliError("rig vertex count does not match model")
    clip = load_audio(args.audio)
    style = parse_style_spec(args.style, model.config.num_styles)
    try:
        motions, meshes = synthesize(model, clip, style, rig, fps=args.fps)
    except ValueError as e:
        raise CliError(str(e))
    save_sequence(args.out, motions)
    print(f"synthesized {motions.num_frames} frames -> {args.out}")
    if args.meshes:
        mesh_dir = Path(args.meshes)
        mesh_dir.mkdir(parents=True, exist_ok=True)
        for t in range(meshes.shape[0]):
            np.save(mesh_dir / f"frame_{t:05d}.npy", meshes[t])
        print(f"wrote {meshes.shape[0]} mesh frames to {mesh_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pred = load_sequence(args.pred)
    gt = load_sequence(args.gt)
    rig = load_rig(args.rig)
    try:
        report = evaluate_pair(pred, gt, rig)
    except ValueError as e:
        raise CliError(str(e))
    report.save(args.out)
    print(f"lip vertex error {report.lip_vertex_error:.6f} mm, "
          f"FDD {report.fdd:.6f} mm -> {args.out}")
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 4.5))
    if args.kind == "lipdist":
        for path in args.report:
            report = EvalReport.load(path)
            label = report.metadata.get("label", Path(path).stem)
            ax.plot(report.lip_distance, label=label)
        first = EvalReport.load(args.report[0])
        if first.lip_distance_gt.size:
            ax.plot(first.lip_distance_gt, "k--", label="ground truth")
        ax.set_xlabel("frame")
        ax.set_ylabel("lip distance (mm)")
        ax.legend()
    elif args.kind == "dynamics":
        if not args.rig:
            raise CliError("--rig is required for the dynamics plot")
        rig = load_rig(args.rig)
        report = EvalReport.load(args.report[0])
        values = np.asarray(report.dyn_std)
        if values.size != rig.vertex_count:
            raise CliError("report dynamics length does not match rig")
        sc = ax.scatter(rig.template[:, 0], rig.template[:, 1],
                        c=values, s=14, cmap="viridis")
        fig.colorbar(sc, ax=ax, label="adjacent-frame motion std (mm)")
        ax.set_aspect("equal")
        ax.set_xlabel("x (mm)")
        ax.set_ylabel("y (mm)")
    elif args.kind == "loss":
        for path in args.report:
            with open(path, newline="") as f:
                rows = list(csv.DictReader(f))
            if not rows:
                raise CliError(f"empty loss log {path}")
            ax.plot([float(r["total"]) for r in rows], label=Path(path).stem)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend()
    else:  # argparse choices should prevent this
        raise CliError(f"unknown plot kind {args.kind!r}")
    fig.tight_layout()
    fig.savefig(args.out)
    plt.close(fig)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    seed = _env_seed()
    if seed is None:
        seed = args.seed
    report = run_all(args.out, seed=seed)
    print(f"report: {Path(args.out) / 'report.json'}")
    return EXIT_OK if report["all_passed"] else 1


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="talkmotion",
        description="Speech-driven 3D facial animation with a discrete motion prior")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--speakers", type=int, default=None,
                   help="number of speakers (default 4)")
    p.add_argument("--utterances", type=int, default=None,
                   help="utterances per speaker (default 8)")
    p.add_argument("--seed", type=int, default=None, help="generator seed (default 0)")
    p.add_argument("--fps", type=float, default=None, help="frame rate (default 25)")
    p.add_argument("--config", default=None, help="YAML config file")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-prior", help="train the stage-one motion prior")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", default=None, help="YAML config file")
    p.add_argument("--epochs", type=int, default=None, help="override epoch count")
    p.add_argument("--seed", type=int, default=None, help="override seed")
    p.set_defaults(func=cmd_train_prior)

    p = sub.add_parser("train-synth", help="train the stage-two synthesizer")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--prior", required=True, help="stage-one checkpoint")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", default=None, help="YAML config file")
    p.add_argument("--epochs", type=int, default=None, help="override epoch count")
    p.add_argument("--mode", choices=("regression", "token"), default=None,
                   help="training objective (default regression)")
    p.add_argument("--seed", type=int, default=None, help="override seed")
    p.set_defaults(func=cmd_train_synth)

    p = sub.add_parser("synthesize", help="drive the face from a WAV file")
    p.add_argument("--audio", required=True, help="mono 16 kHz WAV")
    p.add_argument("--model", required=True, help="synth checkpoint")
    p.add_argument("--style", required=True,
                   help="style spec: `i` or `i:w_i,j:w_j,...`")
    p.add_argument("--rig", required=True, help="rig file")
    p.add_argument("--out", required=True, help="output motion container")
    p.add_argument("--meshes", default=None,
                   help="optional directory for animated mesh frames")
    p.add_argument("--fps", type=float, default=25.0, help="frame rate (default 25)")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="compare predicted motion to ground truth")
    p.add_argument("--pred", required=True, help="predicted motion container")
    p.add_argument("--gt", required=True, help="ground-truth motion container")
    p.add_argument("--rig", required=True, help="rig file")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="plot report curves or loss logs")
    p.add_argument("--report", required=True, nargs="+",
                   help="report JSON (lipdist/dynamics) or loss CSV (loss)")
    p.add_argument("--kind", required=True, choices=("lipdist", "dynamics", "loss"))
    p.add_argument("--out", required=True, help="output image (PNG or SVG)")
    p.add_argument("--rig", default=None, help="rig file (dynamics kind)")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("reproduce",
                       help="run the full pipeline and acceptance report")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="pinned seed (default 0)")
    p.set_defaults(func=cmd_reproduce)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDiverged as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (CliError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
