import json

import numpy as np
import pytest

import talkmotion as tm
from talkmotion.cli import main, parse_style_spec
from talkmotion.synth import interpolate_style, save_synth, synthesize, unit_style

TINY_DATA_FLAGS = ["--speakers", "2", "--utterances", "3", "--seed", "7"]


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "corpus"
    config = out.parent / "data.yaml"
    config.write_text(
        "data:\n  frames_range: [30, 44]\n"
        "prior: {}\nsynth: {}\n")
    code = main(["gen-data", "--out", str(out), "--config", str(config)]
                + TINY_DATA_FLAGS)
    assert code == 0
    return out


@pytest.fixture(scope="module")
def prior_ckpt(tmp_path_factory, corpus_dir):
    out = tmp_path_factory.mktemp("cli") / "prior.pt"
    config = out.parent / "prior.yaml"
    config.write_text(
        "prior:\n  num_codes: 32\n  code_dim: 16\n  components: 4\n"
        "  width: 48\n  feedforward: 96\n  heads: 2\n  layers: 1\n")
    code = main(["train-prior", "--data", str(corpus_dir), "--out", str(out),
                 "--config", str(config), "--epochs", "1", "--seed", "0"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def synth_ckpt(tmp_path_factory, corpus_dir, prior_ckpt):
    out = tmp_path_factory.mktemp("cli") / "synth.pt"
    config = out.parent / "synth.yaml"
    config.write_text(
        "synth:\n  width: 48\n  feedforward: 96\n  heads: 2\n  layers: 1\n"
        "  speech:\n    channels: 16\n    width: 32\n    feedforward: 64\n"
        "    heads: 2\n    layers: 1\n    out_dim: 48\n")
    code = main(["train-synth", "--data", str(corpus_dir),
                 "--prior", str(prior_ckpt), "--out", str(out),
                 "--config", str(config), "--epochs", "1", "--seed", "0"])
    assert code == 0
    return out


# ---------------------------------------------------------------------------
# gen-data


def test_gen_data_outputs(corpus_dir):
    manifest = json.loads((corpus_dir / "manifest.json").read_text())
    assert len(manifest["items"]) == 6
    assert (corpus_dir / "rig.ctrg").exists()
    for entry in manifest["items"]:
        assert (corpus_dir / entry["audio"]).exists()
        assert (corpus_dir / entry["motion"]).exists()
        assert "closure_events" in entry


def test_gen_data_default_counts(tmp_path):
    out = tmp_path / "full"
    assert main(["gen-data", "--out", str(out), "--seed", "0"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["items"]) == 32


def test_gen_data_same_seed_same_hash(tmp_path, corpus_dir):
    out = tmp_path / "again"
    config = tmp_path / "data.yaml"
    config.write_text("data:\n  frames_range: [30, 44]\n")
    assert main(["gen-data", "--out", str(out), "--config", str(config)]
                + TINY_DATA_FLAGS) == 0
    h1 = json.loads((out / "manifest.json").read_text())["content_sha256"]
    h2 = json.loads((corpus_dir / "manifest.json").read_text())["content_sha256"]
    assert h1 == h2


def test_gen_data_missing_out_is_usage_error(capsys):
    with pytest.raises(SystemExit) as e:
        main(["gen-data", "--seed", "0"])
    assert e.value.code == 2


def test_gen_data_unwritable_path(tmp_path):
    target = tmp_path / "file"
    target.write_text("x")
    code = main(["gen-data", "--out", str(target / "sub")] + TINY_DATA_FLAGS)
    assert code == 2


def test_env_seed_overrides_config(tmp_path, monkeypatch):
    monkeypatch.setenv("CODETALKER_SEED", "7")
    out = tmp_path / "env"
    assert main(["gen-data", "--out", str(out), "--speakers", "2",
                 "--utterances", "3", "--seed", "1234"]) == 0
    ref = tm.generate_synthetic_corpus(
        tm.SynthesisConfig(speakers=2, utterances_per_speaker=3, seed=7))
    loaded = tm.load_corpus(out)
    np.testing.assert_array_equal(loaded.items[0].motion.frames,
                                  ref.items[0].motion.frames)


def test_config_unknown_key_rejected(tmp_path):
    config = tmp_path / "bad.yaml"
    config.write_text("data:\n  speakres: 3\n")
    code = main(["gen-data", "--out", str(tmp_path / "c"),
                 "--config", str(config)])
    assert code == 2


def test_config_unknown_section_rejected(tmp_path):
    config = tmp_path / "bad.yaml"
    config.write_text("dta: {}\n")
    code = main(["gen-data", "--out", str(tmp_path / "c"),
                 "--config", str(config)])
    assert code == 2


# ---------------------------------------------------------------------------
# training commands


def test_train_prior_outputs(prior_ckpt):
    assert prior_ckpt.exists()
    sidecar = json.loads(prior_ckpt.with_suffix(".pt.json").read_text())
    assert sidecar["kind"] == "prior"
    csv_path = prior_ckpt.with_suffix(".losses.csv")
    lines = csv_path.read_text().strip().splitlines()
    assert len(lines) == 2  # header + one epoch
    model = tm.load_prior(prior_ckpt)
    assert model.config.num_codes == 32


def test_train_prior_rerun_same_loss_log(tmp_path, corpus_dir, prior_ckpt):
    out = tmp_path / "again.pt"
    config = tmp_path / "prior.yaml"
    config.write_text(
        "prior:\n  num_codes: 32\n  code_dim: 16\n  components: 4\n"
        "  width: 48\n  feedforward: 96\n  heads: 2\n  layers: 1\n")
    assert main(["train-prior", "--data", str(corpus_dir), "--out", str(out),
                 "--config", str(config), "--epochs", "1", "--seed", "0"]) == 0
    assert (out.with_suffix(".losses.csv").read_text()
            == prior_ckpt.with_suffix(".losses.csv").read_text())


def test_train_prior_nan_abort(tmp_path, corpus_dir):
    config = tmp_path / "nan.yaml"
    config.write_text("prior:\n  learning_rate: 1.0e+30\n  width: 32\n"
                      "  feedforward: 64\n  heads: 2\n  layers: 1\n"
                      "  num_codes: 16\n  code_dim: 8\n  components: 2\n")
    code = main(["train-prior", "--data", str(corpus_dir),
                 "--out", str(tmp_path / "x.pt"), "--config", str(config),
                 "--epochs", "2"])
    assert code == 3


def test_train_synth_outputs(synth_ckpt):
    sidecar = json.loads(synth_ckpt.with_suffix(".pt.json").read_text())
    assert sidecar["kind"] == "synth"
    assert "prior_frozen_hash" in sidecar
    assert synth_ckpt.with_suffix(".losses.csv").exists()


def test_train_synth_stale_prior_hash(tmp_path, corpus_dir, synth_ckpt,
                                      prior_ckpt):
    # Point load at a synth sidecar whose recorded hash no longer matches the
    # supplied prior: retrain the prior with a different seed.
    out2 = tmp_path / "prior2.pt"
    config = tmp_path / "prior.yaml"
    config.write_text(
        "prior:\n  num_codes: 32\n  code_dim: 16\n  components: 4\n"
        "  width: 48\n  feedforward: 96\n  heads: 2\n  layers: 1\n")
    assert main(["train-prior", "--data", str(corpus_dir), "--out", str(out2),
                 "--config", str(config), "--epochs", "1", "--seed", "9"]) == 0
    other = tm.load_prior(out2)
    with pytest.raises(tm.CheckpointError):
        tm.load_synth(synth_ckpt, other)


def test_train_synth_corrupt_prior_exit_4(tmp_path, corpus_dir, prior_ckpt):
    bad = tmp_path / "bad.pt"
    blob = bytearray(prior_ckpt.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    bad.write_bytes(bytes(blob))
    bad.with_suffix(".pt.json").write_text(
        prior_ckpt.with_suffix(".pt.json").read_text())
    code = main(["train-synth", "--data", str(corpus_dir),
                 "--prior", str(bad), "--out", str(tmp_path / "s.pt"),
                 "--epochs", "1"])
    assert code == 4


# ---------------------------------------------------------------------------
# synthesize / evaluate / plot


def test_style_spec_parsing():
    np.testing.assert_allclose(parse_style_spec("1", 3), [0, 1, 0])
    np.testing.assert_allclose(parse_style_spec("0:0.5,2:0.5", 3),
                               [0.5, 0, 0.5])
    with pytest.raises(Exception):
        parse_style_spec("5", 3)
    with pytest.raises(Exception):
        parse_style_spec("0:-1", 3)


def test_synthesize_command_and_style_equivalences(tmp_path, corpus_dir,
                                                   synth_ckpt):
    rig_path = corpus_dir / "rig.ctrg"
    audio_path = corpus_dir / "s00_u00.wav"
    outs = {}
    for name, spec in (("a", "0"), ("b", "0:1.0"), ("c", "0:2.0")):
        out = tmp_path / f"{name}.ctmc"
        assert main(["synthesize", "--audio", str(audio_path),
                     "--model", str(synth_ckpt), "--style", spec,
                     "--rig", str(rig_path), "--out", str(out)]) == 0
        outs[name] = out.read_bytes()
    assert outs["a"] == outs["b"] == outs["c"]


def test_synthesize_mixture_matches_library(tmp_path, corpus_dir, synth_ckpt):
    rig = tm.load_rig(corpus_dir / "rig.ctrg")
    audio_path = corpus_dir / "s00_u01.wav"
    out = tmp_path / "mix.ctmc"
    assert main(["synthesize", "--audio", str(audio_path),
                 "--model", str(synth_ckpt), "--style", "0:0.5,1:0.5",
                 "--rig", str(corpus_dir / "rig.ctrg"), "--out", str(out)]) == 0
    model = tm.load_synth(synth_ckpt)
    clip = tm.load_audio(audio_path)
    ref, _ = synthesize(model, clip, interpolate_style(2, 0, 1, 0.5), rig)
    got = tm.load_sequence(out)
    np.testing.assert_array_equal(got.frames, ref.frames)


def test_synthesize_negative_weight_exit_2(tmp_path, corpus_dir, synth_ckpt):
    code = main(["synthesize", "--audio", str(corpus_dir / "s00_u00.wav"),
                 "--model", str(synth_ckpt), "--style", "0:-2",
                 "--rig", str(corpus_dir / "rig.ctrg"),
                 "--out", str(tmp_path / "x.ctmc")])
    assert code == 2


def test_synthesize_short_audio_exit_2(tmp_path, corpus_dir, synth_ckpt):
    short = tmp_path / "short.wav"
    tm.save_audio(short, tm.AudioClip(np.zeros(500, np.float32)))
    code = main(["synthesize", "--audio", str(short),
                 "--model", str(synth_ckpt), "--style", "0",
                 "--rig", str(corpus_dir / "rig.ctrg"),
                 "--out", str(tmp_path / "x.ctmc")])
    assert code == 2


def test_synthesize_meshes_dir(tmp_path, corpus_dir, synth_ckpt):
    mesh_dir = tmp_path / "meshes"
    out = tmp_path / "m.ctmc"
    assert main(["synthesize", "--audio", str(corpus_dir / "s01_u00.wav"),
                 "--model", str(synth_ckpt), "--style", "1",
                 "--rig", str(corpus_dir / "rig.ctrg"), "--out", str(out),
                 "--meshes", str(mesh_dir)]) == 0
    seq = tm.load_sequence(out)
    frames = sorted(mesh_dir.glob("frame_*.npy"))
    assert len(frames) == seq.num_frames


def test_evaluate_identity(tmp_path, corpus_dir):
    pred = corpus_dir / "s00_u00.ctmc"
    report_path = tmp_path / "report.json"
    assert main(["evaluate", "--pred", str(pred), "--gt", str(pred),
                 "--rig", str(corpus_dir / "rig.ctrg"),
                 "--out", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    assert report["lip_vertex_error_mm"] == 0.0
    assert report["fdd_mm"] == 0.0
    assert report_path.with_suffix(".csv").exists()


def test_evaluate_shape_mismatch_exit_2(tmp_path, corpus_dir):
    a = corpus_dir / "s00_u00.ctmc"
    b = corpus_dir / "s00_u01.ctmc"
    code = main(["evaluate", "--pred", str(a), "--gt", str(b),
                 "--rig", str(corpus_dir / "rig.ctrg"),
                 "--out", str(tmp_path / "r.json")])
    assert code == 2


def test_plot_lipdist_overlay(tmp_path, corpus_dir):
    reports = []
    for i in range(3):
        pred = corpus_dir / "s00_u00.ctmc"
        path = tmp_path / f"r{i}.json"
        assert main(["evaluate", "--pred", str(pred), "--gt", str(pred),
                     "--rig", str(corpus_dir / "rig.ctrg"),
                     "--out", str(path)]) == 0
        reports.append(str(path))
    out = tmp_path / "lip.png"
    assert main(["plot", "--report", *reports, "--kind", "lipdist",
                 "--out", str(out)]) == 0
    assert out.stat().st_size > 0


def test_plot_dynamics(tmp_path, corpus_dir):
    path = tmp_path / "r.json"
    assert main(["evaluate", "--pred", str(corpus_dir / "s00_u00.ctmc"),
                 "--gt", str(corpus_dir / "s00_u00.ctmc"),
                 "--rig", str(corpus_dir / "rig.ctrg"),
                 "--out", str(path)]) == 0
    out = tmp_path / "dyn.png"
    assert main(["plot", "--report", str(path), "--kind", "dynamics",
                 "--rig", str(corpus_dir / "rig.ctrg"),
                 "--out", str(out)]) == 0
    assert out.stat().st_size > 0


def test_plot_dynamics_requires_rig(tmp_path, corpus_dir):
    path = tmp_path / "r.json"
    main(["evaluate", "--pred", str(corpus_dir / "s00_u00.ctmc"),
          "--gt", str(corpus_dir / "s00_u00.ctmc"),
          "--rig", str(corpus_dir / "rig.ctrg"), "--out", str(path)])
    assert main(["plot", "--report", str(path), "--kind", "dynamics",
                 "--out", str(tmp_path / "d.png")]) == 2


def test_plot_loss_curves(tmp_path, prior_ckpt):
    out = tmp_path / "loss.png"
    assert main(["plot", "--report",
                 str(prior_ckpt.with_suffix(".losses.csv")),
                 "--kind", "loss", "--out", str(out)]) == 0
    assert out.stat().st_size > 0


def test_plot_unknown_kind_exit_2():
    with pytest.raises(SystemExit) as e:
        main(["plot", "--report", "x.json", "--kind", "sparkles",
              "--out", "y.png"])
    assert e.value.code == 2


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit) as e:
        main(["synthesize", "--help"])
    assert e.value.code == 0
    help_text = capsys.readouterr().out
    assert "default 25" in help_text
