"""Animation data model, synthetic audio-motion corpus generator, and file I/O.

Motion frames are per-vertex offsets in millimeters from a neutral template.
Audio is mono 16 kHz float PCM; at the default 25 fps each visual frame
covers exactly 640 samples.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 16000

# Phoneme 0 of the synthetic inventory is the bilabial-closure phoneme: the
# generator drives the lip gap to (almost) zero for every frame it labels 0.
BILABIAL_PHONEME = 0
BILABIAL_GAP_MM = 0.2

REQUIRED_REGIONS = ("upper_lip", "lower_lip", "lip_region", "upper_face")

MOTION_MAGIC = b"CTMC"
RIG_MAGIC = b"CTRG"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed container file; message names the offending header field."""


@dataclass
class MotionSequence:
    """T x V x 3 vertex offsets (mm) relative to a neutral template."""

    frames: np.ndarray
    fps: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise ValueError(f"frames must be (T, V, 3), got {self.frames.shape}")
        if self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise ValueError("T and V must both be >= 1")
        if not np.isfinite(self.frames).all():
            raise ValueError("motion frames contain non-finite values")
        if not self.fps > 0:
            raise ValueError("fps must be positive")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def vertex_count(self) -> int:
        return self.frames.shape[1]


@dataclass
class FaceRig:
    """Neutral template vertices plus named region masks (vertex index sets)."""

    template: np.ndarray
    region_masks: dict[str, np.ndarray]

    def __post_init__(self):
        self.template = np.asarray(self.template, dtype=np.float32)
        if self.template.ndim != 2 or self.template.shape[1] != 3:
            raise ValueError(f"template must be (V, 3), got {self.template.shape}")
        v = self.template.shape[0]
        masks = {}
        for name, idx in self.region_masks.items():
            idx = np.asarray(idx, dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= v):
                raise ValueError(f"region {name!r} has out-of-range indices")
            masks[name] = np.unique(idx)
        self.region_masks = masks
        for name in REQUIRED_REGIONS:
            if name not in masks:
                raise ValueError(f"rig is missing required region {name!r}")
        up, lo = set(masks["upper_lip"]), set(masks["lower_lip"])
        lip, upper_face = set(masks["lip_region"]), set(masks["upper_face"])
        if up & lo:
            raise ValueError("upper_lip and lower_lip overlap")
        if not (up | lo) <= lip:
            raise ValueError("lip_region must contain upper_lip and lower_lip")
        if upper_face & lip:
            raise ValueError("upper_face and lip_region overlap")

    @property
    def vertex_count(self) -> int:
        return self.template.shape[0]


@dataclass
class AudioClip:
    """Mono waveform in [-1, 1] at 16 kHz."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise ValueError("audio must be mono (1-D)")
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample_rate must be {SAMPLE_RATE}")

    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def samples_per_frame(fps: float) -> int:
    d = SAMPLE_RATE / fps
    if abs(d - round(d)) > 1e-9:
        raise ValueError(f"fps {fps} does not divide the 16 kHz sample rate evenly")
    return int(round(d))


def align_audio(clip: AudioClip, num_frames: int, fps: float) -> AudioClip:
    """Pad (zeros) or truncate so the clip covers exactly num_frames frames."""
    d = samples_per_frame(fps)
    want = num_frames * d
    s = clip.samples
    if abs(s.size - want) > d:
        raise ValueError(
            f"audio length {s.size} is more than one frame away from {want}"
        )
    if s.size < want:
        s = np.concatenate([s, np.zeros(want - s.size, dtype=np.float32)])
    return AudioClip(s[:want])


@dataclass
class CorpusItem:
    speaker_id: int
    utterance_id: int
    audio: AudioClip
    motion: MotionSequence
    split: str
    phonemes: list[int] = field(default_factory=list)
    frame_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    closure_events: list[tuple[int, int]] = field(default_factory=list)

    @property
    def closure_frames(self) -> np.ndarray:
        return np.flatnonzero(self.frame_labels == BILABIAL_PHONEME)


@dataclass
class Corpus:
    rig: FaceRig
    items: list[CorpusItem]
    speakers: int
    fps: float

    def __post_init__(self):
        for it in self.items:
            if it.motion.vertex_count != self.rig.vertex_count:
                raise ValueError("corpus item vertex count does not match rig")
            if not 0 <= it.speaker_id < self.speakers:
                raise ValueError("speaker_id out of range")

    def split(self, tag: str) -> list[CorpusItem]:
        return [it for it in self.items if it.split == tag]


@dataclass
class SynthesisConfig:
    speakers: int = 4
    utterances_per_speaker: int = 8
    fps: float = 25.0
    frames_range: tuple[int, int] = (120, 200)
    phoneme_count: int = 6
    gain_range: tuple[float, float] = (0.3, 1.5)
    upper_face_noise_mm: float = 0.15
    seed: int = 7

    def __post_init__(self):
        if self.speakers < 1 or self.utterances_per_speaker < 1:
            raise ValueError("speaker and utterance counts must be positive")
        if self.phoneme_count < 2:
            raise ValueError("need at least two phonemes (one bilabial, one open)")
        lo, hi = self.frames_range
        if lo < 4 or hi < lo:
            raise ValueError("frames_range must satisfy 4 <= lo <= hi")
        glo, ghi = self.gain_range
        if glo <= 0 or ghi < glo:
            raise ValueError("gain_range must be positive and ordered")
        if self.upper_face_noise_mm < 0:
            raise ValueError("noise amplitude must be non-negative")
        samples_per_frame(self.fps)


def speaker_gains(config: SynthesisConfig) -> np.ndarray:
    """Per-speaker articulation gains, spread evenly over gain_range."""
    lo, hi = config.gain_range
    if config.speakers == 1:
        return np.array([hi])
    return np.linspace(lo, hi, config.speakers)


# ---------------------------------------------------------------------------
# Rig construction


def build_face_rig(vertex_count: int = 404) -> FaceRig:
    """Face-shaped vertex grid (mm) with hand-assigned region masks.

    The grid spans roughly 120 x 170 mm; vertices are the `vertex_count`
    grid points closest to the center of a face-shaped ellipse, lifted onto
    a shallow dome in z.
    """
    nx, ny = 26, 30
    xs = np.linspace(-60.0, 60.0, nx)
    ys = np.linspace(-85.0, 85.0, ny)
    gx, gy = np.meshgrid(xs, ys)
    gx, gy = gx.ravel(), gy.ravel()
    r2 = (gx / 62.0) ** 2 + (gy / 88.0) ** 2
    if vertex_count > gx.size:
        raise ValueError(f"vertex_count {vertex_count} exceeds grid size {gx.size}")
    keep = np.sort(np.argsort(r2, kind="stable")[:vertex_count])
    x, y = gx[keep], gy[keep]
    z = 28.0 * np.sqrt(np.clip(1.0 - r2[keep], 0.0, None))
    template = np.stack([x, y, z], axis=1)

    lip = np.flatnonzero((x / 24.0) ** 2 + ((y + 40.0) / 11.0) ** 2 <= 1.0)
    upper_lip = lip[y[lip] > -40.0]
    lower_lip = lip[y[lip] <= -40.0]
    upper_face = np.flatnonzero(y >= 12.0)
    for name, m in [("upper_lip", upper_lip), ("lower_lip", lower_lip),
                    ("upper_face", upper_face)]:
        if m.size == 0:
            raise ValueError(f"degenerate rig: empty {name} region")
    return FaceRig(template, {
        "upper_lip": upper_lip,
        "lower_lip": lower_lip,
        "lip_region": lip,
        "upper_face": upper_face,
    })


# ---------------------------------------------------------------------------
# Synthetic corpus generation


def _smooth(values: np.ndarray, width: int) -> np.ndarray:
    pad = width // 2
    padded = np.pad(values, pad, mode="edge")
    kernel = np.full(width, 1.0 / width)
    return np.convolve(padded, kernel, mode="valid")


def _phoneme_tables(phoneme_count: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-phoneme (base lip opening mm, rounding in [0,1], tone Hz)."""
    opening = np.empty(phoneme_count)
    opening[BILABIAL_PHONEME] = BILABIAL_GAP_MM
    others = np.arange(phoneme_count - 1)
    opening[1:] = 2.0 + 8.0 * others / max(phoneme_count - 2, 1)
    rounding = ((np.arange(phoneme_count) * 37) % 10) / 10.0
    freq = 300.0 + 140.0 * np.arange(phoneme_count)
    return opening, rounding, freq


def _generate_utterance(config: SynthesisConfig, rig: FaceRig, gain: float,
                        speaker_id: int, utterance_id: int):
    rng = np.random.default_rng([config.seed, speaker_id, utterance_id])
    t_lo, t_hi = config.frames_range
    num_frames = int(rng.integers(t_lo, t_hi + 1))

    phonemes: list[int] = []
    labels = np.empty(num_frames, dtype=np.int64)
    t = 0
    while t < num_frames:
        p = int(rng.integers(0, config.phoneme_count))
        dur = int(rng.integers(3, 9))
        labels[t:t + dur] = p
        phonemes.append(p)
        t += dur

    opening_tab, rounding_tab, freq_tab = _phoneme_tables(config.phoneme_count)
    base_open = _smooth(opening_tab[labels], 3)
    # Bilabial closures must hold at every frame the label says so; the box
    # smoothing above only shapes transitions inside neighboring phonemes.
    base_open[labels == BILABIAL_PHONEME] = BILABIAL_GAP_MM
    opening = gain * base_open
    rounding = _smooth(rounding_tab[labels], 3)

    up, lo = rig.region_masks["upper_lip"], rig.region_masks["lower_lip"]
    c_up = rig.template[up].mean(axis=0)
    c_lo = rig.template[lo].mean(axis=0)
    gap0 = float(np.linalg.norm(c_up - c_lo))
    axis = (c_up - c_lo) / gap0

    x = rig.template[:, 0]
    y = rig.template[:, 1]
    frames = np.zeros((num_frames, rig.vertex_count, 3))

    shift = 0.5 * (opening - gap0)  # per-frame displacement along the lip axis
    frames[:, up, :] += shift[:, None, None] * axis
    frames[:, lo, :] -= shift[:, None, None] * axis

    lip = rig.region_masks["lip_region"]
    frames[:, lip, 0] += -0.12 * rounding[:, None] * x[lip]

    # Jaw follows the lower lip with a smooth falloff below the mouth.
    chin = np.flatnonzero(y < -55.0)
    if chin.size:
        falloff = np.clip((-55.0 - y[chin]) / 30.0, 0.0, 1.0)
        frames[:, chin, :] -= (0.35 * shift[:, None, None]
                               * falloff[None, :, None] * axis)

    if config.upper_face_noise_mm > 0:
        uf = rig.region_masks["upper_face"]
        weight = np.exp(-((x[uf] / 50.0) ** 2 + ((y[uf] - 45.0) / 35.0) ** 2))
        noise = rng.standard_normal((num_frames, 3))
        for k in range(3):
            noise[:, k] = _smooth(_smooth(noise[:, k], 9), 9)
        noise *= config.upper_face_noise_mm / max(np.abs(noise).max(), 1e-9)
        frames[:, uf, :] += weight[None, :, None] * noise[:, None, :]

    motion = MotionSequence(frames.astype(np.float32), config.fps)

    # Audio: one band-limited tone per phoneme, amplitude tied to the
    # speaker-independent lip opening (closures are nearly silent).
    d = samples_per_frame(config.fps)
    amp_frames = 0.05 + 0.6 * base_open / opening_tab.max()
    frame_centers = (np.arange(num_frames) + 0.5) * d
    sample_idx = np.arange(num_frames * d)
    amp = np.interp(sample_idx, frame_centers, amp_frames)
    freq = np.repeat(freq_tab[labels], d)
    phase = np.cumsum(2.0 * np.pi * freq / SAMPLE_RATE)
    samples = amp * np.sin(phase) + 0.003 * rng.standard_normal(sample_idx.size)
    audio = AudioClip(np.clip(samples, -1.0, 1.0).astype(np.float32))

    events = []
    run_start = None
    for i, lab in enumerate(labels):
        if lab == BILABIAL_PHONEME and run_start is None:
            run_start = i
        elif lab != BILABIAL_PHONEME and run_start is not None:
            events.append((run_start, i))
            run_start = None
    if run_start is not None:
        events.append((run_start, num_frames))

    return audio, motion, phonemes, labels, events


def _per_speaker_splits(count: int) -> list[str]:
    """80/10/10 by utterance index, with at least one val and one test item
    whenever the speaker has three or more utterances."""
    if count < 3:
        return ["train"] * count
    n_val = max(1, int(count * 0.1))
    n_test = max(1, int(count * 0.1))
    n_train = count - n_val - n_test
    return ["train"] * n_train + ["val"] * n_val + ["test"] * n_test


def generate_synthetic_corpus(config: SynthesisConfig) -> Corpus:
    """Deterministic pseudo-phoneme corpus; pure function of the config."""
    rig = build_face_rig()
    gains = speaker_gains(config)
    items = []
    for spk in range(config.speakers):
        splits = _per_speaker_splits(config.utterances_per_speaker)
        for utt in range(config.utterances_per_speaker):
            audio, motion, phonemes, labels, events = _generate_utterance(
                config, rig, float(gains[spk]), spk, utt)
            items.append(CorpusItem(
                speaker_id=spk, utterance_id=utt, audio=audio, motion=motion,
                split=splits[utt], phonemes=phonemes, frame_labels=labels,
                closure_events=events))
    return Corpus(rig=rig, items=items, speakers=config.speakers, fps=config.fps)


# ---------------------------------------------------------------------------
# Splitting


@dataclass
class CorpusSplits:
    train: list[CorpusItem]
    val: list[CorpusItem]
    test: list[CorpusItem]
    heldout_speaker: list[CorpusItem]


def split_corpus(corpus: Corpus, fractions=(0.8, 0.1, 0.1)) -> CorpusSplits:
    """Disjoint, exhaustive split of the item list by the given fractions.

    Counts are floored per split with the remainder going to train. Items are
    ordered utterance-major so every speaker appears in the train portion.
    When the corpus has >= 4 speakers, `heldout_speaker` additionally exposes
    all items of one designated speaker as an unseen-speaker evaluation view
    (it overlaps the main splits).
    """
    if not corpus.items:
        raise ValueError("cannot split an empty corpus")
    if abs(sum(fractions) - 1.0) > 1e-9 or len(fractions) != 3:
        raise ValueError("fractions must be three values summing to 1")
    keys = [(it.speaker_id, it.utterance_id) for it in corpus.items]
    if len(set(keys)) != len(keys):
        raise ValueError("corpus has duplicate (speaker, utterance) items")
    items = sorted(corpus.items, key=lambda it: (it.utterance_id, it.speaker_id))
    n = len(items)
    n_val = int(n * fractions[1])
    n_test = int(n * fractions[2])
    n_train = n - n_val - n_test
    train = items[:n_train]
    val = items[n_train:n_train + n_val]
    test = items[n_train + n_val:]
    heldout = []
    if corpus.speakers >= 4:
        spk = corpus.speakers // 2
        heldout = [it for it in corpus.items if it.speaker_id == spk]
    return CorpusSplits(train, val, test, heldout)


# ---------------------------------------------------------------------------
# Animation


def animate_template(rig: FaceRig, motions: MotionSequence) -> np.ndarray:
    """T x V x 3 absolute meshes: template + per-frame offsets."""
    if motions.vertex_count != rig.vertex_count:
        raise ValueError(
            f"motion V={motions.vertex_count} does not match rig V={rig.vertex_count}")
    return rig.template[None, :, :] + motions.frames


# ---------------------------------------------------------------------------
# File I/O


def save_sequence(path, motions: MotionSequence) -> None:
    frames = np.ascontiguousarray(motions.frames, dtype="<f4")
    t, v, _ = frames.shape
    with open(path, "wb") as f:
        f.write(MOTION_MAGIC)
        f.write(struct.pack("<IIIf", FORMAT_VERSION, t, v, motions.fps))
        f.write(frames.tobytes())


def load_sequence(path) -> MotionSequence:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 20:
        raise FormatError("truncated header: expected magic + 16 header bytes")
    if blob[:4] != MOTION_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MOTION_MAGIC!r}")
    version, t, v, fps = struct.unpack("<IIIf", blob[4:20])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    if t < 1:
        raise FormatError(f"header field T={t} must be >= 1")
    if v < 1:
        raise FormatError(f"header field V={v} must be >= 1")
    if not np.isfinite(fps) or fps <= 0:
        raise FormatError(f"header field fps={fps} must be positive")
    want = t * v * 3 * 4
    payload = blob[20:]
    if len(payload) != want:
        raise FormatError(
            f"payload length {len(payload)} does not match T*V*3 f32 = {want}")
    frames = np.frombuffer(payload, dtype="<f4").reshape(t, v, 3)
    return MotionSequence(frames.copy(), float(fps))


def save_rig(path, rig: FaceRig) -> None:
    with open(path, "wb") as f:
        f.write(RIG_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, rig.vertex_count))
        f.write(np.ascontiguousarray(rig.template, dtype="<f4").tobytes())
        for name, idx in sorted(rig.region_masks.items()):
            raw = name.encode("ascii")
            f.write(struct.pack("<B", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", idx.size))
            f.write(np.ascontiguousarray(idx, dtype="<u4").tobytes())


def load_rig(path) -> FaceRig:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise FormatError("truncated header: expected magic + 8 header bytes")
    if blob[:4] != RIG_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {RIG_MAGIC!r}")
    version, v = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    if v < 1:
        raise FormatError(f"header field V={v} must be >= 1")
    off = 12
    need = v * 3 * 4
    if len(blob) < off + need:
        raise FormatError("truncated template block")
    template = np.frombuffer(blob[off:off + need], dtype="<f4").reshape(v, 3)
    off += need
    masks = {}
    while off < len(blob):
        (nlen,) = struct.unpack_from("<B", blob, off)
        off += 1
        if len(blob) < off + nlen + 4:
            raise FormatError("truncated region block header")
        name = blob[off:off + nlen].decode("ascii")
        off += nlen
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        if len(blob) < off + count * 4:
            raise FormatError(f"truncated index list for region {name!r}")
        masks[name] = np.frombuffer(blob[off:off + count * 4], dtype="<u4").astype(np.int64)
        off += count * 4
    return FaceRig(template.copy(), masks)


def save_audio(path, clip: AudioClip) -> None:
    wavfile.write(path, clip.sample_rate, np.asarray(clip.samples, dtype=np.float32))


def load_audio(path) -> AudioClip:
    rate, samples = wavfile.read(path)
    if rate != SAMPLE_RATE:
        raise FormatError(f"sample rate {rate} != required {SAMPLE_RATE}")
    if samples.ndim != 1:
        raise FormatError("audio must be mono")
    if samples.dtype != np.float32:
        if np.issubdtype(samples.dtype, np.integer):
            samples = samples.astype(np.float32) / float(np.iinfo(samples.dtype).max)
        else:
            samples = samples.astype(np.float32)
    return AudioClip(samples)


# ---------------------------------------------------------------------------
# Corpus directories

MANIFEST_NAME = "manifest.json"
RIG_NAME = "rig.ctrg"


def save_corpus(directory, corpus: Corpus, generator: dict | None = None) -> str:
    """Write rig + per-item WAV/CTMC pairs + manifest.json into a directory.

    Returns the manifest content hash: SHA-256 over the rig and data files
    plus the manifest body itself (no timestamps anywhere, so the hash is a
    pure function of the corpus).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_rig(directory / RIG_NAME, corpus.rig)
    entries = []
    for it in corpus.items:
        stem = f"s{it.speaker_id:02d}_u{it.utterance_id:02d}"
        save_audio(directory / f"{stem}.wav", it.audio)
        save_sequence(directory / f"{stem}.ctmc", it.motion)
        entries.append({
            "speaker_id": it.speaker_id,
            "utterance_id": it.utterance_id,
            "split": it.split,
            "audio": f"{stem}.wav",
            "motion": f"{stem}.ctmc",
            "phonemes": [int(p) for p in it.phonemes],
            "frame_labels": [int(x) for x in it.frame_labels],
            "closure_events": [[int(a), int(b)] for a, b in it.closure_events],
        })
    manifest = {
        "format_version": FORMAT_VERSION,
        "rig": RIG_NAME,
        "speakers": corpus.speakers,
        "fps": corpus.fps,
        "generator": generator or {},
        "items": entries,
    }
    digest = hashlib.sha256()
    digest.update(json.dumps(manifest, sort_keys=True).encode())
    digest.update((directory / RIG_NAME).read_bytes())
    for e in entries:
        digest.update((directory / e["audio"]).read_bytes())
        digest.update((directory / e["motion"]).read_bytes())
    manifest["content_sha256"] = digest.hexdigest()
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))
    return manifest["content_sha256"]


def load_corpus(directory) -> Corpus:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise FormatError(f"no {MANIFEST_NAME} in {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError("unsupported manifest format_version")
    rig = load_rig(directory / manifest["rig"])
    items = []
    for e in manifest["items"]:
        items.append(CorpusItem(
            speaker_id=e["speaker_id"],
            utterance_id=e["utterance_id"],
            audio=load_audio(directory / e["audio"]),
            motion=load_sequence(directory / e["motion"]),
            split=e["split"],
            phonemes=list(e["phonemes"]),
            frame_labels=np.asarray(e["frame_labels"], dtype=np.int64),
            closure_events=[tuple(ev) for ev in e["closure_events"]],
        ))
    return Corpus(rig=rig, items=items,
                  speakers=manifest["speakers"], fps=manifest["fps"])
