"""Mel-spectrogram frontend and the synthetic multimodal dataset.

Audio goes through a Hann-windowed power STFT, an HTK-scale triangular mel
filterbank, log(1+x) compression, and non-overlapping 400 ms chunking, so one
chunk is a square F x T image the visual block stack can reuse.

The generator plants class evidence that is only recoverable by *locating*
it: a bright blob in a class-specific frame region, an energy band in a
class-specific mel range, and a text motif naming the class pair (text alone
cannot fully separate, which forces the fusion to use audio/vision).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AudioClip",
    "ModalitySample",
    "ManifestRecord",
    "Manifest",
    "GeneratorConfig",
    "SAMPLE_RATE",
    "CHUNK_FRAMES",
    "CLS_ID",
    "UNK_ID",
    "mel_filterbank",
    "mel_energies",
    "mel_spectrogram",
    "chunk_spectrogram",
    "synth_sample",
    "class_region",
    "make_records",
    "split_manifest",
    "pos_weights_from_labels",
    "save_manifest",
    "load_manifest",
    "build_samples",
]

SAMPLE_RATE = 16_000
WINDOW_SECONDS = 0.025
HOP_SECONDS = 0.0125
N_FFT = 512
N_MELS = 32
CHUNK_FRAMES = 32  # 400 ms / 12.5 ms hop

CLS_ID = 0
UNK_ID = 1
_MOTIF_BASE = 2       # token 2 + (class // 2) names the class pair
_DISTRACTOR_BASE = 5


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.samples.size == 0:
            raise ValueError("empty audio clip")


@dataclass
class ModalitySample:
    """One utterance: tokens (CLS first), spectrogram chunks, frames, labels."""

    tokens: np.ndarray        # (T_text,) int, tokens[0] == CLS_ID
    audio_chunks: np.ndarray  # (S_a, 1, F, T)
    frames: np.ndarray        # (S_v, 3, H, W)
    labels: np.ndarray        # (classes,) multi-hot


# ----------------------------------------------------------------------
# mel frontend
# ----------------------------------------------------------------------

def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT,
                   sample_rate: int = SAMPLE_RATE
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Triangular filters on the HTK mel scale; returns (filters, center_hz)."""
    edges = _mel_to_hz(np.linspace(_hz_to_mel(0.0),
                                   _hz_to_mel(sample_rate / 2.0), n_mels + 2))
    bins = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    fb = np.zeros((n_mels, bins.size))
    for i in range(n_mels):
        lo, center, hi = edges[i], edges[i + 1], edges[i + 2]
        rising = (bins - lo) / (center - lo)
        falling = (hi - bins) / (hi - center)
        fb[i] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb, edges[1:-1]


def mel_energies(clip: AudioClip, n_mels: int = N_MELS,
                 n_fft: int = N_FFT) -> np.ndarray:
    """Pre-compression mel energies (n_mels, n_frames) from the power STFT.

    25 ms Hann window, 12.5 ms hop; frame count is
    floor((len - window) / hop) + 1.  Doubling the waveform amplitude scales
    these energies by exactly 4.
    """
    win = round(clip.sample_rate * WINDOW_SECONDS)
    hop = round(clip.sample_rate * HOP_SECONDS)
    x = clip.samples
    if x.size < win:
        raise ValueError(
            f"clip of {x.size} samples is shorter than one {win}-sample window")
    n_frames = (x.size - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hanning(win)
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    fb, _ = mel_filterbank(n_mels, n_fft, clip.sample_rate)
    return fb @ power.T


def mel_spectrogram(clip: AudioClip, n_mels: int = N_MELS,
                    n_fft: int = N_FFT) -> np.ndarray:
    """log(1 + mel energy), shape (n_mels, n_frames)."""
    return np.log1p(mel_energies(clip, n_mels, n_fft))


def chunk_spectrogram(frames: np.ndarray,
                      chunk_frames: int = CHUNK_FRAMES) -> list[np.ndarray]:
    """Cut (F, T) into non-overlapping (F, chunk) pieces, zero-padding the last."""
    f, t = frames.shape
    chunks = []
    for start in range(0, t, chunk_frames):
        piece = frames[:, start:start + chunk_frames]
        if piece.shape[1] < chunk_frames:
            pad = np.zeros((f, chunk_frames - piece.shape[1]))
            piece = np.concatenate([piece, pad], axis=1)
        chunks.append(piece)
    return chunks


# ----------------------------------------------------------------------
# synthetic data
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorConfig:
    classes: int = 6
    frame_size: int = 16
    frames_range: tuple[int, int] = (2, 3)       # inclusive
    audio_seconds: tuple[float, float] = (0.40, 0.44)
    vocab_size: int = 32
    text_len: tuple[int, int] = (6, 12)          # inclusive, without CLS
    blob_amplitude: float = 1.4
    blob_sigma: float = 1.4
    noise_std: float = 0.3
    audio_noise: float = 0.05


# two color make-ups inside each blob: evidence is not one homogeneous bloc,
# so a feature projection never drops it wholesale
_BLOB_PROFILES = np.array([[1.3, 0.9, 0.5], [0.5, 0.9, 1.3]])


DEFAULT_GEN = GeneratorConfig()


def class_region(class_id: int, frame_size: int = 16) -> tuple[int, int, int, int]:
    """Planted blob region (h_lo, h_hi, w_lo, w_hi) for a class, 2x3 grid."""
    row, col = class_id // 3, class_id % 3
    h_lo = round(row * frame_size / 2)
    h_hi = round((row + 1) * frame_size / 2)
    w_lo = round(col * frame_size / 3)
    w_hi = round((col + 1) * frame_size / 3)
    return h_lo, h_hi, w_lo, w_hi


def _class_mel_band(class_id: int, n_mels: int = N_MELS) -> tuple[int, int]:
    lo = 3 + 4 * class_id
    return lo, lo + 4


def synth_sample(class_id: int, seed: int,
                 gen: GeneratorConfig = DEFAULT_GEN) -> ModalitySample:
    """Deterministic synthetic utterance for one class.

    Same (class_id, seed) always yields the identical sample.
    """
    if not 0 <= class_id < gen.classes:
        raise ValueError(f"class id {class_id} outside 0..{gen.classes - 1}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed),
                                                        int(class_id)]))
    size = gen.frame_size
    # slight class-dependent brightness: a global-statistics probe sees a
    # weak cue, but separation needs the blob's location
    amp = gen.blob_amplitude * (0.8 + 0.4 * class_id / max(gen.classes - 1, 1))

    # frames: noise background plus a bright blob inside the class region
    n_frames = int(rng.integers(gen.frames_range[0], gen.frames_range[1] + 1))
    h_lo, h_hi, w_lo, w_hi = class_region(class_id, size)
    mh = min(1.5, (h_hi - h_lo) / 2)
    mw = min(1.5, (w_hi - w_lo) / 2)
    frames = rng.normal(0.0, gen.noise_std, size=(n_frames, 3, size, size))
    yy, xx = np.mgrid[0:size, 0:size]
    for i in range(n_frames):
        for profile in _BLOB_PROFILES:
            ch = rng.uniform(h_lo + mh, h_hi - mh)
            cw = rng.uniform(w_lo + mw, w_hi - mw)
            bump = np.exp(-((yy - ch) ** 2 + (xx - cw) ** 2)
                          / (2.0 * gen.blob_sigma ** 2))
            frames[i] += amp * profile[:, None, None] * bump[None, :, :]

    # audio: one sinusoid per distinct row of the class mel band plus noise
    seconds = rng.uniform(*gen.audio_seconds)
    n = round(seconds * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE
    _, centers = mel_filterbank()
    lo, hi = _class_mel_band(class_id)
    wave = gen.audio_noise * rng.normal(size=n)
    for row in rng.permutation(np.arange(lo, hi))[:3]:
        wave = wave + rng.uniform(0.3, 0.55) * np.sin(
            2 * math.pi * centers[row] * t + rng.uniform(0, 2 * math.pi))
    spec = mel_spectrogram(AudioClip(wave))
    chunks = np.stack([c[None, :, :] for c in chunk_spectrogram(spec)])

    # text: distractor tokens with a class-pair motif inserted
    length = int(rng.integers(gen.text_len[0], gen.text_len[1] + 1))
    body = rng.integers(_DISTRACTOR_BASE, gen.vocab_size, size=length)
    body[rng.integers(0, length)] = _MOTIF_BASE + class_id // 2
    tokens = np.concatenate([[CLS_ID], body]).astype(np.int64)

    labels = np.zeros(gen.classes)
    labels[class_id] = 1.0
    return ModalitySample(tokens=tokens, audio_chunks=chunks,
                          frames=frames, labels=labels)


# ----------------------------------------------------------------------
# manifests
# ----------------------------------------------------------------------

@dataclass
class ManifestRecord:
    id: str
    split: str
    labels: list[int]
    seed: int
    class_id: int


@dataclass
class Manifest:
    records: list[ManifestRecord]
    pos_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    @property
    def classes(self) -> int:
        return len(self.records[0].labels)


def make_records(n: int, classes: int = 6, seed: int = 0) -> list[ManifestRecord]:
    """Balanced round-robin class assignment with per-record generator seeds."""
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2 ** 31 - 1, size=n)
    records = []
    for i in range(n):
        class_id = i % classes
        labels = [0] * classes
        labels[class_id] = 1
        records.append(ManifestRecord(id=f"s{i:05d}", split="train",
                                      labels=labels, seed=int(seeds[i]),
                                      class_id=class_id))
    return records


def split_manifest(records: list[ManifestRecord],
                   fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
                   seed: int = 0, pos_weight_cap: float = 100.0) -> Manifest:
    """Seeded shuffle then contiguous slicing into train/valid/test.

    Every split but the last gets floor(fraction * n) records; the last takes
    the remainder.  Positive-class weights come from the train slice only.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    n = len(records)
    if n < 10:
        raise ValueError(f"need at least 10 records to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [records[i] for i in order]
    sizes = [math.floor(f * n) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    names = ("train", "valid", "test")
    out: list[ManifestRecord] = []
    start = 0
    for name, size in zip(names, sizes):
        for rec in shuffled[start:start + size]:
            out.append(ManifestRecord(rec.id, name, list(rec.labels),
                                      rec.seed, rec.class_id))
        start += size
    train_labels = np.array([r.labels for r in out if r.split == "train"],
                            dtype=np.float64)
    weights = pos_weights_from_labels(train_labels, cap=pos_weight_cap)
    return Manifest(records=out, pos_weights=weights)


def pos_weights_from_labels(labels: np.ndarray,
                            cap: float = 100.0) -> np.ndarray:
    """Per class: negatives / positives, clamped to ``cap`` when unbalanced."""
    labels = np.asarray(labels, dtype=np.float64)
    pos = labels.sum(axis=0)
    neg = labels.shape[0] - pos
    weights = np.empty_like(pos)
    for c in range(pos.size):
        if pos[c] == 0:
            warnings.warn(
                f"class {c} has no positive training samples; "
                f"pos_weight clamped to {cap}", stacklevel=2)
            weights[c] = cap
        else:
            weights[c] = min(neg[c] / pos[c], cap)
    return weights


def save_manifest(manifest: Manifest, path) -> None:
    """JSON-lines, one record per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in manifest.records:
            fh.write(json.dumps({"id": rec.id, "split": rec.split,
                                 "labels": rec.labels, "seed": rec.seed,
                                 "class": rec.class_id}) + "\n")


def load_manifest(path, pos_weight_cap: float = 100.0) -> Manifest:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            records.append(ManifestRecord(id=obj["id"], split=obj["split"],
                                          labels=list(obj["labels"]),
                                          seed=int(obj["seed"]),
                                          class_id=int(obj["class"])))
    if not records:
        raise ValueError(f"manifest {path} is empty")
    train_labels = np.array([r.labels for r in records if r.split == "train"],
                            dtype=np.float64)
    if train_labels.size == 0:
        raise ValueError(f"manifest {path} has no train records")
    return Manifest(records=records,
                    pos_weights=pos_weights_from_labels(
                        train_labels, cap=pos_weight_cap))


def build_samples(records: list[ManifestRecord],
                  gen: GeneratorConfig = DEFAULT_GEN) -> list[ModalitySample]:
    """Materialize samples from their (class, seed) manifest entries."""
    return [synth_sample(r.class_id, r.seed, gen) for r in records]


def write_stack_csv(stack: np.ndarray, path) -> None:
    """Frame/chunk stack (S, C, H, W) dump, same convention as sparse dumps:
    extents header, then one `s,h,w,c0,...` line per position."""
    stack = np.asarray(stack)
    s, c, h, w = stack.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("C,S,H,W\n")
        fh.write(f"{c},{s},{h},{w}\n")
        fh.write("s,h,w," + ",".join(f"c{i}" for i in range(c)) + "\n")
        for si in range(s):
            for hi in range(h):
                for wi in range(w):
                    vals = ",".join(repr(float(v)) for v in stack[si, :, hi, wi])
                    fh.write(f"{si},{hi},{wi},{vals}\n")
