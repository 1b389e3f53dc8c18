"""Frame-level features: built-in MFCC and the binary ``.ssef`` interchange format."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .corpus import SpeechInterval, Waveform
from .errors import DataError, FormatError

MAGIC = b"SSEF"
VERSION = 1
_HEADER = struct.Struct("<4sIIfQ")
LOG_FLOOR = 1e-10


@dataclass
class FeatureSequence:
    """T x D float32 frames at ``frame_rate`` frames per second."""

    data: np.ndarray
    frame_rate: float
    source: SpeechInterval | None = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise DataError(f"feature matrix must be T x D with T >= 1, got {self.data.shape}")
        if self.frame_rate <= 0:
            raise DataError("frame_rate must be positive")
        if not np.all(np.isfinite(self.data)):
            raise DataError("feature matrix contains non-finite values")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        return (
            isinstance(other, FeatureSequence)
            and self.frame_rate == other.frame_rate
            and self.source == other.source
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


def num_frames(n_samples: int, frame: int, hop: int) -> int:
    """Frames under the no-padding convention; the partial tail frame is dropped."""
    if n_samples < frame:
        return 0
    return (n_samples - frame) // hop + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters evenly spaced on the mel scale from 0 Hz to Nyquist."""
    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bins = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    fb = np.zeros((n_mels, bins.size))
    for m in range(n_mels):
        lo, mid, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (bins - lo) / (mid - lo)
        down = (hi - bins) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def compute_mfcc(
    w: Waveform,
    n_coeffs: int = 40,
    frame_ms: float = 25.0,
    hop_ms: float = 10.0,
    *,
    n_mels: int = 40,
    preemphasis: float = 0.97,
    source: SpeechInterval | None = None,
) -> FeatureSequence:
    sr = w.sample_rate
    frame = int(round(frame_ms * sr / 1000))
    hop = int(round(hop_ms * sr / 1000))
    x = w.samples.astype(np.float64)
    n = num_frames(x.size, frame, hop)
    if n < 1:
        raise DataError(f"waveform of {x.size} samples is shorter than one {frame}-sample frame")
    if n_coeffs > n_mels:
        raise ValueError("n_coeffs cannot exceed n_mels")

    x = np.append(x[0], x[1:] - preemphasis * x[:-1])
    idx = np.arange(frame)[None, :] + hop * np.arange(n)[:, None]
    frames = x[idx] * np.hanning(frame)
    n_fft = 1 << (frame - 1).bit_length()
    power = np.abs(np.fft.rfft(frames, n_fft, axis=1)) ** 2 / n_fft
    mel = power @ mel_filterbank(n_mels, n_fft, sr).T
    logmel = np.log(np.maximum(mel, LOG_FLOOR))
    ceps = dct(logmel, type=2, norm="ortho", axis=1)[:, :n_coeffs]
    if source is None:
        source = SpeechInterval("", 0.0, n * hop_ms / 1000)
    return FeatureSequence(ceps.astype(np.float32), 1000.0 / hop_ms, source)


def mean_variance_stats(f: FeatureSequence) -> tuple[np.ndarray, np.ndarray]:
    mean = f.data.mean(axis=0)
    std = f.data.std(axis=0)
    return mean, np.where(std > 1e-8, std, 1.0)


def normalize(f: FeatureSequence, stats=None) -> FeatureSequence:
    """Per-utterance mean-variance normalization (or with given ``(mean, std)``)."""
    mean, std = stats if stats is not None else mean_variance_stats(f)
    return FeatureSequence((f.data - mean) / std, f.frame_rate, f.source)


def slice_frames(f: FeatureSequence, s: int, e: int) -> FeatureSequence:
    if not 0 <= s < e <= f.num_frames:
        raise IndexError(f"frame slice [{s}, {e}) outside [0, {f.num_frames}]")
    src = None
    if f.source is not None:
        r = f.frame_rate
        src = SpeechInterval(f.source.file_id, f.source.start + s / r, f.source.start + e / r)
    return FeatureSequence(f.data[s:e], f.frame_rate, src)


# ----------------------------------------------------------------------------
# .ssef files


def write_features(f: FeatureSequence, path) -> None:
    header = _HEADER.pack(MAGIC, VERSION, f.dim, f.frame_rate, f.num_frames)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(f.data.astype("<f4", copy=False).tobytes(order="C"))


def read_features(path, file_id: str | None = None) -> FeatureSequence:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"feature file not found: {path}") from None
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, dim, rate, n = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    body = raw[_HEADER.size :]
    expected = n * dim * 4
    if len(body) < expected:
        raise FormatError(f"{path}: truncated body ({len(body)} of {expected} bytes)")
    if len(body) > expected:
        raise FormatError(f"{path}: {len(body) - expected} trailing bytes beyond header dimensions")
    data = np.frombuffer(body, dtype="<f4").reshape(n, dim)
    fid = path.stem if file_id is None else file_id
    return FeatureSequence(data.copy(), float(rate), SpeechInterval(fid, 0.0, n / rate))


def feature_path(features_dir, file_id: str) -> Path:
    return Path(features_dir) / f"{file_id}.ssef"


# ----------------------------------------------------------------------------
# in-memory access


class FeatureStore:
    """Named feature sequences addressed by frame spans or by time intervals.

    Whole-file sequences are keyed by file id. Augmented variants are added
    under their own keys. Normalization statistics are kept per file so
    variants of a file can be normalized consistently with it.
    """

    def __init__(self, frame_rate: float, normalize_features: bool = True):
        self.frame_rate = frame_rate
        self.normalize_features = normalize_features
        self._seqs: dict[str, np.ndarray] = {}
        self.stats: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    @classmethod
    def from_dir(cls, features_dir, file_ids, normalize_features: bool = True) -> "FeatureStore":
        store = None
        for fid in file_ids:
            f = read_features(feature_path(features_dir, fid), fid)
            if store is None:
                store = cls(f.frame_rate, normalize_features)
            elif not math.isclose(f.frame_rate, store.frame_rate):
                raise DataError(f"{fid}: frame rate {f.frame_rate} differs from {store.frame_rate}")
            store.add_file(fid, f)
        if store is None:
            raise DataError("no feature files to load")
        return store

    def add_file(self, file_id: str, f: FeatureSequence) -> None:
        if self.normalize_features:
            self.stats[file_id] = mean_variance_stats(f)
            f = normalize(f, self.stats[file_id])
        self._seqs[file_id] = f.data

    def add_variant(self, key: str, file_id: str, f: FeatureSequence) -> None:
        if self.normalize_features:
            f = normalize(f, self.stats[file_id])
        self._seqs[key] = f.data

    def __contains__(self, key) -> bool:
        return key in self._seqs

    def __len__(self) -> int:
        return len(self._seqs)

    def keys(self):
        return self._seqs.keys()

    @property
    def dim(self) -> int:
        return next(iter(self._seqs.values())).shape[1]

    def num_frames(self, key: str) -> int:
        return self._seqs[key].shape[0]

    def span(self, key: str, s: int, e: int) -> np.ndarray:
        seq = self._seqs.get(key)
        if seq is None:
            raise DataError(f"unknown feature sequence {key!r}")
        if not 0 <= s < e <= seq.shape[0]:
            raise DataError(f"span [{s}, {e}) outside sequence {key!r} of {seq.shape[0]} frames")
        return seq[s:e]

    def frames_of(self, iv: SpeechInterval) -> tuple[int, int]:
        s = int(round(iv.start * self.frame_rate))
        e = int(round(iv.end * self.frame_rate))
        return s, e

    def interval(self, iv: SpeechInterval) -> np.ndarray:
        s, e = self.frames_of(iv)
        return self.span(iv.file_id, s, e)
