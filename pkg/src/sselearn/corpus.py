"""Corpus ingestion: manifests, audio, alignments, voice activity, synthetic data."""
from __future__ import annotations

import json
import logging
import math
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.io import wavfile

from .errors import DataError, FormatError

log = logging.getLogger(__name__)

DEFAULT_SILENCE_LABELS = frozenset({"SIL", "sil", "sp", ""})


@dataclass(frozen=True, order=True)
class SpeechInterval:
    """A (file, start, end) locator in seconds."""

    file_id: str
    start: float
    end: float

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise DataError("waveform must be mono (1-D)")
        if self.sample_rate <= 0:
            raise DataError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.size == 0:
            raise DataError("empty waveform")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True, order=True)
class VASegment:
    file_id: str
    start_s: float
    end_s: float

    def __post_init__(self):
        if not 0 <= self.start_s < self.end_s:
            raise DataError(f"invalid VA segment {self}")

    def interval(self) -> SpeechInterval:
        return SpeechInterval(self.file_id, self.start_s, self.end_s)


@dataclass(frozen=True)
class Phone:
    label: str
    start: float
    end: float
    silence: bool = False


@dataclass
class PhonemeAlignment:
    """Per-file, time-sorted phone tokens."""

    files: dict[str, list[Phone]] = field(default_factory=dict)

    def __getitem__(self, file_id: str) -> list[Phone]:
        try:
            return self.files[file_id]
        except KeyError:
            raise DataError(f"no alignment for file {file_id!r}") from None

    def __contains__(self, file_id: str) -> bool:
        return file_id in self.files

    def __eq__(self, other):
        return isinstance(other, PhonemeAlignment) and self.files == other.files

    def update(self, other: "PhonemeAlignment") -> None:
        for fid, phones in other.files.items():
            if fid in self.files:
                raise DataError(f"alignment for {fid!r} given twice")
            self.files[fid] = phones

    def speech_phones(self, file_id: str) -> list[Phone]:
        return [p for p in self[file_id] if not p.silence]

    def n_speech_tokens(self) -> int:
        return sum(len(self.speech_phones(f)) for f in self.files)


@dataclass(frozen=True)
class ManifestEntry:
    file_id: str
    audio: Path
    alignment: Path | None = None
    vad: Path | None = None


@dataclass
class CorpusManifest:
    sample_rate: int
    entries: list[ManifestEntry]
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def file_ids(self) -> list[str]:
        return [e.file_id for e in self.entries]

    def entry(self, file_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.file_id == file_id:
                return e
        raise DataError(f"file {file_id!r} not in manifest")

    def load_alignments(self, silence_labels=DEFAULT_SILENCE_LABELS) -> PhonemeAlignment:
        out = PhonemeAlignment()
        seen: set[Path] = set()
        for e in self.entries:
            if e.alignment is None or e.alignment in seen:
                continue
            seen.add(e.alignment)
            out.update(load_alignment(e.alignment, silence_labels))
        return out


# ----------------------------------------------------------------------------
# manifest


def load_manifest(path) -> CorpusManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict) or "files" not in raw or "sample_rate" not in raw:
        raise FormatError(f"manifest {path} must hold 'sample_rate' and 'files'")
    sr = raw["sample_rate"]
    if not isinstance(sr, int) or sr <= 0:
        raise FormatError(f"manifest sample_rate must be a positive int, got {sr!r}")

    root = path.parent
    entries, seen = [], set()
    for i, item in enumerate(raw["files"]):
        if not isinstance(item, dict) or "id" not in item or "audio" not in item:
            raise FormatError(f"manifest entry {i} lacks 'id' or 'audio': {item!r}")
        fid = str(item["id"])
        if fid in seen:
            raise DataError(f"duplicate file id {fid!r} in manifest entry {i}")
        seen.add(fid)
        paths = {}
        for key in ("audio", "alignment", "vad"):
            if item.get(key) is None:
                paths[key] = None
                continue
            p = Path(item[key])
            p = p if p.is_absolute() else root / p
            if not p.exists():
                raise DataError(f"manifest entry {fid!r}: {key} file {p} does not exist")
            paths[key] = p
        entries.append(ManifestEntry(fid, paths["audio"], paths["alignment"], paths["vad"]))
    return CorpusManifest(sample_rate=sr, entries=entries, root=root)


def write_manifest(manifest: CorpusManifest, path) -> None:
    path = Path(path)

    def rel(p):
        if p is None:
            return None
        try:
            return os.path.relpath(p, path.parent)
        except ValueError:
            return str(p)

    files = []
    for e in manifest.entries:
        item = {"id": e.file_id, "audio": rel(e.audio)}
        if e.alignment is not None:
            item["alignment"] = rel(e.alignment)
        if e.vad is not None:
            item["vad"] = rel(e.vad)
        files.append(item)
    path.write_text(json.dumps({"sample_rate": manifest.sample_rate, "files": files}, indent=1))


# ----------------------------------------------------------------------------
# audio


def read_audio(entry: ManifestEntry | str | Path) -> Waveform:
    """Read a PCM16 or float32 WAV file; multi-channel input keeps channel 0."""
    path = entry.audio if isinstance(entry, ManifestEntry) else Path(entry)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", wavfile.WavFileWarning)
            sr, data = wavfile.read(path)
        for wmsg in caught:
            if "prematurely" in str(wmsg.message):
                raise FormatError(f"{path}: truncated audio data ({wmsg.message})")
    except FileNotFoundError:
        raise DataError(f"audio file not found: {path}") from None
    except (ValueError, EOFError, OSError, struct.error) as exc:
        raise FormatError(f"cannot decode {path}: {exc}") from None
    if data.ndim == 2:
        data = data[:, 0]
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        samples = data
    else:
        raise FormatError(f"{path}: unsupported sample encoding {data.dtype}")
    return Waveform(samples, int(sr))


def write_audio(w: Waveform, path) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, w.sample_rate, pcm)


# ----------------------------------------------------------------------------
# voice activity


def _frame_signal(x: np.ndarray, frame: int, hop: int) -> np.ndarray:
    n = 1 + (x.size - frame) // hop
    idx = np.arange(frame)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def energy_vad(
    w: Waveform,
    frame_ms: float = 25.0,
    hop_ms: float = 10.0,
    energy_quantile: float = 0.4,
    min_speech_ms: float = 120.0,
    min_gap_ms: float = 100.0,
    *,
    margin_db: float = 10.0,
    range_db: float = 30.0,
    file_id: str = "",
) -> list[VASegment]:
    """Quantile-thresholded log-energy voice activity detection.

    A frame is active when its Hann-windowed log-energy exceeds
    ``max(Q - margin, peak - range)`` where ``Q`` is the ``energy_quantile``
    quantile of all frame log-energies and ``peak`` their maximum. Every term
    shifts equally under a gain change, so segment boundaries are gain
    invariant. Segments run from the centre of their first active frame to
    the centre of their last one; gaps shorter than ``min_gap_ms`` are
    closed, then segments shorter than ``min_speech_ms`` are dropped.
    """
    if not frame_ms >= hop_ms > 0:
        raise ValueError("need frame_ms >= hop_ms > 0")
    x = w.samples.astype(np.float64)
    sr = w.sample_rate
    frame = int(round(frame_ms * sr / 1000))
    hop = int(round(hop_ms * sr / 1000))
    if x.size < frame or not np.any(x):
        return []

    frames = _frame_signal(x, frame, hop) * np.hanning(frame)
    energy = np.mean(frames**2, axis=1)
    silent = energy == 0.0
    log_e = np.log(np.where(silent, 1.0, energy))
    if np.all(silent):
        return []
    # exact-zero frames carry no level information and never count as speech
    log_e[silent] = log_e[~silent].min() - 1e3
    threshold = max(
        np.quantile(log_e, energy_quantile) - margin_db * math.log(10) / 10,
        log_e.max() - range_db * math.log(10) / 10,
    )
    active = (log_e > threshold) & ~silent

    centers = (np.arange(active.size) * hop + frame / 2) / sr
    runs = _runs(active)
    merged: list[list[float]] = []
    for a, b in runs:
        s, e = centers[a], centers[b - 1]
        if merged and (s - merged[-1][1]) * 1000 < min_gap_ms:
            merged[-1][1] = e
        else:
            merged.append([s, e])
    return [
        VASegment(file_id, float(s), float(e))
        for s, e in merged
        if (e - s) * 1000 >= min_speech_ms and e > s
    ]


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    d = np.diff(padded)
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


def load_vad(path) -> dict[str, list[VASegment]]:
    """Read a VAD TSV (``file_id, start_s, end_s``) grouped by file."""
    out: dict[str, list[VASegment]] = {}
    for lineno, cols in _read_tsv(path, 3):
        fid, s, e = cols[0], _float(cols[1], path, lineno), _float(cols[2], path, lineno)
        try:
            seg = VASegment(fid, s, e)
        except DataError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        segs = out.setdefault(fid, [])
        if segs and seg.start_s < segs[-1].end_s:
            raise FormatError(f"{path}:{lineno}: VA segments unsorted or overlapping")
        segs.append(seg)
    return out


def write_vad(segments: Iterable[VASegment], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in segments:
            fh.write(f"{s.file_id}\t{float(s.start_s)!r}\t{float(s.end_s)!r}\n")


# ----------------------------------------------------------------------------
# alignments


def _read_tsv(path, ncols: int):
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != ncols:
            raise FormatError(f"{path}:{lineno}: expected {ncols} tab-separated columns, got {len(cols)}")
        yield lineno, cols


def _float(text: str, path, lineno: int) -> float:
    try:
        v = float(text)
    except ValueError:
        raise FormatError(f"{path}:{lineno}: not a number: {text!r}") from None
    if not math.isfinite(v):
        raise FormatError(f"{path}:{lineno}: non-finite time {text!r}")
    return v


def load_alignment(path, silence_labels=DEFAULT_SILENCE_LABELS) -> PhonemeAlignment:
    files: dict[str, list[Phone]] = {}
    for lineno, (fid, s, e, label) in _read_tsv(path, 4):
        start, end = _float(s, path, lineno), _float(e, path, lineno)
        if not end > start:
            raise FormatError(f"{path}:{lineno}: phone end {end} not after start {start}")
        phones = files.setdefault(fid, [])
        if phones:
            prev = phones[-1]
            if start < prev.start:
                raise FormatError(f"{path}:{lineno}: rows not sorted by start time")
            if start < prev.end:
                raise FormatError(f"{path}:{lineno}: phone overlaps previous phone")
        phones.append(Phone(label, start, end, label in silence_labels))
    return PhonemeAlignment(files)


def write_alignment(alignment: PhonemeAlignment, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for fid, phones in alignment.files.items():
            for p in phones:
                fh.write(f"{fid}\t{float(p.start)!r}\t{float(p.end)!r}\t{p.label}\n")


# ----------------------------------------------------------------------------
# synthetic corpus


def phone_labels(inventory_size: int) -> list[str]:
    if inventory_size <= 26:
        return [chr(ord("a") + i) for i in range(inventory_size)]
    return [f"p{i}" for i in range(inventory_size)]


@dataclass
class SynthConfig:
    n_files: int = 50
    phone_inventory_size: int = 8
    seed: int = 0
    sample_rate: int = 16000
    file_duration_s: float = 10.0
    phone_ms: tuple[float, float] = (60.0, 150.0)
    speed_jitter: float = 0.1
    lexicon_size: int = 40
    lexicon_prob: float = 0.7
    word_len: tuple[int, int] = (2, 6)
    words_per_phrase: tuple[int, int] = (1, 5)
    pause_s: tuple[float, float] = (0.15, 0.3)
    noise_amp: float = 2e-3


def _phone_envelopes(inventory_size: int) -> np.ndarray:
    """Three formant frequencies per phone; fixed for a given inventory size."""
    rng = np.random.default_rng(7919 + inventory_size)
    bands = [(250.0, 900.0), (900.0, 2400.0), (2400.0, 5000.0)]
    return np.stack([rng.uniform(lo, hi, inventory_size) for lo, hi in bands], axis=1)


def _render_phone(formants, f0, n, sr, rng) -> np.ndarray:
    t = np.arange(n) / sr
    harmonics = np.arange(f0, 0.45 * sr, f0)
    # spectral envelope: sum of Gaussian bumps around the formants
    bw = 0.12 * formants + 60.0
    gain = np.exp(-0.5 * ((harmonics[:, None] - formants[None, :]) / bw[None, :]) ** 2).sum(axis=1)
    phases = rng.uniform(0, 2 * np.pi, harmonics.size)
    x = (gain[:, None] * np.sin(2 * np.pi * harmonics[:, None] * t[None, :] + phases[:, None])).sum(axis=0)
    x /= np.sqrt(np.mean(x**2)) + 1e-12
    ramp = min(n // 4, int(0.004 * sr))
    if ramp > 0:
        r = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, ramp))
        x[:ramp] *= r
        x[-ramp:] *= r[::-1]
    return x


def generate_synthetic_corpus(
    n_files: int,
    phone_inventory_size: int,
    seed: int,
    out_dir,
    config: SynthConfig | None = None,
) -> CorpusManifest:
    """Write a deterministic toy speech corpus with exact phone alignments.

    Each phone label owns a fixed formant pattern rendered over a harmonic
    source. Utterances are phrases of words separated by pauses; words come
    from a Zipf-weighted lexicon or are drawn fresh at random, so phone
    ngrams recur across files. Outputs ``<id>.wav``, ``<id>.tsv`` and
    ``manifest.json`` in ``out_dir``.
    """
    if phone_inventory_size < 4:
        raise ValueError("phone_inventory_size must be >= 4")
    if n_files < 1:
        raise ValueError("n_files must be >= 1")
    cfg = config or SynthConfig()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None

    sr = cfg.sample_rate
    labels = phone_labels(phone_inventory_size)
    formants = _phone_envelopes(phone_inventory_size)
    rng = np.random.default_rng(seed)

    lexicon = [
        rng.integers(0, phone_inventory_size, rng.integers(cfg.word_len[0], cfg.word_len[1] + 1))
        for _ in range(cfg.lexicon_size)
    ]
    zipf = 1.0 / np.arange(1, cfg.lexicon_size + 1)
    zipf /= zipf.sum()

    def draw_word():
        if rng.random() < cfg.lexicon_prob:
            return lexicon[rng.choice(cfg.lexicon_size, p=zipf)]
        return rng.integers(0, phone_inventory_size, rng.integers(cfg.word_len[0], cfg.word_len[1] + 1))

    entries = []
    total_n = int(round(cfg.file_duration_s * sr))
    for k in range(n_files):
        fid = f"utt{k:04d}"
        speed = 1.0 + rng.uniform(-cfg.speed_jitter, cfg.speed_jitter)
        f0 = rng.uniform(100.0, 180.0)
        signal = np.zeros(total_n)
        phones: list[Phone] = []
        pos = int(rng.uniform(*cfg.pause_s) * sr)
        while True:
            words = [draw_word() for _ in range(rng.integers(cfg.words_per_phrase[0], cfg.words_per_phrase[1] + 1))]
            ids = np.concatenate(words)
            lens = (rng.uniform(*cfg.phone_ms, ids.size) * speed * sr / 1000).astype(int)
            tail = int(cfg.pause_s[0] * sr)
            if pos + lens.sum() + tail > total_n:
                if phones:
                    break
                # guarantee one phrase even in very short files
                lens = np.maximum(lens * (total_n - pos - tail) // max(lens.sum(), 1), 1)
            if phones and phones[-1].end * sr < pos:
                phones.append(Phone("SIL", phones[-1].end, pos / sr, True))
            elif not phones and pos > 0:
                phones.append(Phone("SIL", 0.0, pos / sr, True))
            for pid, n in zip(ids, lens):
                seg = _render_phone(formants[pid], f0 * (1 + rng.uniform(-0.03, 0.03)), n, sr, rng)
                signal[pos : pos + n] = 0.25 * seg
                phones.append(Phone(labels[pid], pos / sr, (pos + n) / sr, False))
                pos += n
            pos += int(rng.uniform(*cfg.pause_s) * sr)
            if pos >= total_n - tail:
                break
        if phones[-1].end * sr < total_n:
            phones.append(Phone("SIL", phones[-1].end, total_n / sr, True))
        signal += cfg.noise_amp * rng.standard_normal(total_n)

        wav_path = out / f"{fid}.wav"
        ali_path = out / f"{fid}.tsv"
        write_audio(Waveform(signal.astype(np.float32), sr), wav_path)
        write_alignment(PhonemeAlignment({fid: phones}), ali_path)
        entries.append(ManifestEntry(fid, wav_path, ali_path))

    manifest = CorpusManifest(sample_rate=sr, entries=entries, root=out)
    write_manifest(manifest, out / "manifest.json")
    log.info("synthetic corpus: %d files in %s", n_files, out)
    return load_manifest(out / "manifest.json")
