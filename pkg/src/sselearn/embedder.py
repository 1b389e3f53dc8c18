"""Speech sequence encoder and its NT-Xent contrastive training.

The loss and its gradient with respect to the projected embeddings are
computed in closed form (float64 numpy); torch autograd carries that
gradient back through the encoder layers.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .corpus import SpeechInterval
from .errors import DataError, FormatError, NumericalError
from .features import FeatureSequence, FeatureStore
from .sampling import FrameSpan, PositivePair

log = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    input_dim: int = 40
    conv_channels: int = 64
    conv_kernel: int = 4
    conv_stride: int = 1
    dropout_p: float = 0.1
    n_heads: int = 4
    ffn_dim: int = 128
    projection_dim: int = 64
    temperature: float = 0.15
    learning_rate: float = 1e-4
    batch_pairs: int = 64
    max_steps: int = 5000
    patience: int = 500
    eval_every: int = 100
    dev_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.conv_channels % 2:
            raise ValueError("conv_channels must be even")
        if self.conv_channels % self.n_heads:
            raise ValueError("conv_channels must be divisible by n_heads")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_pairs < 2:
            raise ValueError("batch_pairs must be >= 2")


def sinusoidal_table(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float32)[:, None]
    inv = torch.exp(torch.arange(0, dim, 2, dtype=torch.float32) * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim)
    table[:, 0::2] = torch.sin(pos * inv)
    table[:, 1::2] = torch.cos(pos * inv)[:, : dim // 2]
    return table


class TransformerLayer(nn.Module):
    """Post-norm self-attention + feed-forward block with padding mask.

    Dropout acts on the residual branches and the feed-forward hidden layer,
    not on attention weights.
    """

    def __init__(self, dim: int, n_heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.ff1 = nn.Linear(dim, ffn_dim)
        self.ff2 = nn.Linear(ffn_dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, h: torch.Tensor, pad: torch.Tensor) -> torch.Tensor:
        b, t, c = h.shape
        q, k, v = self.qkv(h).view(b, t, 3, self.n_heads, c // self.n_heads).permute(2, 0, 3, 1, 4)
        att = nn.functional.scaled_dot_product_attention(q, k, v, attn_mask=~pad[:, None, None, :])
        att = self.out(att.transpose(1, 2).reshape(b, t, c))
        h = self.norm1(h + self.dropout(att))
        ff = self.ff2(self.dropout(torch.relu(self.ff1(h))))
        return self.norm2(h + self.dropout(ff))


class EncoderModel(nn.Module):
    """LayerNorm -> Conv1d + GLU -> +positions -> Transformer layer -> max-pool.

    The convolution emits ``2C`` channels that the GLU gates down to ``C``.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.conv_channels
        self.input_norm = nn.LayerNorm(cfg.input_dim)
        self.conv = nn.Conv1d(cfg.input_dim, 2 * c, cfg.conv_kernel, stride=cfg.conv_stride)
        self.glu = nn.GLU(dim=1)
        self.dropout = nn.Dropout(cfg.dropout_p)
        self.transformer = TransformerLayer(c, cfg.n_heads, cfg.ffn_dim, cfg.dropout_p)
        self.head = nn.Sequential(
            nn.Linear(c, cfg.projection_dim), nn.ReLU(), nn.Linear(cfg.projection_dim, cfg.projection_dim)
        )

    def out_lengths(self, lengths: torch.Tensor) -> torch.Tensor:
        return (lengths - self.cfg.conv_kernel) // self.cfg.conv_stride + 1

    def forward(self, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """``x`` is (B, T, D) zero padded; returns pre-head embeddings (B, C)."""
        h = self.input_norm(x)
        h = self.glu(self.conv(h.transpose(1, 2))).transpose(1, 2)
        h = self.dropout(h)
        t = h.shape[1]
        h = h + sinusoidal_table(t, h.shape[2])[None]
        pad = torch.arange(t)[None, :] >= self.out_lengths(lengths)[:, None]
        h = self.transformer(h, pad)
        h = h.masked_fill(pad[:, :, None], float("-inf"))
        return h.max(dim=1).values


def _batch_tensor(seqs: Sequence[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = np.array([s.shape[0] for s in seqs])
    x = np.zeros((len(seqs), lengths.max(), seqs[0].shape[1]), dtype=np.float32)
    for i, s in enumerate(seqs):
        x[i, : s.shape[0]] = s
    return torch.from_numpy(x), torch.from_numpy(lengths)


def _check_lengths(model: EncoderModel, seqs: Sequence[np.ndarray]) -> None:
    k = model.cfg.conv_kernel
    for s in seqs:
        if s.shape[0] < k:
            raise DataError(f"sequence of {s.shape[0]} frames is shorter than the conv kernel ({k})")


def encode(model: EncoderModel, f: FeatureSequence | np.ndarray, mode: str = "inference") -> np.ndarray:
    """Pre-head embedding of one sequence (dropout only in ``training`` mode)."""
    data = f.data if isinstance(f, FeatureSequence) else np.asarray(f, dtype=np.float32)
    _check_lengths(model, [data])
    was_training = model.training
    model.train(mode == "training")
    try:
        with torch.no_grad():
            x, lengths = _batch_tensor([data])
            return model(x, lengths)[0].numpy().copy()
    finally:
        model.train(was_training)


def project(model: EncoderModel, z: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        return model.head(torch.as_tensor(np.asarray(z, dtype=np.float32))).numpy()


# ----------------------------------------------------------------------------
# loss


def ntxent_loss(z: np.ndarray, temperature: float) -> tuple[float, np.ndarray]:
    """NT-Xent over 2n embeddings where rows 2k and 2k+1 form a positive pair.

    Returns the mean of the 2n per-anchor losses and its exact gradient with
    respect to the unnormalized rows of ``z``.
    """
    z = np.asarray(z, dtype=np.float64)
    m = z.shape[0]
    if m < 2 or m % 2:
        raise ValueError("need an even number (>= 2) of embeddings")
    if not np.all(np.isfinite(z)):
        raise NumericalError("non-finite embedding in loss input")
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0):
        raise NumericalError(f"zero-norm embedding at rows {np.flatnonzero(norms == 0).tolist()}")
    u = z / norms[:, None]
    logits = u @ u.T / temperature
    np.fill_diagonal(logits, -np.inf)
    partner = np.arange(m) ^ 1
    shift = logits.max(axis=1, keepdims=True)
    expl = np.exp(logits - shift)
    denom = expl.sum(axis=1)
    losses = -(logits[np.arange(m), partner] - shift[:, 0]) + np.log(denom)
    loss = losses.mean()

    # d loss / d logits, then through the similarity matrix and normalization
    g = expl / denom[:, None]
    g[np.arange(m), partner] -= 1.0
    g /= m
    du = (g + g.T) @ u / temperature
    dz = (du - u * np.sum(du * u, axis=1, keepdims=True)) / norms[:, None]
    return float(loss), dz


# ----------------------------------------------------------------------------
# training


@dataclass
class TrainLog:
    rows: list[tuple[int, float, float | None]] = field(default_factory=list)
    best_step: int = 0
    best_dev_loss: float | None = None
    steps: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step,loss,dev_loss\n")
            for step, loss, dev in self.rows:
                fh.write(f"{step},{loss:.8f},{'' if dev is None else f'{dev:.8f}'}\n")


def _pair_arrays(pairs: Sequence[PositivePair], store: FeatureStore) -> list[tuple[FrameSpan, FrameSpan]]:
    spans = []
    for i, p in enumerate(pairs):
        a, b = p.frame_spans(store)
        for sp in (a, b):
            if sp.seq_ref not in store or sp.e > store.num_frames(sp.seq_ref):
                raise DataError(f"pair {i}: span {sp} not resolvable to features")
        spans.append((a, b))
    return spans


def _batch_inputs(spans, idx, store):
    seqs = []
    for i in idx:
        a, b = spans[i]
        seqs.append(store.span(a.seq_ref, a.s, a.e))
        seqs.append(store.span(b.seq_ref, b.s, b.e))
    return _batch_tensor(seqs)


def _dev_loss(model, spans, dev_idx, store, cfg) -> float:
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for k in range(0, len(dev_idx), cfg.batch_pairs):
            idx = dev_idx[k : k + cfg.batch_pairs]
            if len(idx) < 2:
                continue
            x, lengths = _batch_inputs(spans, idx, store)
            p = model.head(model(x, lengths))
            loss, _ = ntxent_loss(p.numpy(), cfg.temperature)
            total += loss * len(idx)
            count += len(idx)
    model.train()
    return total / count


def train(
    pairs: Sequence[PositivePair], store: FeatureStore, cfg: EncoderConfig
) -> tuple[EncoderModel, TrainLog]:
    """Fit a freshly initialized encoder on positive pairs with Adam.

    Holds out ``dev_fraction`` of the pairs, evaluates them every
    ``eval_every`` steps, stops after ``patience`` steps without improvement
    and returns the best-dev parameters.
    """
    if not pairs:
        raise DataError("cannot train on an empty pair list")
    spans = _pair_arrays(pairs, store)
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    model = EncoderModel(cfg)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)

    order = rng.permutation(len(spans))
    n_dev = int(round(cfg.dev_fraction * len(spans)))
    if n_dev < 2 or len(spans) - n_dev < 2:
        n_dev = 0
    dev_idx, train_idx = order[:n_dev], order[n_dev:]
    n = min(cfg.batch_pairs, len(train_idx))
    if n < 1:
        raise DataError("not enough pairs to form a batch")

    tlog = TrainLog()
    best_state, best_dev, best_step = copy.deepcopy(model.state_dict()), math.inf, 0
    step = 0
    while step < cfg.max_steps:
        perm = rng.permutation(train_idx)
        n_batches = max(1, len(perm) // n)
        for b in range(n_batches):
            if step >= cfg.max_steps:
                break
            idx = perm[b * n : (b + 1) * n]
            x, lengths = _batch_inputs(spans, idx, store)
            z = model(x, lengths)
            p = model.head(z)
            try:
                loss, grad = ntxent_loss(p.detach().numpy(), cfg.temperature)
            except NumericalError as exc:
                raise NumericalError(f"step {step}, batch pairs {idx.tolist()}: {exc}") from None
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at step {step}, batch pairs {idx.tolist()}")
            opt.zero_grad()
            p.backward(torch.from_numpy(grad.astype(np.float32)))
            opt.step()
            step += 1

            dev = None
            if step % cfg.eval_every == 0 or step == cfg.max_steps:
                dev = _dev_loss(model, spans, dev_idx, store, cfg) if n_dev else loss
                if dev < best_dev:
                    best_dev, best_step = dev, step
                    best_state = copy.deepcopy(model.state_dict())
            tlog.rows.append((step, loss, dev))
            if step - best_step >= cfg.patience:
                log.info("early stop at step %d (best %d, dev %.4f)", step, best_step, best_dev)
                break
        else:
            continue
        break

    model.load_state_dict(best_state)
    model.eval()
    tlog.steps = step
    tlog.best_step = best_step
    tlog.best_dev_loss = None if math.isinf(best_dev) else best_dev
    return model, tlog


# ----------------------------------------------------------------------------
# inference


def embed_sequences(model: EncoderModel, seqs: Sequence[np.ndarray], batch_size: int = 256) -> np.ndarray:
    """L2-normalized pre-head embeddings, batched by length."""
    if len(seqs) == 0:
        return np.zeros((0, model.cfg.conv_channels), dtype=np.float32)
    _check_lengths(model, seqs)
    order = np.argsort([s.shape[0] for s in seqs], kind="stable")
    out = np.zeros((len(seqs), model.cfg.conv_channels), dtype=np.float32)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for k in range(0, len(order), batch_size):
                idx = order[k : k + batch_size]
                x, lengths = _batch_tensor([seqs[i] for i in idx])
                out[idx] = model(x, lengths).numpy()
    finally:
        model.train(was_training)
    return normalize_rows(out)


def normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise NumericalError("zero-norm embedding cannot be normalized")
    return (x / norms).astype(np.float32)


def embed_intervals(
    model: EncoderModel, intervals: Sequence[SpeechInterval], store: FeatureStore, batch_size: int = 256
) -> np.ndarray:
    return embed_sequences(model, [store.interval(iv) for iv in intervals], batch_size)


def maxpool_baseline(f: FeatureSequence | np.ndarray) -> np.ndarray:
    data = f.data if isinstance(f, FeatureSequence) else np.asarray(f)
    pooled = data.max(axis=0).astype(np.float64)
    norm = np.linalg.norm(pooled)
    if norm == 0:
        raise NumericalError("max-pooled vector has zero norm")
    return pooled / norm


def maxpool_intervals(intervals: Sequence[SpeechInterval], store: FeatureStore) -> np.ndarray:
    return np.stack([maxpool_baseline(store.interval(iv)) for iv in intervals]).astype(np.float32)


# ----------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"SSEM"
CKPT_VERSION = 1


def save_checkpoint(model: EncoderModel, path) -> None:
    cfg = json.dumps(asdict(model.cfg), sort_keys=True).encode()
    state = model.state_dict()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(cfg)) + cfg)
        fh.write(struct.pack("<I", len(state)))
        for name, t in state.items():
            arr = t.detach().numpy().astype("<f4")
            key = name.encode()
            fh.write(struct.pack("<I", len(key)) + key)
            fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> EncoderModel:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    try:
        version, n_cfg = struct.unpack_from("<II", raw, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        cfg = EncoderConfig(**json.loads(raw[pos : pos + n_cfg]))
        pos += n_cfg
        (n_tensors,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        model = EncoderModel(cfg)
        expected = model.state_dict()
        if n_tensors != len(expected):
            raise FormatError(f"{path}: {n_tensors} tensors, model needs {len(expected)}")
        state = {}
        for _ in range(n_tensors):
            (klen,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4 : pos + 4 + klen].decode()
            pos += 4 + klen
            (ndim,) = struct.unpack_from("<I", raw, pos)
            shape = struct.unpack_from(f"<{ndim}Q", raw, pos + 4)
            pos += 4 + 8 * ndim
            count = int(np.prod(shape)) if ndim else 1
            if pos + 4 * count > len(raw):
                raise FormatError(f"{path}: truncated tensor {name}")
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
            if name not in expected or tuple(expected[name].shape) != tuple(shape):
                raise FormatError(f"{path}: unexpected tensor {name} {shape}")
            state[name] = torch.from_numpy(arr.copy())
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint ({exc})") from None
    model.load_state_dict(state)
    model.eval()
    return model
