"""Multi-label BCE, AdamW, the epoch loop and checkpoint files.

Checkpoint layout (little-endian)::

    "AVCK" u16 version
    u32 config_len, config (utf-8 ``key=value`` lines)
    repeated: u16 name_len, name, u8 rank, u32 extents[rank], f64 data[prod(extents)]
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import logging
import math
import os
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import numcore as nc
from .data import CorruptFileError, Dataset, batch_iter
from .metrics import MetricReport, evaluate
from .models import ArchSpec, Model, build_model, forward, load_parameters
from .numcore import NumericalError, ShapeError, Tensor

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def bce_loss(probs: Tensor, labels: Tensor) -> Tensor:
    """Per-class binary cross-entropy, summed over classes and averaged over rows."""
    if probs.shape != labels.shape or probs.ndim != 2:
        raise ShapeError(f"bce_loss: probs {probs.shape} and labels {labels.shape} must be equal [N, C]")
    y = labels.data
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("bce_loss: labels must be 0 or 1")
    n = probs.shape[0]
    p = np.clip(probs.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p)) / n

    def back(g):
        # derivative taken at the clamped value
        return (float(g) * (p - y) / (p * (1.0 - p)) / n, None)

    return nc.record("bce", np.array(loss), (probs, labels), back)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 20
    batch_size: int = 256
    dropout_rate: float = 0.4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.weight_decay < 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.epsilon <= 0:
            raise ValueError("invalid AdamW constants")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        out = {}
        for f in fields(cls):
            if f.name in d:
                out[f.name] = int(d[f.name]) if f.type in ("int", int) else float(d[f.name])
        return cls(**out)


@dataclass
class OptState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], s: OptState, cfg: TrainConfig) -> OptState:
    """One decoupled-weight-decay Adam update, in place on ``params`` and ``s``."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}; step aborted")
    s.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** s.t
    c2 = 1.0 - b2 ** s.t
    lr = cfg.learning_rate
    decay = 1.0 - lr * cfg.weight_decay
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = s.m.get(name)
        v = s.v.get(name)
        if m is None:
            m = s.m[name] = np.zeros_like(p.data)
            v = s.v[name] = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
        p.data *= decay
        p.data -= step
    return s


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"AVCK"
CKPT_VERSION = 1
INIT_SCHEME = "he_uniform:relu-fc;xavier_uniform:linear-fc,attention,gate,classifier;zeros:bias"


@dataclass
class Checkpoint:
    arch: ArchSpec
    config: TrainConfig
    params: dict[str, np.ndarray]
    opt: OptState = field(default_factory=OptState)
    epoch: int = 0
    init_seed: int = 0
    version: int = CKPT_VERSION

    @classmethod
    def from_model(cls, model: Model, cfg: TrainConfig, opt: OptState | None = None, epoch: int = 0) -> "Checkpoint":
        snap = OptState(
            {k: v.copy() for k, v in opt.m.items()}, {k: v.copy() for k, v in opt.v.items()}, opt.t
        ) if opt else OptState()
        return cls(model.spec, cfg, {k: t.data.copy() for k, t in model.params.items()}, snap, epoch, model.seed)

    def to_model(self) -> Model:
        m = build_model(self.arch, self.init_seed)
        load_parameters(m, self.params)
        m.dropout_rate = self.config.dropout_rate
        return m


def _config_text(c: Checkpoint) -> bytes:
    lines = [f"format=AVCK/{c.version}", f"epoch={c.epoch}", f"init.seed={c.init_seed}",
             f"init.scheme={INIT_SCHEME}", f"opt.step={c.opt.t}"]
    lines += [f"arch.{k}={v}" for k, v in asdict(c.arch).items()]
    lines += [f"train.{k}={v!r}" for k, v in asdict(c.config).items()]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _tensor_bytes(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return b"".join((
        struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim),
        struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes(),
    ))


def encode_checkpoint(c: Checkpoint) -> bytes:
    cfg = _config_text(c)
    parts = [CKPT_MAGIC, struct.pack("<H", c.version), struct.pack("<I", len(cfg)), cfg]
    for name, arr in c.params.items():
        parts.append(_tensor_bytes(f"param/{name}", arr))
    for name in c.params:
        if name in c.opt.m:
            parts.append(_tensor_bytes(f"adam_m/{name}", c.opt.m[name]))
            parts.append(_tensor_bytes(f"adam_v/{name}", c.opt.v[name]))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(c: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(c))
    os.replace(tmp, path)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 10:
        raise CorruptFileError("checkpoint truncated before header", len(buf))
    if buf[:4] != CKPT_MAGIC:
        raise CorruptFileError(f"bad checkpoint magic {buf[:4]!r}", 0)
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != CKPT_VERSION:
        raise CorruptFileError(f"unsupported checkpoint version {version}", 4)
    body, (stored,) = buf[:-4], struct.unpack("<I", buf[-4:])
    computed = zlib.crc32(body)
    if stored != computed:
        raise CorruptFileError(f"CRC32 mismatch: stored {stored:08x}, computed {computed:08x}", len(body))

    def need(off: int, n: int, what: str) -> None:
        if off + n > len(body):
            raise CorruptFileError(f"truncated checkpoint while reading {what}", off)

    off = 6
    need(off, 4, "config length")
    (clen,) = struct.unpack_from("<I", body, off)
    off += 4
    need(off, clen, "config block")
    conf = {}
    for line in body[off:off + clen].decode("utf-8").splitlines():
        k, _, v = line.partition("=")
        conf[k] = v
    off += clen
    tensors: dict[str, np.ndarray] = {}
    while off < len(body):
        need(off, 2, "tensor name length")
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        need(off, nlen + 1, "tensor name")
        name = body[off:off + nlen].decode("utf-8")
        off += nlen
        rank = body[off]
        off += 1
        need(off, 4 * rank, f"extents of {name}")
        shape = struct.unpack_from(f"<{rank}I", body, off)
        off += 4 * rank
        size = 8 * math.prod(shape)
        need(off, size, f"data of {name}")
        tensors[name] = np.frombuffer(body, dtype="<f8", count=math.prod(shape), offset=off).reshape(shape).copy()
        off += size

    arch = ArchSpec.from_dict({k[5:]: v for k, v in conf.items() if k.startswith("arch.")})
    cfg = TrainConfig.from_dict({k[6:]: v for k, v in conf.items() if k.startswith("train.")})
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    opt = OptState(
        {k[7:]: v for k, v in tensors.items() if k.startswith("adam_m/")},
        {k[7:]: v for k, v in tensors.items() if k.startswith("adam_v/")},
        int(conf.get("opt.step", 0)),
    )
    return Checkpoint(arch, cfg, params, opt, int(conf.get("epoch", 0)), int(conf.get("init.seed", 0)), version)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_good: Checkpoint | None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    report: MetricReport | None
    seconds: float = 0.0

    def csv_row(self) -> list:
        gap = self.report.gap if self.report else float("nan")
        f1 = self.report.f1 if self.report else float("nan")
        return [self.epoch, repr(self.loss), repr(gap), repr(f1), f"{self.seconds:.3f}"]


HISTORY_HEADER = ("epoch", "loss", "gap", "f1", "seconds")


@dataclass
class FitResult:
    history: list[EpochRecord]
    checkpoint: Checkpoint


def step_seed(seed: int, epoch: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, step]).generate_state(1)[0])


def train_step(model: Model, batch, opt: OptState, cfg: TrainConfig, dropout_seed: int) -> float:
    model.zero_grad()
    probs = forward(model, batch.visual, batch.audio, training=True, seed=dropout_seed,
                    dropout_rate=cfg.dropout_rate)
    loss = bce_loss(probs, batch.labels)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericalError("non-finite loss")
    nc.backward(nc.Graph.from_root(loss), loss)
    grads = {k: t.grad for k, t in model.params.items() if t.grad is not None}
    adamw_step(model.params, grads, opt, cfg)
    return value


def _check_dims(model: Model, ds: Dataset, which: str) -> None:
    s, h = model.spec, ds.header
    if (h.visual_dim, h.audio_dim, h.num_classes) != (s.visual_dim, s.audio_dim, s.num_classes):
        raise ValueError(
            f"{which} set dims (visual={h.visual_dim}, audio={h.audio_dim}, classes={h.num_classes}) "
            f"do not match {s.label} (visual={s.visual_dim}, audio={s.audio_dim}, classes={s.num_classes})"
        )


def fit(
    model: Model,
    train_set: Dataset,
    valid_set: Dataset | None,
    cfg: TrainConfig,
    *,
    k: int = 20,
    threshold: float = 0.5,
    checkpoint_dir=None,
    per_epoch_checkpoints: bool = False,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> FitResult:
    """Train for ``cfg.epochs`` epochs; shuffling and dropout derive from ``cfg.seed``."""
    cfg.validate()
    _check_dims(model, train_set, "training")
    if valid_set is not None:
        _check_dims(model, valid_set, "validation")
    model.dropout_rate = cfg.dropout_rate
    opt = OptState()
    history: list[EpochRecord] = []
    last_good = Checkpoint.from_model(model, cfg, opt, epoch=0)
    ckdir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        try:
            for step, batch in enumerate(batch_iter(train_set, cfg.batch_size, cfg.seed, epoch)):
                value = train_step(model, batch, opt, cfg, step_seed(cfg.seed, epoch, step))
                n = batch.labels.shape[0]
                total += value * n
                count += n
        except NumericalError as e:
            if ckdir:
                save_checkpoint(last_good, ckdir / "last_good.avck")
            raise TrainingAborted(f"epoch {epoch}: {e}", last_good) from e
        rep = evaluate(model, valid_set, k, threshold) if valid_set is not None and len(valid_set) else None
        rec = EpochRecord(epoch, total / max(count, 1), rep, time.perf_counter() - t0)
        history.append(rec)
        last_good = Checkpoint.from_model(model, cfg, opt, epoch)
        if ckdir and per_epoch_checkpoints:
            save_checkpoint(last_good, ckdir / f"epoch{epoch:03d}.avck")
        log.info("epoch %d loss %.6f%s", epoch, rec.loss, f" gap {rep.gap:.4f} f1 {rep.f1:.4f}" if rep else "")
        if on_epoch:
            on_epoch(rec)
    if ckdir:
        save_checkpoint(last_good, ckdir / "final.avck")
    return FitResult(history, last_good)
