"""Feature-record files, batching and the synthetic cross-modal generator.

AVFR layout (little-endian)::

    "AVFR" u16 version u32 num_classes u32 visual_dim u32 audio_dim u64 num_records
    per record: u16 id_len, id (utf-8), u32 label_count, u32 labels...,
                f32 visual[visual_dim], f32 audio[audio_dim]
    u32 CRC32 of every preceding byte

Files whose first non-blank byte is ``{`` are read as JSON lines instead, one
record per line with keys id, labels, visual, audio. An optional first line
carrying ``num_classes`` (and optionally the dims) acts as the header.
"""

from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Iterator, NamedTuple

import numpy as np

from .numcore import Tensor

MAGIC = b"AVFR"
VERSION = 1
_HEADER = struct.Struct("<4sHIIIQ")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


class CorruptFileError(ValueError):
    """Raised for malformed, truncated or checksum-failing files."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (offset {offset})")


@dataclass(frozen=True)
class DatasetHeader:
    num_classes: int
    visual_dim: int
    audio_dim: int
    num_records: int

    def validate(self) -> None:
        for f in ("num_classes", "visual_dim", "audio_dim"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")
        if self.num_records < 0:
            raise ValueError("num_records must be >= 0")


@dataclass
class FeatureRecord:
    id: str
    labels: tuple[int, ...]
    visual: np.ndarray
    audio: np.ndarray

    def __post_init__(self):
        self.labels = tuple(int(j) for j in self.labels)
        self.visual = np.asarray(self.visual, dtype=np.float32)
        self.audio = np.asarray(self.audio, dtype=np.float32)

    def check(self, header: DatasetHeader) -> None:
        if not self.id:
            raise ValueError("record id must be non-empty")
        if any(b <= a for a, b in zip(self.labels, self.labels[1:])):
            raise ValueError(f"{self.id}: labels must be strictly ascending")
        if self.labels and (self.labels[0] < 0 or self.labels[-1] >= header.num_classes):
            raise ValueError(f"{self.id}: label index outside [0, {header.num_classes})")
        if self.visual.shape != (header.visual_dim,) or self.audio.shape != (header.audio_dim,):
            raise ValueError(f"{self.id}: vector dims do not match header")
        if not (np.all(np.isfinite(self.visual)) and np.all(np.isfinite(self.audio))):
            raise ValueError(f"{self.id}: non-finite feature values")

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.labels == other.labels
            and self.visual.tobytes() == other.visual.tobytes()
            and self.audio.tobytes() == other.audio.tobytes()
        )


# ---------------------------------------------------------------------------
# binary IO
# ---------------------------------------------------------------------------


class _CrcWriter:
    def __init__(self, fh: BinaryIO):
        self.fh = fh
        self.crc = 0

    def write(self, b: bytes) -> None:
        self.crc = zlib.crc32(b, self.crc)
        self.fh.write(b)


def encode_record(rec: FeatureRecord) -> bytes:
    idb = rec.id.encode("utf-8")
    if len(idb) > 0xFFFF:
        raise ValueError("record id longer than 65535 bytes")
    return b"".join((
        _U16.pack(len(idb)),
        idb,
        _U32.pack(len(rec.labels)),
        np.asarray(rec.labels, dtype="<u4").tobytes(),
        rec.visual.astype("<f4").tobytes(),
        rec.audio.astype("<f4").tobytes(),
    ))


def write_records(header: DatasetHeader, records: Iterable[FeatureRecord], path) -> DatasetHeader:
    """Stream ``records`` to ``path``; the count must equal ``header.num_records``."""
    header.validate()
    tmp = f"{os.fspath(path)}.tmp"
    count = 0
    with open(tmp, "wb") as fh:
        w = _CrcWriter(fh)
        w.write(_HEADER.pack(MAGIC, VERSION, header.num_classes, header.visual_dim, header.audio_dim,
                             header.num_records))
        for rec in records:
            rec.check(header)
            w.write(encode_record(rec))
            count += 1
        if count != header.num_records:
            fh.close()
            os.unlink(tmp)
            raise ValueError(f"header says {header.num_records} records, got {count}")
        fh.write(_U32.pack(w.crc))
    os.replace(tmp, path)
    return header


class _CrcReader:
    def __init__(self, fh: BinaryIO):
        self.fh = fh
        self.crc = 0
        self.offset = 0

    def read(self, n: int, what: str) -> bytes:
        b = self.fh.read(n)
        if len(b) != n:
            raise CorruptFileError(f"truncated file while reading {what}", self.offset + len(b))
        self.crc = zlib.crc32(b, self.crc)
        self.offset += n
        return b


def _read_binary(fh: BinaryIO) -> tuple[DatasetHeader, Iterator[FeatureRecord]]:
    r = _CrcReader(fh)
    magic, version, c, v, a, n = _HEADER.unpack(r.read(_HEADER.size, "header"))
    if magic != MAGIC:
        raise CorruptFileError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise CorruptFileError(f"unsupported AVFR version {version}", 4)
    header = DatasetHeader(c, v, a, n)
    header.validate()

    def records() -> Iterator[FeatureRecord]:
        try:
            for _ in range(n):
                start = r.offset
                (id_len,) = _U16.unpack(r.read(2, "id length"))
                rid = r.read(id_len, "id").decode("utf-8")
                (nl,) = _U32.unpack(r.read(4, "label count"))
                labels = np.frombuffer(r.read(4 * nl, "labels"), dtype="<u4")
                if nl and int(labels.max()) >= c:
                    raise CorruptFileError(f"record {rid!r}: label index >= num_classes {c}", start)
                vis = np.frombuffer(r.read(4 * v, "visual vector"), dtype="<f4").astype(np.float32)
                aud = np.frombuffer(r.read(4 * a, "audio vector"), dtype="<f4").astype(np.float32)
                yield FeatureRecord(rid, tuple(int(j) for j in labels), vis, aud)
            expected = r.crc
            at = r.offset
            tail = fh.read(4)
            if len(tail) != 4:
                raise CorruptFileError("truncated file: missing CRC32 trailer", at + len(tail))
            (stored,) = _U32.unpack(tail)
            if stored != expected:
                raise CorruptFileError(
                    f"CRC32 mismatch: stored {stored:08x}, computed {expected:08x}", at
                )
            if fh.read(1):
                raise CorruptFileError("trailing bytes after CRC32", at + 4)
        finally:
            fh.close()

    return header, records()


def _read_text(fh) -> tuple[DatasetHeader, Iterator[FeatureRecord]]:
    rows = []
    meta = {}
    for lineno, line in enumerate(fh, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorruptFileError(f"line {lineno}: {e.msg}") from None
        if "num_classes" in obj and "id" not in obj:
            meta = obj
            continue
        rows.append(FeatureRecord(str(obj["id"]), tuple(obj.get("labels", ())), obj["visual"], obj["audio"]))
    fh.close()
    if not rows and not meta:
        raise CorruptFileError("text dataset has neither header nor records")
    c = int(meta.get("num_classes", 1 + max((max(r.labels) for r in rows if r.labels), default=0)))
    v = int(meta.get("visual_dim", rows[0].visual.size if rows else 0))
    a = int(meta.get("audio_dim", rows[0].audio.size if rows else 0))
    header = DatasetHeader(c, v, a, len(rows))
    header.validate()
    for rec in rows:
        rec.check(header)
    return header, iter(rows)


def read_records(path) -> tuple[DatasetHeader, Iterator[FeatureRecord]]:
    """Open ``path`` and return its header plus a lazy record iterator.

    The CRC is verified once the iterator is exhausted, so consumers see a
    ``CorruptFileError`` at the end of a damaged stream.
    """
    fh = open(path, "rb")
    head = fh.read(4)
    fh.seek(0)
    if head == MAGIC:
        return _read_binary(fh)
    if head.lstrip()[:1] in (b"{", b"#") or not head:
        fh.close()
        return _read_text(open(path, "r", encoding="utf-8"))
    fh.close()
    raise CorruptFileError(f"bad magic {head!r}", 0)


# ---------------------------------------------------------------------------
# in-memory dataset + batching
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    header: DatasetHeader
    ids: list[str]
    labels: list[tuple[int, ...]]
    visual: np.ndarray  # float64 [n, V]
    audio: np.ndarray  # float64 [n, A]

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_records(cls, header: DatasetHeader, records: Iterable[FeatureRecord]) -> "Dataset":
        ids, labels, vis, aud = [], [], [], []
        for rec in records:
            rec.check(header)
            ids.append(rec.id)
            labels.append(rec.labels)
            vis.append(rec.visual)
            aud.append(rec.audio)
        n = len(ids)
        v = np.asarray(vis, dtype=np.float64).reshape(n, header.visual_dim)
        a = np.asarray(aud, dtype=np.float64).reshape(n, header.audio_dim)
        return cls(DatasetHeader(header.num_classes, header.visual_dim, header.audio_dim, n), ids, labels, v, a)

    def records(self) -> Iterator[FeatureRecord]:
        for i, rid in enumerate(self.ids):
            yield FeatureRecord(rid, self.labels[i], self.visual[i], self.audio[i])

    def dense_labels(self, rows=None) -> np.ndarray:
        idx = range(len(self)) if rows is None else rows
        y = np.zeros((len(idx), self.header.num_classes))
        for r, i in enumerate(idx):
            y[r, list(self.labels[i])] = 1.0
        return y

    def subset(self, rows) -> "Dataset":
        rows = list(rows)
        h = self.header
        return Dataset(
            DatasetHeader(h.num_classes, h.visual_dim, h.audio_dim, len(rows)),
            [self.ids[i] for i in rows],
            [self.labels[i] for i in rows],
            self.visual[rows],
            self.audio[rows],
        )

    def standardize(self, stats: "FeatureStats | None" = None) -> "FeatureStats":
        """Per-dimension z-scoring in place; returns the statistics used."""
        stats = stats or FeatureStats.fit(self)
        self.visual = (self.visual - stats.visual_mean) / stats.visual_std
        self.audio = (self.audio - stats.audio_mean) / stats.audio_std
        return stats


@dataclass
class FeatureStats:
    visual_mean: np.ndarray
    visual_std: np.ndarray
    audio_mean: np.ndarray
    audio_std: np.ndarray

    @classmethod
    def fit(cls, ds: Dataset) -> "FeatureStats":
        def sd(x):
            s = x.std(axis=0)
            return np.where(s > 0, s, 1.0)

        return cls(ds.visual.mean(axis=0), sd(ds.visual), ds.audio.mean(axis=0), sd(ds.audio))


def load_dataset(path, standardize: bool = False) -> Dataset:
    header, recs = read_records(path)
    ds = Dataset.from_records(header, recs)
    if ds.header.num_records != header.num_records:
        raise CorruptFileError(f"header declares {header.num_records} records, found {len(ds)}")
    if standardize:
        ds.standardize()
    return ds


def dense_to_sparse(y: np.ndarray) -> list[tuple[int, ...]]:
    return [tuple(int(j) for j in np.flatnonzero(row)) for row in np.asarray(y)]


class Batch(NamedTuple):
    visual: Tensor
    audio: Tensor
    labels: Tensor


def epoch_permutation(n: int, shuffle_seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def batch_iter(dataset: Dataset, batch_size: int, shuffle_seed: int, epoch: int,
               with_ids: bool = False) -> Iterator:
    """Yield ``(visual, audio, labels)`` batches in an epoch-salted order.

    With ``with_ids`` each item is ``(Batch, ids)``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    h = dataset.header
    if dataset.visual.shape[1:] != (h.visual_dim,) or dataset.audio.shape[1:] != (h.audio_dim,):
        raise ValueError("record dims do not match dataset header")
    perm = epoch_permutation(len(dataset), shuffle_seed, epoch)
    for start in range(0, len(perm), batch_size):
        rows = perm[start:start + batch_size]
        b = Batch(Tensor(dataset.visual[rows]), Tensor(dataset.audio[rows]),
                  Tensor(dataset.dense_labels(rows)))
        yield (b, [dataset.ids[i] for i in rows]) if with_ids else b


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    num_classes: int = 32
    num_records: int = 20000
    audio_dim: int = 32
    visual_dim: int = 64
    audio_only: int = 8
    visual_only: int = 8
    cross_modal: int = 16
    noise_std: float = 0.3
    distractor_dims: int | None = None  # None -> 75% of each vector
    seed: int = 0
    id_prefix: str = "synth"

    def validate(self) -> None:
        if min(self.audio_only, self.visual_only, self.cross_modal) < 0:
            raise ValueError("class split counts must be non-negative")
        if self.audio_only + self.visual_only + self.cross_modal != self.num_classes:
            raise ValueError(
                f"class split {self.audio_only}+{self.visual_only}+{self.cross_modal} "
                f"does not sum to num_classes={self.num_classes}"
            )
        if self.num_classes < 1 or self.audio_dim < 1 or self.visual_dim < 1 or self.num_records < 0:
            raise ValueError("class count and dims must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        layout = self.layout()
        for m in ("audio", "visual"):
            if layout[f"{m}_bits"] > layout[f"{m}_signal"]:
                raise ValueError(
                    f"{m}: {layout[f'{m}_bits']} latent bits exceed {layout[f'{m}_signal']} signal dims"
                )

    def distractors(self, dim: int) -> int:
        if self.distractor_dims is None:
            return (3 * dim) // 4
        if not 0 <= self.distractor_dims < dim:
            raise ValueError(f"distractor_dims must lie in [0, {dim})")
        return self.distractor_dims

    def layout(self) -> dict:
        c = self.cross_modal
        na = max(self.audio_only, 1 if c else 0)
        nv = max(self.visual_only, 1 if c else 0)
        # cross-modal classes need distinct (audio bit, visual bit) pairs
        while c > na * nv:
            if na <= nv:
                na += 1
            else:
                nv += 1
        return {
            "audio_bits": na,
            "visual_bits": nv,
            "audio_signal": self.audio_dim - self.distractors(self.audio_dim),
            "visual_signal": self.visual_dim - self.distractors(self.visual_dim),
        }


@dataclass(frozen=True)
class ClassRule:
    kind: str  # audio | visual | cross
    audio_bit: int | None = None
    visual_bit: int | None = None


def class_rules(cfg: SynthConfig) -> list[ClassRule]:
    """Which latent bit(s) switch each class on; independent of the seed."""
    lay = cfg.layout()
    na, nv = lay["audio_bits"], lay["visual_bits"]
    rules = [ClassRule("audio", audio_bit=i) for i in range(cfg.audio_only)]
    rules += [ClassRule("visual", visual_bit=j) for j in range(cfg.visual_only)]
    for k in range(cfg.cross_modal):
        i = k % na
        rules.append(ClassRule("cross", audio_bit=i, visual_bit=(i + k // na) % nv))
    return rules


@dataclass
class SynthBatch:
    z_audio: np.ndarray
    z_visual: np.ndarray
    labels: np.ndarray  # bool [n, C]
    audio: np.ndarray
    visual: np.ndarray
    ids: list[str] = field(default_factory=list)


def _embed(rng, z: np.ndarray, dim: int, signal: int, noise_std: float) -> np.ndarray:
    n, bits = z.shape
    x = np.empty((n, dim))
    if signal:
        x[:, :signal] = (2.0 * z[:, np.arange(signal) % bits] - 1.0) if bits else 0.0
    x[:, signal:] = rng.standard_normal((n, dim - signal))
    if noise_std:
        x += noise_std * rng.standard_normal((n, dim))
    return x.astype(np.float32)


def synth_arrays(cfg: SynthConfig) -> SynthBatch:
    """Draw the whole synthetic set in memory (vectors already rounded to f32)."""
    cfg.validate()
    lay = cfg.layout()
    rng = np.random.default_rng(cfg.seed)
    n = cfg.num_records
    za = rng.integers(0, 2, size=(n, lay["audio_bits"])).astype(bool)
    zv = rng.integers(0, 2, size=(n, lay["visual_bits"])).astype(bool)
    y = np.zeros((n, cfg.num_classes), dtype=bool)
    for c, rule in enumerate(class_rules(cfg)):
        if rule.kind == "audio":
            y[:, c] = za[:, rule.audio_bit]
        elif rule.kind == "visual":
            y[:, c] = zv[:, rule.visual_bit]
        else:
            y[:, c] = za[:, rule.audio_bit] ^ zv[:, rule.visual_bit]
    audio = _embed(rng, za, cfg.audio_dim, lay["audio_signal"], cfg.noise_std)
    visual = _embed(rng, zv, cfg.visual_dim, lay["visual_signal"], cfg.noise_std)
    width = max(1, int(math.log10(max(n, 1))) + 1)
    ids = [f"{cfg.id_prefix}-{cfg.seed}-{i:0{width}d}" for i in range(n)]
    return SynthBatch(za, zv, y, audio, visual, ids)


def synth_dataset(cfg: SynthConfig) -> Dataset:
    s = synth_arrays(cfg)
    header = DatasetHeader(cfg.num_classes, cfg.visual_dim, cfg.audio_dim, cfg.num_records)
    return Dataset(header, s.ids, dense_to_sparse(s.labels), s.visual.astype(np.float64),
                   s.audio.astype(np.float64))


def synth_generate(cfg: SynthConfig, path) -> DatasetHeader:
    """Write a synthetic AVFR file; byte-identical for identical configs."""
    s = synth_arrays(cfg)
    header = DatasetHeader(cfg.num_classes, cfg.visual_dim, cfg.audio_dim, cfg.num_records)
    sparse = dense_to_sparse(s.labels)
    recs = (FeatureRecord(s.ids[i], sparse[i], s.visual[i], s.audio[i]) for i in range(cfg.num_records))
    return write_records(header, recs, path)
