"""Deterministic dataset loading, sampling, and stateless augmentation.

All randomness is counter-based: permutations come from a Philox stream
keyed by (seed, epoch) and per-sample augmentation draws come from a hash
of (seed, sample_id) alone. Nothing carries sequential RNG state, so the
training worker, prefetcher, and controller can each replay any part of
the data pipeline independently — which is what keeps cached activations
valid across epochs.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from glacier.nn import FLOAT


def _hash64(*parts) -> int:
    """Stable 64-bit hash of a mixed tuple of ints/strings."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, str):
            h.update(b"s" + part.encode())
        else:
            h.update(b"i" + int(part).to_bytes(16, "little", signed=True))
    return int.from_bytes(h.digest(), "little")


def _gen(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=_hash64(*parts)))


def _unit(*parts) -> float:
    """Uniform [0,1) derived from a hash, no generator state."""
    return _hash64(*parts) / 2.0**64


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    samples: np.ndarray  # float32, (N, ...) natural shape
    labels: np.ndarray  # int64, (N,)
    sample_ids: np.ndarray  # uint64, dense 0..N-1
    name: str

    def __post_init__(self):
        n = len(self.samples)
        if len(self.labels) != n or len(self.sample_ids) != n:
            raise ValueError("samples, labels, and sample_ids must have equal length")

    def __len__(self) -> int:
        return len(self.samples)


IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_exact(f, count: int, what: str):
    offset = f.tell()
    buf = f.read(count)
    if len(buf) != count:
        raise ValueError(f"truncated {what}: wanted {count} bytes at offset {offset}, got {len(buf)}")
    return buf


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Parse the big-endian IDX pair used by MNIST-style datasets.

    Pixels are scaled to [0, 1] float32. The whole file is validated
    before anything is returned; a truncated file never yields a partial
    dataset.
    """
    with open(images_path, "rb") as f:
        magic = struct.unpack(">I", _read_exact(f, 4, "image magic"))[0]
        if magic != IDX_IMAGES_MAGIC:
            raise ValueError(f"bad image magic 0x{magic:08x} at offset 0 in {images_path}")
        n, rows, cols = struct.unpack(">III", _read_exact(f, 12, "image header"))
        raw = _read_exact(f, n * rows * cols, "image data")
        if f.read(1):
            raise ValueError(f"trailing bytes after image data in {images_path}")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows, cols)

    with open(labels_path, "rb") as f:
        magic = struct.unpack(">I", _read_exact(f, 4, "label magic"))[0]
        if magic != IDX_LABELS_MAGIC:
            raise ValueError(f"bad label magic 0x{magic:08x} at offset 0 in {labels_path}")
        (n_labels,) = struct.unpack(">I", _read_exact(f, 4, "label header"))
        raw = _read_exact(f, n_labels, "label data")
    if n_labels != n:
        raise ValueError(f"label count {n_labels} != image count {n}")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    return Dataset(
        samples=(images.astype(FLOAT) / FLOAT(255.0)),
        labels=labels,
        sample_ids=np.arange(n, dtype=np.uint64),
        name=f"idx:{images_path}",
    )


def synth_dataset(
    kind: str,
    classes: int,
    per_class: int,
    dim: int,
    seed: int,
    noise: float = 0.15,
    start_index: int = 0,
) -> Dataset:
    """Deterministic synthetic dataset; blobs or 2-d interleaved spirals.

    ``start_index`` offsets the per-sample noise stream without changing
    class structure, so a validation split can be drawn from the same
    distribution as training with disjoint noise (start_index = train N).
    """
    if classes < 2 or per_class < 1:
        raise ValueError("need classes >= 2 and per_class >= 1")
    if start_index % classes != 0:
        raise ValueError("start_index must be a multiple of classes to keep labels balanced")
    n = classes * per_class
    labels = (np.arange(n) + start_index) % classes

    if kind == "blobs":
        centers = _gen(seed, "centers").normal(size=(classes, dim))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        samples = np.empty((n, dim), dtype=FLOAT)
        for i in range(n):
            g = _gen(seed, "blob", start_index + i)
            samples[i] = centers[labels[i]] + noise * g.standard_normal(dim)
    elif kind == "spirals":
        if dim != 2:
            raise ValueError("spirals are 2-d; set dim = 2")
        samples = np.empty((n, 2), dtype=FLOAT)
        for i in range(n):
            gidx = start_index + i
            k = gidx % classes
            j = gidx // classes
            g = _gen(seed, "spiral", gidx)
            t = (j % per_class + 0.5) / per_class
            theta = 2 * np.pi * (1.75 * t + k / classes) + noise * g.standard_normal()
            samples[i] = t * np.array([np.sin(theta), np.cos(theta)])
    else:
        raise ValueError(f"unknown synthetic dataset kind {kind!r}")

    return Dataset(
        samples=samples,
        labels=labels,
        sample_ids=np.arange(n, dtype=np.uint64),
        name=f"{kind}(classes={classes}, per_class={per_class}, seed={seed})",
    )


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugSpec:
    """Stateless augmentation config; randomness is f(seed, sample_id) only."""

    seed: int = 0
    flip_p: float = 0.0
    pad_crop: int = 0

    @property
    def identity(self) -> bool:
        return self.flip_p == 0.0 and self.pad_crop == 0


def augment(sample: np.ndarray, sample_id: int, aug: AugSpec | None) -> np.ndarray:
    """Apply the configured augmentations; identical output in every epoch."""
    if aug is None or aug.identity:
        return sample
    out = sample
    if aug.flip_p > 0 and _unit(aug.seed, "flip", sample_id) < aug.flip_p:
        out = out[..., ::-1]
    if aug.pad_crop > 0:
        k = aug.pad_crop
        h, w = out.shape[-2], out.shape[-1]
        pad = [(0, 0)] * (out.ndim - 2) + [(k, k), (k, k)]
        padded = np.pad(out, pad)
        oy = _hash64(aug.seed, "cropy", sample_id) % (2 * k + 1)
        ox = _hash64(aug.seed, "cropx", sample_id) % (2 * k + 1)
        out = padded[..., oy : oy + h, ox : ox + w]
    return np.ascontiguousarray(out, dtype=FLOAT)


# ---------------------------------------------------------------------------
# schedules and batches
# ---------------------------------------------------------------------------


@dataclass
class SampleSchedule:
    """One worker's epoch order: a round-robin shard of the epoch permutation."""

    epoch: int
    order: np.ndarray  # uint64 sample ids, this worker's shard in visit order
    batch_size: int
    aug: AugSpec | None = None
    batches: list[np.ndarray] = field(init=False)

    def __post_init__(self):
        bs = self.batch_size
        self.batches = [self.order[i : i + bs] for i in range(0, len(self.order), bs)]

    @property
    def num_batches(self) -> int:
        return len(self.batches)


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray


def sample_epoch(
    dataset: Dataset,
    seed: int,
    epoch: int,
    worker_id: int = 0,
    batch_size: int = 32,
    num_workers: int = 1,
    aug: AugSpec | None = None,
) -> SampleSchedule:
    """Shuffle this worker's fixed round-robin shard for one epoch.

    Shards partition the dataset by id mod K and never change between
    epochs (a worker's private activation cache depends on seeing the
    same samples every epoch); the visit order within the shard is a
    fresh permutation keyed by (seed, epoch, worker_id).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not (0 <= worker_id < num_workers):
        raise ValueError(f"worker_id {worker_id} out of range for {num_workers} workers")
    shard = np.arange(worker_id, len(dataset), num_workers, dtype=np.uint64)
    order = shard[_gen(seed, "perm", epoch, worker_id).permutation(len(shard))]
    return SampleSchedule(epoch=epoch, order=order, batch_size=batch_size, aug=aug)


def next_batch(dataset: Dataset, schedule: SampleSchedule, batch_index: int) -> Batch:
    """Gather, augment, and stack one scheduled batch; a pure function."""
    if not (0 <= batch_index < schedule.num_batches):
        raise IndexError(f"batch_index {batch_index} out of range [0, {schedule.num_batches})")
    ids = schedule.batches[batch_index]
    pos = ids.astype(np.int64)
    if schedule.aug is None or schedule.aug.identity:
        inputs = np.ascontiguousarray(dataset.samples[pos], dtype=FLOAT)
    else:
        inputs = np.stack(
            [augment(dataset.samples[p], int(i), schedule.aug) for p, i in zip(pos, ids)]
        )
    return Batch(inputs=inputs, labels=dataset.labels[pos].copy(), sample_ids=ids.copy())
