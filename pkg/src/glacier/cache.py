"""Disk cache of frozen-prefix activations with schedule-aware prefetching.

Activations are written one batch per entry, but the index is per sample:
each sample id maps to its containing entry and row. A lookup gathers the
requested rows in order, possibly across several stored entries, so
cached activations survive epoch reshuffling — any regrouping of the same
samples still hits. That is sound bitwise because the frozen prefix is
per-sample deterministic (inference-mode batchnorm, per-sample matmul
slices, stateless augmentation).

Every entry carries the freeze configuration (boundary module index and
freeze version) it was written under; freeze or unfreeze events bump the
version and silently invalidate everything older. A small resident
window keeps the next few assembled batches in memory so the training
loop normally never touches the disk itself; the prefetcher walks the
epoch schedule a couple of batches ahead and warms that window.

Entry file layout (binary, little-endian), one file per epoch per worker,
entries appended:

    magic "EGAC" | format u32 | epoch u32 | batch_seq u32
    | boundary_module u32 | freeze_version u32 | sample_count u32
    | sample_ids u64 x count | rank u32 | dims u64 x rank
    | payload f32 x prod(dims) | length_check u64 (= payload bytes)
"""

from __future__ import annotations

import logging
import os
import re
import struct
import threading
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"EGAC"
FORMAT_VERSION = 1
RESIDENT_BATCHES = 5
_HEADER = struct.Struct("<4sIIIIII")


class CacheFormatError(ValueError):
    """Entry bytes failed a magic or length check."""


@dataclass
class CacheEntry:
    epoch: int
    batch_seq: int
    boundary_module: int
    freeze_version: int
    sample_ids: np.ndarray  # uint64
    tensor: np.ndarray  # float32, leading dim == len(sample_ids)

    @property
    def key(self) -> tuple:
        return (tuple(int(i) for i in self.sample_ids), self.boundary_module, self.freeze_version)

    @property
    def nbytes(self) -> int:
        return entry_size(len(self.sample_ids), self.tensor.shape)


@dataclass
class PrefetchSchedule:
    """The next batches the data pipeline will ask for, in order."""

    upcoming: list[np.ndarray]  # sample-id arrays, a prefix of the epoch order
    depth: int = 2


def entry_size(sample_count: int, shape: tuple[int, ...]) -> int:
    payload = int(np.prod(shape)) * 4
    return _HEADER.size + 8 * sample_count + 4 + 8 * len(shape) + payload + 8


def payload_offset(entry_offset: int, sample_count: int, rank: int) -> int:
    return entry_offset + _HEADER.size + 8 * sample_count + 4 + 8 * rank


def write_entry(f, entry: CacheEntry) -> int:
    offset = f.tell()
    ids = np.ascontiguousarray(entry.sample_ids, dtype="<u8")
    payload = np.ascontiguousarray(entry.tensor, dtype="<f4")
    f.write(
        _HEADER.pack(
            MAGIC,
            FORMAT_VERSION,
            entry.epoch,
            entry.batch_seq,
            entry.boundary_module,
            entry.freeze_version,
            len(ids),
        )
    )
    f.write(ids.tobytes())
    shape = payload.shape
    f.write(struct.pack("<I", len(shape)))
    f.write(np.asarray(shape, dtype="<u8").tobytes())
    f.write(payload.tobytes())
    f.write(struct.pack("<Q", payload.nbytes))
    return offset


def read_entry(f, offset: int) -> CacheEntry:
    f.seek(offset)
    head = f.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise CacheFormatError(f"truncated header at offset {offset}")
    magic, fmt, epoch, batch_seq, boundary, version, count = _HEADER.unpack(head)
    if magic != MAGIC or fmt != FORMAT_VERSION:
        raise CacheFormatError(f"bad magic/format at offset {offset}")
    ids_raw = f.read(8 * count)
    rank_raw = f.read(4)
    if len(ids_raw) < 8 * count or len(rank_raw) < 4:
        raise CacheFormatError(f"truncated ids at offset {offset}")
    (rank,) = struct.unpack("<I", rank_raw)
    dims_raw = f.read(8 * rank)
    if len(dims_raw) < 8 * rank:
        raise CacheFormatError(f"truncated dims at offset {offset}")
    shape = tuple(int(d) for d in np.frombuffer(dims_raw, dtype="<u8"))
    nbytes = int(np.prod(shape)) * 4
    payload = f.read(nbytes)
    trailer = f.read(8)
    if len(payload) < nbytes or len(trailer) < 8:
        raise CacheFormatError(f"truncated payload at offset {offset}")
    (check,) = struct.unpack("<Q", trailer)
    if check != nbytes:
        raise CacheFormatError(f"length check failed at offset {offset}: {check} != {nbytes}")
    tensor = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    ids = np.frombuffer(ids_raw, dtype="<u8").copy()
    if len(ids) != tensor.shape[0]:
        raise CacheFormatError(f"id/tensor mismatch at offset {offset}")
    return CacheEntry(epoch, batch_seq, boundary, version, ids, tensor)


def scan_file(path: str):
    """Yield (offset, entry) until EOF or corruption.

    A truncated or corrupt tail entry ends the scan; everything before it
    stays readable.
    """
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        offset = 0
        while offset < size:
            try:
                entry = read_entry(f, offset)
            except CacheFormatError:
                return
            yield offset, entry
            offset += entry.nbytes


@dataclass
class _EntryRef:
    path: str
    entry_offset: int
    payload_offset: int
    row_nbytes: int
    row_shape: tuple  # per-sample shape
    boundary_module: int
    freeze_version: int
    sample_ids: tuple


@dataclass
class _Resident:
    tensor: np.ndarray
    insert_seq: int
    sched_pos: int
    consumed: bool = False


class ActivationCache:
    """Per-worker activation cache: disk tier plus a 5-batch resident window.

    One writer (the training worker) and one reader thread (the
    prefetcher) may use it concurrently; index and window mutations are
    guarded by a lock, and the window never holds more than
    ``resident_batches`` assembled batches.
    """

    def __init__(
        self,
        cache_dir: str,
        worker_id: int = 0,
        resident_batches: int = RESIDENT_BATCHES,
        disk_limit_bytes: int | None = None,
    ):
        self.cache_dir = cache_dir
        self.worker_id = worker_id
        self.resident_batches = resident_batches
        self.disk_limit_bytes = disk_limit_bytes
        self.enabled = True
        self.writes_disabled = False
        self.counters = {
            "puts": 0,
            "hits_resident": 0,
            "hits_disk": 0,
            "misses": 0,
            "misses_version": 0,
            "stale_hits": 0,  # returns under a mismatched version; must stay 0
            "disk_reads": 0,  # entries touched on disk
            "disk_writes": 0,
            "bytes_written": 0,
            "dropped_corrupt": 0,
            "resident_evictions": 0,
            "peak_resident": 0,
            "disk_limit_events": 0,
        }
        self._lock = threading.Lock()
        self._index: dict[int, tuple[_EntryRef, int]] = {}  # sample_id -> (entry, row)
        self._resident: dict[tuple, _Resident] = {}
        self._seq = 0
        self._files: dict[int, object] = {}  # epoch -> open append handle
        os.makedirs(cache_dir, exist_ok=True)

    # -- helpers -------------------------------------------------------------

    def _file_path(self, epoch: int) -> str:
        return os.path.join(self.cache_dir, f"worker{self.worker_id:02d}_epoch{epoch:04d}.bin")

    def _writer(self, epoch: int):
        fh = self._files.get(epoch)
        if fh is None:
            fh = open(self._file_path(epoch), "ab")
            self._files[epoch] = fh
        return fh

    def close(self) -> None:
        for fh in self._files.values():
            fh.close()
        self._files.clear()

    def _insert_resident(self, key: tuple, tensor: np.ndarray, sched_pos: int,
                         from_prefetch: bool) -> None:
        # caller holds the lock
        if key in self._resident:
            return
        if len(self._resident) >= self.resident_batches:
            victim = self._pick_victim(sched_pos, from_prefetch)
            if victim is None:
                return  # everything resident is needed sooner than this entry
            del self._resident[victim]
            self.counters["resident_evictions"] += 1
        self._seq += 1
        self._resident[key] = _Resident(tensor, self._seq, sched_pos)
        self.counters["peak_resident"] = max(self.counters["peak_resident"], len(self._resident))

    def _pick_victim(self, sched_pos: int, from_prefetch: bool):
        if not from_prefetch:
            return min(self._resident, key=lambda k: self._resident[k].insert_seq)
        consumed = [k for k, r in self._resident.items() if r.consumed]
        if consumed:
            return min(consumed, key=lambda k: self._resident[k].sched_pos)
        # never evict an entry scheduled earlier than the incoming one
        later = [k for k, r in self._resident.items() if r.sched_pos > sched_pos]
        if later:
            return max(later, key=lambda k: self._resident[k].sched_pos)
        return None

    def _index_entry(self, entry: CacheEntry, path: str, entry_offset: int) -> None:
        rank = entry.tensor.ndim
        ref = _EntryRef(
            path=path,
            entry_offset=entry_offset,
            payload_offset=payload_offset(entry_offset, len(entry.sample_ids), rank),
            row_nbytes=int(np.prod(entry.tensor.shape[1:])) * 4,
            row_shape=tuple(entry.tensor.shape[1:]),
            boundary_module=entry.boundary_module,
            freeze_version=entry.freeze_version,
            sample_ids=entry.key[0],
        )
        with self._lock:
            for row, sid in enumerate(ref.sample_ids):
                self._index[sid] = (ref, row)

    # -- writing ---------------------------------------------------------------

    def put(
        self,
        epoch: int,
        batch_seq: int,
        sample_ids: np.ndarray,
        activation: np.ndarray,
        boundary_module: int,
        freeze_version: int,
    ) -> None:
        """Serialize one boundary activation batch and index its rows."""
        if not self.enabled or self.writes_disabled:
            return
        if len(sample_ids) != activation.shape[0]:
            raise ValueError(
                f"sample_ids ({len(sample_ids)}) and activation leading dim "
                f"({activation.shape[0]}) differ"
            )
        entry = CacheEntry(
            epoch, batch_seq, boundary_module, freeze_version,
            np.asarray(sample_ids, dtype=np.uint64), activation,
        )
        if (
            self.disk_limit_bytes is not None
            and self.counters["bytes_written"] + entry.nbytes > self.disk_limit_bytes
        ):
            if not self.counters["disk_limit_events"]:
                log.warning("activation cache hit its disk limit; further writes disabled")
            self.counters["disk_limit_events"] += 1
            self.writes_disabled = True
            return
        try:
            fh = self._writer(epoch)
            offset = write_entry(fh, entry)
            fh.flush()
        except (OSError, ValueError) as err:  # ValueError: operation on a closed file
            log.warning("disabling activation cache after write failure: %s", err)
            self.enabled = False
            return
        self.counters["puts"] += 1
        self.counters["disk_writes"] += 1
        self.counters["bytes_written"] += entry.nbytes
        self._index_entry(entry, self._file_path(epoch), offset)
        with self._lock:
            self._insert_resident(entry.key, entry.tensor, self._seq + 1, from_prefetch=False)

    # -- reading ---------------------------------------------------------------

    def get(
        self, sample_ids: np.ndarray, boundary_module: int, freeze_version: int
    ) -> np.ndarray | None:
        """Gather the requested rows; any absent or stale sample is a miss."""
        ids = tuple(int(i) for i in sample_ids)
        key = (ids, boundary_module, freeze_version)
        with self._lock:
            res = self._resident.get(key)
            if res is not None:
                res.consumed = True
                self.counters["hits_resident"] += 1
                return res.tensor
        tensor = self._assemble(ids, boundary_module, freeze_version)
        if tensor is None:
            return None
        self.counters["hits_disk"] += 1
        return tensor

    def _lookup_refs(self, ids: tuple, boundary: int, version: int):
        """(refs aligned with ids) or None; counts the miss reasons."""
        refs = []
        version_mismatch = False
        with self._lock:
            for sid in ids:
                hit = self._index.get(sid)
                if hit is None or hit[0].boundary_module != boundary:
                    self.counters["misses"] += 1
                    return None
                if hit[0].freeze_version != version:
                    version_mismatch = True
                refs.append(hit)
        if version_mismatch:
            self.counters["misses"] += 1
            self.counters["misses_version"] += 1
            return None
        return refs

    def _assemble(self, ids: tuple, boundary: int, version: int) -> np.ndarray | None:
        if not ids:
            self.counters["misses"] += 1
            return None
        refs = self._lookup_refs(ids, boundary, version)
        if refs is None:
            return None
        rows: dict[int, np.ndarray] = {}
        by_path: dict[str, list[tuple[int, _EntryRef, int]]] = {}
        for pos, (ref, row) in enumerate(refs):
            by_path.setdefault(ref.path, []).append((pos, ref, row))
        for path, wanted in by_path.items():
            try:
                with open(path, "rb") as f:
                    validated: set[int] = set()
                    for pos, ref, row in wanted:
                        if ref.entry_offset not in validated:
                            self._validate_entry_header(f, ref)
                            validated.add(ref.entry_offset)
                            self.counters["disk_reads"] += 1
                        f.seek(ref.payload_offset + row * ref.row_nbytes)
                        raw = f.read(ref.row_nbytes)
                        if len(raw) != ref.row_nbytes:
                            raise CacheFormatError(
                                f"short row read at {path}@{ref.payload_offset}"
                            )
                        rows[pos] = np.frombuffer(raw, dtype="<f4").reshape(ref.row_shape)
            except (OSError, CacheFormatError) as err:
                log.warning("dropping corrupt cache entries in %s: %s", path, err)
                self.counters["dropped_corrupt"] += 1
                self._drop_path_refs([ref for _, ref, _ in wanted])
                self.counters["misses"] += 1
                return None
        return np.stack([rows[i] for i in range(len(ids))])

    def _validate_entry_header(self, f, ref: _EntryRef) -> None:
        f.seek(ref.entry_offset)
        head = f.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise CacheFormatError(f"truncated header at offset {ref.entry_offset}")
        magic, fmt, _, _, boundary, version, count = _HEADER.unpack(head)
        if (
            magic != MAGIC
            or fmt != FORMAT_VERSION
            or boundary != ref.boundary_module
            or version != ref.freeze_version
            or count != len(ref.sample_ids)
        ):
            raise CacheFormatError(f"bad entry header at offset {ref.entry_offset}")

    def _drop_path_refs(self, refs: list[_EntryRef]) -> None:
        with self._lock:
            for ref in refs:
                for sid in ref.sample_ids:
                    hit = self._index.get(sid)
                    if hit is not None and hit[0] is ref:
                        del self._index[sid]

    def prefetch(
        self,
        schedule: PrefetchSchedule,
        boundary_module: int,
        freeze_version: int,
        start_pos: int = 0,
    ) -> int:
        """Assemble the next ``depth`` scheduled batches into the window.

        Batches with any uncached sample are skipped; the training loop
        just computes the forward pass normally for those. Returns how
        many batches were assembled from disk.
        """
        loaded = 0
        for i, ids_arr in enumerate(schedule.upcoming[: max(schedule.depth, 0)]):
            ids = tuple(int(x) for x in ids_arr)
            key = (ids, boundary_module, freeze_version)
            with self._lock:
                if key in self._resident:
                    continue
                missing = any(
                    (hit := self._index.get(sid)) is None
                    or hit[0].boundary_module != boundary_module
                    or hit[0].freeze_version != freeze_version
                    for sid in ids
                )
            if missing:
                continue
            tensor = self._assemble(ids, boundary_module, freeze_version)
            if tensor is None:
                continue
            with self._lock:
                self._insert_resident(key, tensor, sched_pos=start_pos + i, from_prefetch=True)
            loaded += 1
        return loaded

    def invalidate_resident(self) -> None:
        """Drop the in-memory window (stale after a freeze-config change)."""
        with self._lock:
            self._resident.clear()

    # -- maintenance -------------------------------------------------------------

    @classmethod
    def open_existing(cls, cache_dir: str, worker_id: int = 0, **kwargs) -> "ActivationCache":
        """Rebuild the per-sample index by scanning entry headers."""
        cache = cls(cache_dir, worker_id, **kwargs)
        pattern = re.compile(rf"worker{worker_id:02d}_epoch(\d+)\.bin$")
        names = sorted(n for n in os.listdir(cache_dir) if pattern.search(n))
        for name in names:
            path = os.path.join(cache_dir, name)
            for offset, entry in scan_file(path):
                cache._index_entry(entry, path, offset)
                cache.counters["bytes_written"] += entry.nbytes
        return cache


def cache_eligibility(frozen_fraction_fwd_flops: float, threshold: float) -> bool:
    """Caching pays off only when the frozen prefix is a real share of the
    forward pass."""
    return frozen_fraction_fwd_flops >= threshold


def inspect_cache(cache_dir: str) -> list[dict]:
    """Per-entry metadata for every cache file in a directory."""
    rows = []
    for name in sorted(os.listdir(cache_dir)):
        if not name.endswith(".bin"):
            continue
        path = os.path.join(cache_dir, name)
        for offset, entry in scan_file(path):
            rows.append(
                {
                    "file": name,
                    "offset": offset,
                    "epoch": entry.epoch,
                    "batch_seq": entry.batch_seq,
                    "boundary_module": entry.boundary_module,
                    "freeze_version": entry.freeze_version,
                    "samples": len(entry.sample_ids),
                    "shape": tuple(entry.tensor.shape),
                    "bytes": entry.nbytes,
                }
            )
    return rows
