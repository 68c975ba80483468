"""Training orchestration: worker group, all-reduce accounting, checkpoints.

The run wires together every other piece: K lock-step training workers
(threads) share one controller thread through the SPSC queues, each
worker owns a private activation cache warmed by its own prefetcher, and
gradient synchronization is simulated with exact ring-all-reduce byte
accounting (frozen modules transfer nothing).

Determinism contract: a decision computed from the evaluation at
iteration e takes effect at iteration e + n (the next evaluation
boundary). The controller normally answers far faster than n iterations,
so two runs with the same config and seed replay identically; if the
controller is stalled past the deadline, the decision applies at the
first boundary after it arrives and training itself never waits.
"""

from __future__ import annotations

import copy
import json
import math
import os
import re
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from glacier.cache import ActivationCache, PrefetchSchedule, cache_eligibility
from glacier.config import (
    CacheConfig,
    ConfigError,
    DatasetConfig,
    ModelConfig,
    TrainConfig,
    auto_eval_interval,
    config_hash,
)
from glacier.data import (
    AugSpec,
    Batch,
    Dataset,
    load_idx,
    next_batch,
    sample_epoch,
    synth_dataset,
)
from glacier.metrics import EPOCHS_HEADER, METRICS_HEADER, CsvWriter
from glacier.nn import (
    FLOAT,
    BatchNorm,
    Conv2d,
    Dense,
    Flatten,
    Layer,
    LayerModule,
    MaxPool2d,
    Model,
    Relu,
    count_flops,
    prefix_flop_fraction,
    sgd_step,
    softmax_cross_entropy,
    step_decay_lr,
)
from glacier.plasticity import (
    KNOWLEDGE_GUIDED,
    ControllerParams,
    Decision,
    PlasticityTracker,
)
from glacier.queues import (
    ControllerRuntime,
    ControllerThread,
    LossProbe,
    QueueSet,
    SpscQueue,
    WeightSnapshot,
    apply_decision,
    submit_evaluation,
)


class TrainRuntimeError(RuntimeError):
    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


# ---------------------------------------------------------------------------
# model building
# ---------------------------------------------------------------------------


def build_layers(mcfg: ModelConfig, classes: int, rng: np.random.Generator):
    """Instantiate the architecture's named layer list plus default groups."""
    if mcfg.arch == "toy_cnn":
        if len(mcfg.input_shape) != 3:
            raise ConfigError("toy_cnn needs input_shape = channels,h,w")
        cin, h, w = mcfg.input_shape
        if len(mcfg.conv_channels) != 2:
            raise ConfigError("toy_cnn needs two conv_channels")
        c1, c2 = mcfg.conv_channels
        layers: list[Layer] = [Conv2d("conv1", cin, c1, 3, rng)]
        if mcfg.batchnorm:
            layers.append(BatchNorm("bn1", c1))
        layers += [Relu("relu1"), MaxPool2d("pool1"), Conv2d("conv2", c1, c2, 3, rng)]
        if mcfg.batchnorm:
            layers.append(BatchNorm("bn2", c2))
        layers += [
            Relu("relu2"),
            MaxPool2d("pool2"),
            Flatten("flatten"),
            Dense("fc1", c2 * (h // 4) * (w // 4), mcfg.hidden, rng),
            Relu("relu3"),
            Dense("fc2", mcfg.hidden, classes, rng),
        ]
        default_groups = (
            "conv1|bn1|relu1|pool1",
            "conv2|bn2|relu2|pool2",
            "flatten|fc1|relu3",
            "fc2",
        )
        return layers, default_groups
    if mcfg.arch == "mlp":
        dim = int(np.prod(mcfg.input_shape))
        layers = [
            Dense("fc1", dim, mcfg.hidden, rng),
            Relu("relu1"),
            Dense("fc2", mcfg.hidden, mcfg.hidden, rng),
            Relu("relu2"),
            Dense("fc3", mcfg.hidden, classes, rng),
        ]
        return layers, ("fc1|relu1", "fc2|relu2", "fc3")
    raise ConfigError(f"unknown model arch {mcfg.arch!r}")


def group_layers(layers: list[Layer], patterns: tuple[str, ...]) -> list[LayerModule]:
    """Partition layers into modules by name regexes, one pattern per module.

    Every layer must match exactly one pattern and the matched groups must
    be contiguous in layer order.
    """
    compiled = [re.compile(p) for p in patterns]
    assignment = []
    for layer in layers:
        hits = [gi for gi, rx in enumerate(compiled) if rx.fullmatch(layer.name)]
        if len(hits) != 1:
            raise ConfigError(
                f"layer '{layer.name}' matched {len(hits)} grouping patterns; need exactly 1"
            )
        assignment.append(hits[0])
    if assignment and (assignment[0] != 0 or any(b - a not in (0, 1) for a, b in
                                                 zip(assignment, assignment[1:]))):
        raise ConfigError(f"grouping patterns must form contiguous modules, got {assignment}")
    if assignment and assignment[-1] != len(patterns) - 1:
        raise ConfigError("some grouping patterns matched no layer")
    modules = []
    for gi, pattern in enumerate(patterns):
        members = [layer for layer, a in zip(layers, assignment) if a == gi]
        modules.append(LayerModule(pattern, members, gi))
    return modules


def build_model(mcfg: ModelConfig, classes: int, seed: int) -> Model:
    from glacier.data import _gen  # counter-based init stream

    rng = _gen(seed, "init")
    layers, default_groups = build_layers(mcfg, classes, rng)
    patterns = mcfg.groups or default_groups
    return Model(group_layers(layers, patterns), input_shape=mcfg.input_shape)


def model_snapshot(model: Model) -> Model:
    """Detached deep copy safe to hand to the controller thread."""
    snap = copy.deepcopy(model)
    for m in snap.modules:
        for layer in m.layers:
            layer._cache = None
    snap._backward_ready = False
    return snap


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def build_datasets(dcfg: DatasetConfig, seed: int):
    """(train, val-or-None, classes) from the dataset config."""
    if dcfg.kind == "idx":
        if not dcfg.images or not dcfg.labels:
            raise ConfigError("idx dataset needs 'images' and 'labels' paths")
        train = load_idx(dcfg.images, dcfg.labels)
        val = None
        if dcfg.val_images and dcfg.val_labels:
            val = load_idx(dcfg.val_images, dcfg.val_labels)
        classes = int(train.labels.max()) + 1
        return train, val, classes
    train = synth_dataset(dcfg.kind, dcfg.classes, dcfg.per_class, dcfg.dim, seed, dcfg.noise)
    val = None
    if dcfg.val_per_class > 0:
        val = synth_dataset(
            dcfg.kind, dcfg.classes, dcfg.val_per_class, dcfg.dim, seed, dcfg.noise,
            start_index=len(train),
        )
    return train, val, dcfg.classes


# ---------------------------------------------------------------------------
# all-reduce simulation
# ---------------------------------------------------------------------------


def allreduce_grads(worker_grads: list[list[np.ndarray]]) -> tuple[list[np.ndarray], float]:
    """Mean the per-worker gradient lists; return (means, bytes per worker).

    Byte volume models ring all-reduce: 4 bytes per parameter times
    2(K-1)/K. A single worker moves nothing.
    """
    k = len(worker_grads)
    if k == 0:
        raise ValueError("no worker gradients")
    first = worker_grads[0]
    for wg in worker_grads[1:]:
        if len(wg) != len(first) or any(a.shape != b.shape for a, b in zip(wg, first)):
            raise ValueError("gradient shapes differ across workers")
    if k == 1:
        means = first
    else:
        means = [np.mean(np.stack([wg[j] for wg in worker_grads]), axis=0).astype(FLOAT)
                 for j in range(len(first))]
    param_count = sum(g.size for g in first)
    volume = 4.0 * param_count * (2.0 * (k - 1) / k)
    return means, volume


def allreduce_bytes(active_param_count: int, num_workers: int) -> float:
    return 4.0 * active_param_count * (2.0 * (num_workers - 1) / num_workers)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate(model: Model, dataset: Dataset, batch_size: int = 256) -> float:
    """Inference-mode top-1 accuracy over the full dataset."""
    n = len(dataset)
    correct = 0
    for start in range(0, n, batch_size):
        block = dataset.samples[start : start + batch_size]
        x = np.ascontiguousarray(block.reshape((len(block),) + model.input_shape), dtype=FLOAT)
        logits, _ = model.forward(x, train=False)
        correct += int((logits.argmax(axis=1) == dataset.labels[start : start + batch_size]).sum())
    return correct / n


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"EGER"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    config_digest: bytes
    arch_json: str
    seed: int
    epoch: int
    iteration: int
    freeze_version: int
    frontmost_active: int
    stale_counter: int
    stage: str
    w_current: int
    lr_at_frontmost_freeze: float | None
    records: dict[str, np.ndarray]


def _model_records(model: Model) -> dict[str, np.ndarray]:
    records: dict[str, np.ndarray] = {}
    for m in model.modules:
        for layer in m.layers:
            for p in layer.parameters():
                records[p.name] = p.value
            if isinstance(layer, BatchNorm):
                records[f"{layer.name}.running_mean"] = layer.running_mean
                records[f"{layer.name}.running_var"] = layer.running_var
    return records


def checkpoint_from_model(model: Model, cfg: TrainConfig, classes: int, epoch: int,
                          iteration: int, tracker: PlasticityTracker | None = None) -> Checkpoint:
    arch = {
        "arch": cfg.model.arch,
        "conv_channels": list(cfg.model.conv_channels),
        "hidden": cfg.model.hidden,
        "batchnorm": cfg.model.batchnorm,
        "input_shape": list(cfg.model.input_shape),
        "groups": list(cfg.model.groups),
        "classes": classes,
    }
    state = tracker.state if tracker is not None else None
    return Checkpoint(
        config_digest=config_hash(cfg),
        arch_json=json.dumps(arch, sort_keys=True),
        seed=cfg.seed,
        epoch=epoch,
        iteration=iteration,
        freeze_version=model.freeze_version,
        frontmost_active=model.frontmost_active,
        stale_counter=state.stale_counter if state else 0,
        stage=state.stage if state else "bootstrapping",
        w_current=state.w_current if state else cfg.controller.w,
        lr_at_frontmost_freeze=state.lr_at_frontmost_freeze if state else None,
        records={k: v.copy() for k, v in _model_records(model).items()},
    )


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(ckpt.config_digest.ljust(32, b"\0")[:32])
        arch = ckpt.arch_json.encode()
        f.write(struct.pack("<I", len(arch)))
        f.write(arch)
        lr = math.nan if ckpt.lr_at_frontmost_freeze is None else ckpt.lr_at_frontmost_freeze
        f.write(
            struct.pack(
                "<qIQIIIBId",
                ckpt.seed,
                ckpt.epoch,
                ckpt.iteration,
                ckpt.freeze_version,
                ckpt.frontmost_active,
                ckpt.stale_counter,
                1 if ckpt.stage == KNOWLEDGE_GUIDED else 0,
                ckpt.w_current,
                lr,
            )
        )
        f.write(struct.pack("<I", len(ckpt.records)))
        for name, arr in ckpt.records.items():
            enc = name.encode()
            payload = np.ascontiguousarray(arr, dtype="<f4")
            f.write(struct.pack("<I", len(enc)))
            f.write(enc)
            f.write(struct.pack("<I", payload.ndim))
            f.write(np.asarray(payload.shape, dtype="<u8").tobytes())
            f.write(payload.tobytes())


def _ckpt_read(f, count: int, what: str) -> bytes:
    offset = f.tell()
    buf = f.read(count)
    if len(buf) != count:
        raise ValueError(f"corrupt checkpoint: truncated {what} at offset {offset}")
    return buf


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        if _ckpt_read(f, 4, "magic") != CKPT_MAGIC:
            raise ValueError(f"corrupt checkpoint: bad magic at offset 0 in {path}")
        (version,) = struct.unpack("<I", _ckpt_read(f, 4, "version"))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        digest = _ckpt_read(f, 32, "config hash")
        (arch_len,) = struct.unpack("<I", _ckpt_read(f, 4, "arch length"))
        arch_json = _ckpt_read(f, arch_len, "arch descriptor").decode()
        seed, epoch, iteration, fz, front, stale, stage_b, w_cur, lr = struct.unpack(
            "<qIQIIIBId", _ckpt_read(f, struct.calcsize("<qIQIIIBId"), "run state")
        )
        (count,) = struct.unpack("<I", _ckpt_read(f, 4, "record count"))
        records: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _ckpt_read(f, 4, "record name length"))
            name = _ckpt_read(f, name_len, "record name").decode()
            (rank,) = struct.unpack("<I", _ckpt_read(f, 4, "record rank"))
            dims = np.frombuffer(_ckpt_read(f, 8 * rank, "record dims"), dtype="<u8")
            shape = tuple(int(d) for d in dims)
            nbytes = int(np.prod(shape)) * 4
            records[name] = (
                np.frombuffer(_ckpt_read(f, nbytes, f"payload of {name}"), dtype="<f4")
                .reshape(shape)
                .copy()
            )
        if f.read(1):
            raise ValueError("corrupt checkpoint: trailing bytes")
    return Checkpoint(
        config_digest=digest,
        arch_json=arch_json,
        seed=seed,
        epoch=epoch,
        iteration=iteration,
        freeze_version=fz,
        frontmost_active=front,
        stale_counter=stale,
        stage=KNOWLEDGE_GUIDED if stage_b else "bootstrapping",
        w_current=w_cur,
        lr_at_frontmost_freeze=None if math.isnan(lr) else lr,
        records=records,
    )


def restore_model(ckpt: Checkpoint) -> Model:
    """Rebuild the architecture from the checkpoint and load its weights."""
    arch = json.loads(ckpt.arch_json)
    mcfg = ModelConfig(
        arch=arch["arch"],
        conv_channels=tuple(arch["conv_channels"]),
        hidden=arch["hidden"],
        batchnorm=arch["batchnorm"],
        input_shape=tuple(arch["input_shape"]),
        groups=tuple(arch["groups"]),
    )
    model = build_model(mcfg, arch["classes"], seed=0)
    expected = _model_records(model)
    if set(expected) != set(ckpt.records):
        missing = sorted(set(expected) ^ set(ckpt.records))
        raise ValueError(f"checkpoint does not match architecture; differing records: {missing}")
    for m in model.modules:
        for layer in m.layers:
            for p in layer.parameters():
                arr = ckpt.records[p.name]
                if arr.shape != p.value.shape:
                    raise ValueError(
                        f"shape mismatch for {p.name}: checkpoint {arr.shape} vs model "
                        f"{p.value.shape}"
                    )
                p.value = arr.copy()
            if isinstance(layer, BatchNorm):
                layer.running_mean = ckpt.records[f"{layer.name}.running_mean"].copy()
                layer.running_var = ckpt.records[f"{layer.name}.running_var"].copy()
    for idx in range(ckpt.frontmost_active):
        model.modules[idx].set_frozen(True)
    model.frontmost_active = ckpt.frontmost_active
    model.freeze_version = ckpt.freeze_version
    return model


# ---------------------------------------------------------------------------
# prefetcher thread
# ---------------------------------------------------------------------------


class Prefetcher:
    """Warms one worker's resident cache window just ahead of consumption."""

    def __init__(self, cache: ActivationCache, depth: int):
        self.cache = cache
        self.depth = depth
        self.batches: list[np.ndarray] = []
        self.position = -1
        self.freeze = (-1, 0)  # (boundary_module, freeze_version); -1 disables
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="prefetcher", daemon=True)

    def start(self) -> None:
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        self._thread.join()

    def _run(self) -> None:
        while not self._stop.is_set():
            boundary, version = self.freeze
            if boundary >= 0 and self.depth > 0 and self.cache.enabled:
                pos = self.position
                upcoming = self.batches[pos + 1 : pos + 1 + self.depth]
                if upcoming:
                    self.cache.prefetch(
                        PrefetchSchedule(upcoming, self.depth), boundary, version,
                        start_pos=pos + 1,
                    )
            time.sleep(0.001)


# ---------------------------------------------------------------------------
# the training run
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    out_dir: str
    metrics_path: str
    epochs_path: str
    decisions_path: str
    checkpoint_path: str
    summary_path: str
    final_val_accuracy: float | None
    counters: dict
    decision_log: list[str]
    resolved_n: int
    models: list[Model]  # final per-worker replicas, worker 0 first


@dataclass
class _Shared:
    barrier: threading.Barrier | None
    grad_slots: list
    decisions: list = field(default_factory=list)  # (apply_at, Decision), worker 0 appends
    stop: threading.Event = field(default_factory=threading.Event)
    failure: list = field(default_factory=list)  # (worker_id, iteration, exception)


class _Worker:
    def __init__(self, wid: int, model: Model, cache: ActivationCache | None,
                 prefetcher: Prefetcher | None, cfg: TrainConfig, n: int,
                 iters_per_epoch: int, train_ds: Dataset, val_ds: Dataset | None,
                 aug: AugSpec | None, shared: _Shared, queues: QueueSet,
                 runtime: ControllerRuntime, metrics: CsvWriter | None,
                 epochs_csv: CsvWriter | None):
        self.wid = wid
        self.model = model
        self.cache = cache
        self.prefetcher = prefetcher
        self.cfg = cfg
        self.n = n
        self.decision_delay = cfg.decision_delay_iters or max(n, 25)
        self.iters_per_epoch = iters_per_epoch
        self.train_ds = train_ds
        self.val_ds = val_ds
        self.aug = aug
        self.shared = shared
        self.queues = queues
        self.runtime = runtime
        self.metrics = metrics
        self.epochs_csv = epochs_csv
        self.cursor = 0
        self.kg_start: int | None = None
        self.submissions = 0
        self.recent_losses: deque = deque(maxlen=n)
        self.cache_active = False
        self.update_every = cfg.reference.update_every_evals or cfg.controller.w
        self.iteration = 0

    # -- helpers -------------------------------------------------------------

    def _sync(self) -> None:
        if self.shared.barrier is not None:
            self.shared.barrier.wait()

    def _refresh_cache_state(self) -> None:
        front = self.model.frontmost_active
        if self.cache is None or front == 0:
            self.cache_active = False
        else:
            frac = prefix_flop_fraction(self.model, front)
            self.cache_active = self.cache.enabled and cache_eligibility(
                frac, self.cfg.cache.threshold
            )
        if self.prefetcher is not None:
            if self.cache_active:
                self.prefetcher.freeze = (front - 1, self.model.freeze_version)
            else:
                self.prefetcher.freeze = (-1, 0)

    def _drain_decisions(self) -> None:
        # worker 0 only, between barriers so the list is stable for everyone
        while True:
            decision = self.runtime.decisions.get()
            if decision is None:
                return
            apply_at = decision.iteration + self.decision_delay
            self.shared.decisions.append((apply_at, decision))

    def _apply_due(self) -> None:
        while self.cursor < len(self.shared.decisions):
            apply_at, decision = self.shared.decisions[self.cursor]
            if apply_at > self.iteration:
                break
            self.cursor += 1
            if decision.kind == "stage":
                if self.kg_start is None:
                    self.kg_start = self.iteration
                continue
            apply_decision(self.model, decision, self.cache)
            self._refresh_cache_state()

    def _maybe_submit(self, iteration: int, batch_x: np.ndarray, taps: dict) -> None:
        if self.wid != 0 or not self.cfg.freezing_enabled:
            return
        front = self.model.frontmost_active
        last = len(self.model.modules) - 1
        if self.kg_start is not None:
            if (iteration - self.kg_start) % self.n != 0:
                return
            if front < last:
                if self.submissions % self.update_every == 0:
                    self.queues.iq.put(WeightSnapshot(iteration, model_snapshot(self.model)))
                submit_evaluation(self.queues, batch_x, taps[front], iteration, front)
                self.submissions += 1
            else:
                self.queues.iq.put(LossProbe(iteration, self._smoothed_loss()))
        else:
            if iteration > 0 and iteration % self.n == 0 and self.recent_losses:
                self.queues.iq.put(LossProbe(iteration, self._smoothed_loss()))

    def _smoothed_loss(self) -> float:
        return float(sum(self.recent_losses) / len(self.recent_losses))

    # -- main loop -------------------------------------------------------------

    def run(self) -> None:
        try:
            self._run_inner()
        except BaseException as err:
            self.shared.failure.append((self.wid, self.iteration, err))
            self.shared.stop.set()
            if self.shared.barrier is not None:
                self.shared.barrier.abort()

    def _run_inner(self) -> None:
        cfg = self.cfg
        k = cfg.workers
        input_shape = self.model.input_shape
        for epoch in range(cfg.epochs):
            schedule = sample_epoch(
                self.train_ds, cfg.seed, epoch, self.wid, cfg.batch_size, k, self.aug
            )
            if self.prefetcher is not None:
                self.prefetcher.batches = [b for b in schedule.batches]
                self.prefetcher.position = -1
            lr = step_decay_lr(cfg.lr, epoch)
            for bi in range(self.iters_per_epoch):
                if self.shared.stop.is_set():
                    return
                started = time.perf_counter()
                # boundary: circulate and apply controller decisions
                self._sync()
                if self.wid == 0:
                    self._drain_decisions()
                self._sync()
                self._apply_due()
                front = self.model.frontmost_active

                batch = next_batch(self.train_ds, schedule, bi)
                b = len(batch.labels)
                x = np.ascontiguousarray(
                    batch.inputs.reshape((b,) + input_shape), dtype=FLOAT
                )
                if self.prefetcher is not None:
                    self.prefetcher.position = bi

                taps = {front} if front < len(self.model.modules) else set()
                hit = 0
                cached_act = None
                if self.cache_active:
                    cached_act = self.cache.get(
                        batch.sample_ids, front - 1, self.model.freeze_version
                    )
                if cached_act is not None:
                    hit = 1
                    logits, tapped = self.model.forward(
                        cached_act, train=True, taps=taps, start_module=front
                    )
                else:
                    want = set(taps)
                    if self.cache_active:
                        want.add(front - 1)
                    logits, tapped = self.model.forward(x, train=True, taps=want)
                    if self.cache_active:
                        self.cache.put(
                            epoch, bi, batch.sample_ids, tapped[front - 1],
                            front - 1, self.model.freeze_version,
                        )
                loss, grad = softmax_cross_entropy(logits, batch.labels)
                self.model.backward(grad)
                self.recent_losses.append(loss)
                self._maybe_submit(self.iteration, x, tapped)

                # freezing-aware gradient synchronization
                active_params = [
                    p for m in self.model.modules[front:] for p in m.parameters()
                ]
                if k > 1:
                    self.shared.grad_slots[self.wid] = [p.grad for p in active_params]
                    self._sync()
                    means, volume = allreduce_grads(self.shared.grad_slots)
                    for p, g in zip(active_params, means):
                        p.grad = g
                    self._sync()
                else:
                    volume = 0.0
                sgd_step(self.model.parameters(), lr)

                if self.metrics is not None:
                    self.metrics.write_row(
                        {
                            "iteration": self.iteration,
                            "epoch": epoch,
                            "loss": loss,
                            "lr": lr,
                            "frontmost_active": front,
                            "frozen_param_fraction": self.model.frozen_param_fraction(),
                            "fwd_flops": count_flops(self.model, front, b, cached_prefix=bool(hit))[0],
                            "bwd_flops": count_flops(self.model, front, b)[1],
                            "bytes_allreduced": volume,
                            "cache_hits": hit,
                            "wall_ms": (time.perf_counter() - started) * 1e3,
                        }
                    )
                self.iteration += 1
            if self.wid == 0 and self.epochs_csv is not None and self.val_ds is not None:
                self.epochs_csv.write_row(
                    {"epoch": epoch, "val_accuracy": evaluate(self.model, self.val_ds)}
                )


def _shard_batches(n_samples: int, num_workers: int, batch_size: int) -> int:
    sizes = [len(range(w, n_samples, num_workers)) for w in range(num_workers)]
    return min(math.ceil(s / batch_size) for s in sizes)


def train(cfg: TrainConfig) -> RunResult:
    """Run the full two-stage training life cycle described by the config."""
    cfg.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    train_ds, val_ds, classes = build_datasets(cfg.dataset, cfg.seed)

    sample_dim = int(np.prod(train_ds.samples.shape[1:]))
    if sample_dim != int(np.prod(cfg.model.input_shape)):
        raise ConfigError(
            f"input_shape {cfg.model.input_shape} does not cover sample size {sample_dim}"
        )

    models = [build_model(cfg.model, classes, cfg.seed) for _ in range(cfg.workers)]
    module_count = len(models[0].modules)
    iters_per_epoch = _shard_batches(len(train_ds), cfg.workers, cfg.batch_size)
    total_iters = cfg.epochs * iters_per_epoch
    n = cfg.controller.n
    if cfg.n_auto:
        n = auto_eval_interval(max(total_iters, 1), cfg.controller.w, module_count)
    params = ControllerParams(
        n=n,
        w=cfg.controller.w,
        t_coeff=cfg.controller.t_coeff,
        bootstrap_rate=cfg.controller.bootstrap_rate,
        lr_unfreeze_factor=cfg.controller.lr_unfreeze_factor,
    )

    tracker = PlasticityTracker(module_count, params)
    queues = QueueSet(
        iq=SpscQueue(cfg.queue_capacity, "IQ"),
        roq=SpscQueue(cfg.queue_capacity, "ROQ"),
        toq=SpscQueue(cfg.queue_capacity, "TOQ"),
    )

    def lr_for_iteration(iteration: int) -> float:
        return step_decay_lr(cfg.lr, iteration // max(iters_per_epoch, 1))

    load_gate = None
    if cfg.cpu_load_gate > 0:
        cpus = os.cpu_count() or 1

        def load_gate() -> bool:
            return os.getloadavg()[0] / cpus >= cfg.cpu_load_gate

    runtime = ControllerRuntime(
        queues,
        tracker,
        lr_for_iteration,
        pairing_horizon_iters=cfg.pairing_horizon_evals * n,
        reference_precision=cfg.reference.precision,
        load_gate=load_gate,
    )
    controller = ControllerThread(runtime, stall_seconds=cfg.controller_stall_s)

    cache_dir = cfg.cache.dir or os.path.join(cfg.out_dir, "cache")
    caches: list[ActivationCache | None] = []
    prefetchers: list[Prefetcher | None] = []
    for wid in range(cfg.workers):
        if cfg.cache.enabled:
            cache = ActivationCache(
                cache_dir,
                wid,
                resident_batches=cfg.cache.resident_batches,
                disk_limit_bytes=cfg.cache.disk_limit_bytes or None,
            )
            caches.append(cache)
            prefetchers.append(Prefetcher(cache, cfg.cache.prefetch_depth))
        else:
            caches.append(None)
            prefetchers.append(None)

    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    epochs_path = os.path.join(cfg.out_dir, "epochs.csv")
    decisions_path = os.path.join(cfg.out_dir, "decisions.log")
    checkpoint_path = os.path.join(cfg.out_dir, "checkpoint.bin")
    summary_path = os.path.join(cfg.out_dir, "run_summary.json")
    metrics = CsvWriter(metrics_path, METRICS_HEADER)
    epochs_csv = CsvWriter(epochs_path, EPOCHS_HEADER)

    aug = None
    if cfg.dataset.flip_p > 0 or cfg.dataset.pad_crop > 0:
        aug = AugSpec(seed=cfg.seed, flip_p=cfg.dataset.flip_p, pad_crop=cfg.dataset.pad_crop)

    shared = _Shared(
        barrier=threading.Barrier(cfg.workers) if cfg.workers > 1 else None,
        grad_slots=[None] * cfg.workers,
    )
    workers = [
        _Worker(
            wid,
            models[wid],
            caches[wid],
            prefetchers[wid],
            cfg,
            n,
            iters_per_epoch,
            train_ds,
            val_ds,
            aug,
            shared,
            queues,
            runtime,
            metrics if wid == 0 else None,
            epochs_csv if wid == 0 else None,
        )
        for wid in range(cfg.workers)
    ]

    controller.start()
    for p in prefetchers:
        if p is not None:
            p.start()
    error: tuple | None = None
    try:
        if cfg.workers == 1:
            workers[0].run()
        else:
            threads = [
                threading.Thread(target=w.run, name=f"worker{w.wid}", daemon=True)
                for w in workers
            ]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        if shared.failure:
            error = shared.failure[0]
    finally:
        for p in prefetchers:
            if p is not None:
                p.stop()
        for c in caches:
            if c is not None:
                c.close()
        metrics.close()
        epochs_csv.close()
        try:
            controller.stop()
        finally:
            with open(decisions_path, "w") as fh:
                for line in tracker.log:
                    fh.write(line + "\n")

    final_acc = None
    if error is None and val_ds is not None and cfg.epochs > 0:
        final_acc = evaluate(models[0], val_ds)
    if error is None:
        ckpt = checkpoint_from_model(
            models[0], cfg, classes, max(cfg.epochs - 1, 0),
            workers[0].iteration, tracker,
        )
        save_checkpoint(checkpoint_path, ckpt)

    counters = {
        "queue_evictions": queues.evictions,
        "pairing_timeouts": runtime.metrics["pairing_timeouts"],
        "stale_discards": runtime.metrics["stale_discards"],
        "decisions_emitted": runtime.metrics["decisions_emitted"],
        "decisions_applied": workers[0].cursor,
        "evaluations": runtime.metrics["evaluations"],
        "reference_updates": runtime.metrics["reference_updates"],
        "controller_eval_latency_ms": runtime.metrics["eval_latency_ms_last"],
        "error_iteration": error[1] if error else None,
    }
    if caches[0] is not None:
        counters["cache"] = dict(caches[0].counters)

    with open(summary_path, "w") as fh:
        json.dump(
            {
                "final_val_accuracy": final_acc,
                "resolved_n": n,
                "iterations": workers[0].iteration,
                "counters": {k: v for k, v in counters.items() if k != "cache"},
                "cache_counters": counters.get("cache"),
            },
            fh,
            indent=2,
        )

    if error is not None:
        wid, iteration, exc = error
        raise TrainRuntimeError(
            f"worker {wid} failed at iteration {iteration}: {exc!r}", iteration
        ) from exc

    return RunResult(
        out_dir=cfg.out_dir,
        metrics_path=metrics_path,
        epochs_path=epochs_path,
        decisions_path=decisions_path,
        checkpoint_path=checkpoint_path,
        summary_path=summary_path,
        final_val_accuracy=final_acc,
        counters=counters,
        decision_log=list(tracker.log),
        resolved_n=n,
        models=models,
    )
