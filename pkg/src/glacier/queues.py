"""Non-blocking evaluation pipeline between the training worker and controller.

Three bounded single-producer/single-consumer queues carry the protocol:
the worker drops each evaluation's input batch into IQ and its own tapped
activation into TOQ and keeps training; the controller polls IQ, runs the
reference model forward, parks the result in ROQ, and pairs ROQ/TOQ
entries by (iteration, module_index) to drive the freeze algorithm.
Producers never block: on overflow the oldest entry is evicted and
counted. Losing a sample only delays a decision, it never stalls an
iteration.
"""

from __future__ import annotations

import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from glacier.cache import ActivationCache
from glacier.nn import Model
from glacier.plasticity import (
    BOOTSTRAPPING,
    Decision,
    PlasticityTracker,
    ProtocolError,
)
from glacier.quant import ReferenceModel, reference_forward, snapshot_reference


class SpscQueue:
    """Bounded FIFO for exactly one producer and one consumer thread.

    Relies on the GIL for atomic deque operations; put() evicts the
    oldest entry instead of blocking when full.
    """

    def __init__(self, capacity: int = 8, name: str = ""):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.name = name
        self.evictions = 0
        self._items: deque = deque()

    def put(self, item) -> None:
        if len(self._items) >= self.capacity:
            self._items.popleft()
            self.evictions += 1
        self._items.append(item)

    def get(self):
        try:
            return self._items.popleft()
        except IndexError:
            return None

    def __len__(self) -> int:
        return len(self._items)


class UnboundedChannel:
    """FIFO with the same SPSC discipline but no capacity bound.

    Used for controller decisions, which must never be dropped.
    """

    def __init__(self, name: str = ""):
        self.name = name
        self._items: deque = deque()

    def put(self, item) -> None:
        self._items.append(item)

    def get(self):
        try:
            return self._items.popleft()
        except IndexError:
            return None

    def __len__(self) -> int:
        return len(self._items)


# ---------------------------------------------------------------------------
# messages
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalRequest:
    iteration: int
    batch: np.ndarray  # the augmented input mini-batch
    module_index: int


@dataclass(frozen=True)
class EvalResult:
    iteration: int
    activation: np.ndarray
    source: str  # "training" | "reference"
    module_index: int


@dataclass(frozen=True)
class LossProbe:
    """Smoothed-training-loss report; drives bootstrapping and the LR clock."""

    iteration: int
    smoothed_loss: float


@dataclass(frozen=True)
class WeightSnapshot:
    """Controller-bound copy of the training model for reference refresh."""

    iteration: int
    model: Model  # detached snapshot, never the live training model


@dataclass
class QueueSet:
    iq: SpscQueue = field(default_factory=lambda: SpscQueue(8, "IQ"))
    roq: SpscQueue = field(default_factory=lambda: SpscQueue(8, "ROQ"))
    toq: SpscQueue = field(default_factory=lambda: SpscQueue(8, "TOQ"))

    @property
    def evictions(self) -> int:
        return self.iq.evictions + self.roq.evictions + self.toq.evictions


def submit_evaluation(
    queues: QueueSet,
    batch: np.ndarray,
    a_t: np.ndarray,
    iteration: int,
    module_index: int,
) -> None:
    """Enqueue one evaluation; returns immediately, never blocks training."""
    queues.iq.put(EvalRequest(iteration, batch, module_index))
    queues.toq.put(EvalResult(iteration, a_t, "training", module_index))


# ---------------------------------------------------------------------------
# controller runtime
# ---------------------------------------------------------------------------


class ControllerRuntime:
    """Controller-side half of the protocol: pairing, reference, decisions.

    Everything here runs on the controller thread. The learning rate is
    derived locally from the schedule (``lr_for_iteration``) instead of
    being shipped on the wire.
    """

    def __init__(
        self,
        queues: QueueSet,
        tracker: PlasticityTracker,
        lr_for_iteration: Callable[[int], float],
        pairing_horizon_iters: int,
        reference_precision: str = "int8",
        load_gate: Callable[[], bool] | None = None,
    ):
        self.queues = queues
        self.tracker = tracker
        self.lr_for_iteration = lr_for_iteration
        self.pairing_horizon_iters = pairing_horizon_iters
        self.reference_precision = reference_precision
        self.load_gate = load_gate
        self.reference: ReferenceModel | None = None
        self.decisions = UnboundedChannel("decisions")
        self.metrics = {
            "pairing_timeouts": 0,
            "stale_discards": 0,
            "decisions_emitted": 0,
            "evaluations": 0,
            "reference_updates": 0,
            "eval_latency_ms_last": 0.0,
        }
        self._pending_t: dict[tuple[int, int], EvalResult] = {}
        self._watermark = 0

    def _purge_stale(self) -> None:
        horizon = self._watermark - self.pairing_horizon_iters
        for key in [k for k in self._pending_t if k[0] < horizon]:
            del self._pending_t[key]
            self.metrics["pairing_timeouts"] += 1

    def _emit(self, decision: Decision | None) -> Decision | None:
        if decision is not None:
            self.metrics["decisions_emitted"] += 1
            self.decisions.put(decision)
        return decision

    def step(self) -> Decision | None:
        """Process at most one controller-bound message; None when idle."""
        if self.load_gate is not None and self.load_gate():
            return None  # skip work while the host is busy
        msg = self.queues.iq.get()
        # drain the training-output queue into the pairing buffer
        while True:
            res = self.queues.toq.get()
            if res is None:
                break
            self._pending_t[(res.iteration, res.module_index)] = res
            self._watermark = max(self._watermark, res.iteration)
        if msg is None:
            self._purge_stale()
            return None
        self._watermark = max(self._watermark, msg.iteration)
        self._purge_stale()

        if isinstance(msg, LossProbe):
            decision = self.tracker.bootstrap_update(msg.iteration, msg.smoothed_loss)
            if decision is None and self.tracker.state.stage != BOOTSTRAPPING:
                decision = self.tracker.lr_unfreeze_check(
                    msg.iteration, self.lr_for_iteration(msg.iteration)
                )
            return self._emit(decision)

        if isinstance(msg, WeightSnapshot):
            self.reference = snapshot_reference(
                msg.model,
                snapshot_iteration=msg.iteration,
                previous=self.reference,
                precision=self.reference_precision,
            )
            self.metrics["reference_updates"] += 1
            return None

        if isinstance(msg, EvalRequest):
            return self._emit(self._handle_eval(msg))

        raise ProtocolError(f"unexpected message on IQ: {type(msg).__name__}")

    def _handle_eval(self, req: EvalRequest) -> Decision | None:
        if req.module_index != self.tracker.state.frontmost:
            # the request raced with a freeze decision; drop it
            self.metrics["stale_discards"] += 1
            self._pending_t.pop((req.iteration, req.module_index), None)
            return None
        if self.reference is None:
            self.metrics["stale_discards"] += 1
            return None
        started = time.perf_counter()
        a_r = reference_forward(self.reference, req.batch, req.module_index)
        self.queues.roq.put(EvalResult(req.iteration, a_r, "reference", req.module_index))

        decision = None
        while True:
            ref_res = self.queues.roq.get()
            if ref_res is None:
                break
            key = (ref_res.iteration, ref_res.module_index)
            train_res = self._pending_t.pop(key, None)
            if train_res is None:
                self.metrics["pairing_timeouts"] += 1
                continue
            decision = self.tracker.check_plasticity(
                ref_res.iteration,
                train_res.activation,
                ref_res.activation,
                self.lr_for_iteration(ref_res.iteration),
            )
            self.metrics["evaluations"] += 1
        self.metrics["eval_latency_ms_last"] = (time.perf_counter() - started) * 1e3
        return decision


def controller_step(runtime: ControllerRuntime) -> Decision | None:
    return runtime.step()


# ---------------------------------------------------------------------------
# worker-side decision application
# ---------------------------------------------------------------------------


def apply_decision(model: Model, decision: Decision, cache: ActivationCache | None = None) -> None:
    """Apply a freeze/unfreeze decision at an iteration boundary.

    freeze: marks the frontmost module immutable (its batchnorm layers go
    to inference mode for good) and advances the boundary. unfreeze_all:
    clears every flag, restores batchnorm training, and invalidates the
    cache via the freeze-version bump. Stage decisions carry no model
    change.
    """
    if decision.kind == "stage":
        return
    if decision.kind == "freeze":
        if decision.module != model.frontmost_active:
            raise ProtocolError(
                f"freeze({decision.module}) does not target the frontmost active "
                f"module ({model.frontmost_active})"
            )
        model.freeze_frontmost()
        if cache is not None:
            cache.invalidate_resident()
        return
    if decision.kind == "unfreeze_all":
        model.unfreeze_all()
        if cache is not None:
            cache.invalidate_resident()
        return
    raise ProtocolError(f"unknown decision kind {decision.kind!r}")


class ControllerThread:
    """Long-lived controller loop; polls the runtime until stopped.

    ``stall_seconds`` injects an artificial processing stall (sliced so
    shutdown is still prompt) for testing the non-blocking contract.
    """

    def __init__(self, runtime: ControllerRuntime, stall_seconds: float = 0.0):
        self.runtime = runtime
        self.stall_seconds = stall_seconds
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="controller", daemon=True)
        self.error: BaseException | None = None

    def start(self) -> None:
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        self._thread.join()
        if self.error is not None:
            raise self.error

    def _sleep_sliced(self, seconds: float) -> None:
        deadline = time.perf_counter() + seconds
        while not self._stop.is_set() and time.perf_counter() < deadline:
            time.sleep(0.005)

    def _run(self) -> None:
        try:
            if self.stall_seconds > 0:
                self._sleep_sliced(self.stall_seconds)
            while not self._stop.is_set():
                if self.runtime.step() is None and not len(self.runtime.queues.iq):
                    # idle gently: frequent wakeups contend on the GIL and
                    # visibly slow the training threads down
                    time.sleep(0.003)
            while self.runtime.step() is not None:  # drain what is already queued
                pass
        except BaseException as err:  # surfaced on stop()
            self.error = err
