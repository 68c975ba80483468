"""Training-plasticity measurement and the freeze/unfreeze state machine.

Plasticity of a layer module is the similarity-preserving (SP) loss
between the training model's activation and the reference model's
activation for the same batch: both tensors are flattened to (b, d),
turned into row-normalized b x b Gram matrices, and compared in squared
Frobenius norm scaled by 1/b^2.

The controller smooths raw plasticity with a moving average, fits a line
over the recent window, and freezes the frontmost active module once the
fitted slope stays inside a per-module tolerance for a full window. A
10x learning-rate drop since the frontmost freeze unfreezes everything
and halves the window so refreezing is fast.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ProtocolError(RuntimeError):
    """A controller operation was invoked outside its legal state."""


class InsufficientHistory(ValueError):
    """Not enough points to fit a slope."""


# ---------------------------------------------------------------------------
# plasticity math
# ---------------------------------------------------------------------------


def _row_normalized_gram(a: np.ndarray) -> np.ndarray:
    flat = a.reshape(a.shape[0], -1).astype(np.float64)
    gram = flat @ flat.T
    norms = np.linalg.norm(gram, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0  # zero rows stay zero
    return gram / norms


def sp_loss(a_t: np.ndarray, a_r: np.ndarray) -> float:
    """(1/b^2) * ||G_T - G_R||_F^2 over row-normalized batch Gram matrices."""
    a_t = np.asarray(a_t)
    a_r = np.asarray(a_r)
    if a_t.shape != a_r.shape:
        raise ValueError(f"activation shapes differ: {a_t.shape} vs {a_r.shape}")
    if a_t.ndim < 2 or a_t.shape[0] < 1:
        raise ValueError(f"activations must be (b, ...) with b >= 1, got {a_t.shape}")
    b = a_t.shape[0]
    diff = _row_normalized_gram(a_t) - _row_normalized_gram(a_r)
    return float(np.sum(diff * diff) / (b * b))


def smooth_plasticity(previous_raw: list[float], p: float, w: int) -> float:
    """Mean of the most recent min(count, w) raw values including p."""
    if p < 0:
        raise ValueError("plasticity must be non-negative")
    window = (list(previous_raw) + [p])[-max(w, 1):]
    return float(np.mean(window))


def window_linear_fit(series: list[float], w: int) -> float:
    """OLS slope over the last min(len, w) points, x = 0, 1, 2, ...

    The fit needs at least two points, so the effective window is never
    smaller than 2 even when w has been halved down to 1.
    """
    pts = np.asarray(series[-max(w, 2):], dtype=np.float64)
    if pts.size < 2:
        raise InsufficientHistory(f"need >= 2 points for a slope, have {pts.size}")
    x = np.arange(pts.size, dtype=np.float64)
    xc = x - x.mean()
    return float((xc @ (pts - pts.mean())) / (xc @ xc))


def init_tolerance(first_slopes: list[float], t_coeff: float, floor: float = 1e-9) -> float:
    """t_coeff x max|slope| over the first readings, floored above zero."""
    t = t_coeff * max(abs(s) for s in first_slopes)
    return t if t > 0 else floor


# ---------------------------------------------------------------------------
# controller state
# ---------------------------------------------------------------------------

BOOTSTRAPPING = "bootstrapping"
KNOWLEDGE_GUIDED = "knowledge_guided"


@dataclass
class ControllerParams:
    n: int = 1  # evaluation interval in iterations
    w: int = 10  # counter and history-buffer length
    t_coeff: float = 0.2
    bootstrap_rate: float = 0.10
    lr_unfreeze_factor: float = 10.0
    tolerance_floor: float = 1e-9

    def __post_init__(self):
        if self.n < 1 or self.w < 1:
            raise ValueError("n and W must be >= 1")
        if not (0 < self.t_coeff < 1):
            raise ValueError("T_coeff must be in (0, 1)")


@dataclass
class PlasticityHistory:
    raw: list[float] = field(default_factory=list)
    smoothed: list[float] = field(default_factory=list)
    slopes: list[float] = field(default_factory=list)
    tolerance: float | None = None


@dataclass
class FreezeState:
    frontmost: int = 0
    stale_counter: int = 0
    stage: str = BOOTSTRAPPING
    lr_at_frontmost_freeze: float | None = None
    w_current: int = 10


@dataclass(frozen=True)
class Decision:
    kind: str  # "freeze" | "unfreeze_all" | "stage"
    iteration: int
    module: int


class PlasticityTracker:
    """Single-owner freeze/unfreeze state machine fed by evaluations.

    All calls must come from one thread (the controller). Emits immutable
    Decision values and an append-only text log with one line per event:
    ``iter=<i> event=<e> module=<m> slope=<s> T=<t>``.
    """

    def __init__(self, module_count: int, params: ControllerParams):
        if module_count < 2:
            raise ValueError("need at least 2 modules (the last is never frozen)")
        self.module_count = module_count
        self.params = params
        self.state = FreezeState(w_current=params.w)
        self.histories = [PlasticityHistory() for _ in range(module_count)]
        self.log: list[str] = []
        self._prev_boot_loss: float | None = None

    # -- logging -----------------------------------------------------------

    def _emit(self, iteration: int, event: str, module: int, slope: float, tol: float) -> None:
        self.log.append(
            f"iter={iteration} event={event} module={module} slope={slope:.9g} T={tol:.9g}"
        )

    # -- bootstrapping -----------------------------------------------------

    def bootstrap_update(self, iteration: int, smoothed_loss: float) -> Decision | None:
        """Advance the bootstrapping stage check; one-way transition.

        Compares consecutive smoothed training losses; when the relative
        change drops below bootstrap_rate, training has left the critical
        period and knowledge-guided evaluation may begin.
        """
        if self.state.stage == KNOWLEDGE_GUIDED:
            return None
        decision = None
        prev = self._prev_boot_loss
        if prev is not None and prev > 0:
            rel = abs(prev - smoothed_loss) / prev
            if rel < self.params.bootstrap_rate:
                self.state.stage = KNOWLEDGE_GUIDED
                self._emit(iteration, "stage", 0, rel, self.params.bootstrap_rate)
                decision = Decision("stage", iteration, 0)
        self._prev_boot_loss = smoothed_loss
        return decision

    # -- unfreezing --------------------------------------------------------

    def lr_unfreeze_check(self, iteration: int, current_lr: float) -> Decision | None:
        st = self.state
        if st.frontmost == 0 or st.lr_at_frontmost_freeze is None:
            return None
        # relative slack so a literal 10x step decay is not missed by ulps
        if current_lr * self.params.lr_unfreeze_factor > st.lr_at_frontmost_freeze * (1 + 1e-9):
            return None
        module_before = st.frontmost
        st.frontmost = 0
        st.stale_counter = 0
        st.w_current = max(1, st.w_current // 2)
        st.lr_at_frontmost_freeze = None
        self._emit(iteration, "unfreeze_all", module_before, 0.0, 0.0)
        return Decision("unfreeze_all", iteration, module_before)

    # -- freezing ----------------------------------------------------------

    def check_plasticity(self, iteration: int, a_t: np.ndarray, a_r: np.ndarray,
                         current_lr: float) -> Decision | None:
        return self.record_plasticity(iteration, sp_loss(a_t, a_r), current_lr)

    def record_plasticity(self, iteration: int, p: float, current_lr: float) -> Decision | None:
        """One evaluation step: smooth, fit, count staleness, maybe freeze.

        The LR-based unfreeze check runs afterwards and its decision takes
        precedence over a freeze decided in the same step.
        """
        st = self.state
        if st.stage != KNOWLEDGE_GUIDED:
            raise ProtocolError("plasticity evaluation before the bootstrapping stage ended")
        decision = None
        l = st.frontmost
        if l < self.module_count - 1:  # the last module is never frozen
            hist = self.histories[l]
            smoothed = smooth_plasticity(hist.raw, p, st.w_current)
            hist.raw.append(p)
            hist.smoothed.append(smoothed)
            slope = None
            try:
                slope = window_linear_fit(hist.smoothed, st.w_current)
            except InsufficientHistory:
                st.stale_counter = 0
            if slope is not None:
                hist.slopes.append(slope)
                if hist.tolerance is None and len(hist.slopes) >= 3:
                    hist.tolerance = init_tolerance(
                        hist.slopes[:3], self.params.t_coeff, self.params.tolerance_floor
                    )
                if hist.tolerance is None:
                    st.stale_counter = 0
                elif abs(slope) < hist.tolerance:
                    st.stale_counter += 1
                else:
                    st.stale_counter = 0
            if st.stale_counter >= st.w_current:
                self._emit(iteration, "freeze", l, slope if slope is not None else 0.0,
                           hist.tolerance if hist.tolerance is not None else 0.0)
                decision = Decision("freeze", iteration, l)
                if st.lr_at_frontmost_freeze is None:
                    st.lr_at_frontmost_freeze = current_lr
                st.frontmost = l + 1
                st.stale_counter = 0
        unfreeze = self.lr_unfreeze_check(iteration, current_lr)
        return unfreeze or decision
