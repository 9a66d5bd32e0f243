"""Consensus fusion of binary rater masks by EM over per-rater
sensitivity and specificity.

The inner EM loop has a compiled Cython kernel; a pure-numpy fallback is
selected at import when the extension is unavailable. Set
DIFFSEG_STAPLE_BACKEND=python|cython to force one.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from . import _em_py

CLAMP = _em_py.CLAMP

_backend_name = "python"
_em_run = _em_py.em_run
_forced = os.environ.get("DIFFSEG_STAPLE_BACKEND", "").lower()
if _forced != "python":
    try:
        from . import _em_c
        _em_run = _em_c.em_run
        _backend_name = "cython"
    except ImportError:
        if _forced == "cython":
            raise
del _forced


def backend() -> str:
    """Name of the active EM kernel backend ("cython" or "python")."""
    return _backend_name


@dataclass(frozen=True)
class RaterStack:
    """Binary decisions of R raters over N voxels, plus the foreground prior."""

    decisions: np.ndarray  # (R, N) in {0,1}
    prior: float

    def __post_init__(self):
        d = np.asarray(self.decisions)
        if d.ndim != 2 or d.shape[0] < 1 or d.shape[1] < 1:
            raise ValueError(f"decisions must be (R>=1, N>=1), got {d.shape}")
        if not np.isin(d, (0, 1)).all():
            raise ValueError("decisions must be binary")
        if not 0.0 < self.prior < 1.0:
            raise ValueError(f"prior must lie in (0, 1), got {self.prior}")


@dataclass(frozen=True)
class StapleEstimate:
    weights: np.ndarray        # (N,) posterior foreground probability
    sensitivities: np.ndarray  # (R,)
    specificities: np.ndarray  # (R,)
    iterations: int
    converged: bool
    fused: np.ndarray          # (N,) binary, weights >= 0.5
    p_history: list = field(default_factory=list, repr=False)
    q_history: list = field(default_factory=list, repr=False)


def stack_from_masks(masks, prior: float | None = None) -> RaterStack:
    """Flatten a sequence of equally shaped binary masks into a RaterStack.

    When prior is None it defaults to the mean foreground fraction across
    raters, clamped to [1e-3, 1-1e-3]."""
    arrs = [np.asarray(m) for m in masks]
    if not arrs:
        raise ValueError("need at least one mask")
    shape = arrs[0].shape
    for m in arrs[1:]:
        if m.shape != shape:
            raise ValueError("all masks must share one shape")
    decisions = np.stack([(m > 0).astype(np.uint8).ravel() for m in arrs])
    if prior is None:
        prior = float(np.clip(decisions.mean(), 1e-3, 1 - 1e-3))
    return RaterStack(decisions=decisions, prior=prior)


def staple_fuse(stack: RaterStack, tol: float = 1e-6, max_iters: int = 100,
                init_p: float = 0.99, init_q: float = 0.99) -> StapleEstimate:
    """EM fusion: alternate posterior voxel weights (E) with per-rater
    sensitivity/specificity re-estimates (M) until the max parameter change
    drops below tol. The fused mask thresholds the weights at 0.5."""
    decisions = np.ascontiguousarray(stack.decisions, dtype=np.uint8)
    R = decisions.shape[0]
    if R == 1:
        # single-rater reduction: EM has nothing to reconcile, and iterating
        # would drift with extreme priors; the consensus is the rater itself
        w = np.clip(decisions[0].astype(np.float64), CLAMP, 1.0 - CLAMP)
        return StapleEstimate(weights=w, sensitivities=np.full(1, init_p),
                              specificities=np.full(1, init_q), iterations=0,
                              converged=True, fused=decisions[0].copy())
    p0 = np.full(R, init_p, dtype=np.float64)
    q0 = np.full(R, init_q, dtype=np.float64)
    w, p, q, iters, converged, p_hist, q_hist = _em_run(
        decisions, float(stack.prior), p0, q0, float(tol), int(max_iters))
    return StapleEstimate(weights=w, sensitivities=p, specificities=q,
                          iterations=iters, converged=converged,
                          fused=(w >= 0.5).astype(np.uint8),
                          p_history=p_hist, q_history=q_hist)


def log_likelihood(decisions: np.ndarray, prior: float, p: np.ndarray,
                   q: np.ndarray) -> float:
    """Observed-data log-likelihood sum_i log(a_i + b_i) under the
    two-component rater model."""
    D = np.asarray(decisions, dtype=np.float64)
    log_a = np.log(prior) + D.T @ np.log(p) + (1 - D.T) @ np.log1p(-p)
    log_b = np.log1p(-prior) + (1 - D.T) @ np.log(q) + D.T @ np.log1p(-q)
    m = np.maximum(log_a, log_b)
    return float(np.sum(m + np.log(np.exp(log_a - m) + np.exp(log_b - m))))
