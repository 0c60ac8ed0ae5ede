"""Recursive least-squares adaptation of the lifted dynamics.

The stacked parameter block theta = [A B] is refreshed from streaming
transition pairs with exponential forgetting. For a pair (x_k, u_k, x_next)
the regressor is z = [psi(x_k); u_k] and the update reads

    eps   = psi(x_next) - theta z
    K     = P z / (lambda + z' P z)
    theta = theta + eps K'
    P     = (P - K z' P) / lambda,  then re-symmetrized

With lambda = 1 and P(0) = kappa * I this is exactly sequential ridge
regression with penalty 1/kappa, which is what the batch solver computes;
lambda < 1 discounts old data with the usual 1/(1 - lambda) sample memory.
No covariance resetting or windup protection is applied beyond the
forgetting factor itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .basis import LiftedBasis, _state_array
from .model import KoopmanModel, Trajectory

__all__ = ["RlsState", "init_rls", "rls_update", "update_tick", "snapshot_model"]


@dataclass
class RlsState:
    """Mutable adaptation state: parameter block, covariance, forgetting."""

    theta: np.ndarray
    P: np.ndarray
    lam: float
    update_count: int = 0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.P = np.asarray(self.P, dtype=float)
        if self.theta.ndim != 2:
            raise ValueError("theta must be a 2-D block [A B]")
        p = self.theta.shape[1]
        if self.P.shape != (p, p):
            raise ValueError(f"P must be ({p}, {p}), got {self.P.shape}")
        if not (0.0 < self.lam <= 1.0):
            raise ValueError(f"forgetting factor must be in (0, 1], got {self.lam}")
        if not (np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.P))):
            raise ValueError("theta and P must be finite")

    @property
    def n_features(self) -> int:
        return self.theta.shape[1]


def init_rls(model: KoopmanModel, lam: float, p0_scale: float | None = None) -> RlsState:
    """Start adaptation from a fitted model.

    P is initialized to I / lambda by default; pass p0_scale to use
    p0_scale * I instead (large values make the first updates behave like an
    unregularized batch fit).
    """
    if not (0.0 < lam <= 1.0):
        raise ValueError(f"forgetting factor must be in (0, 1], got {lam}")
    scale = (1.0 / lam) if p0_scale is None else float(p0_scale)
    if not (math.isfinite(scale) and scale > 0):
        raise ValueError(f"p0_scale must be positive and finite, got {p0_scale}")
    p = model.lifted_dim + model.input_dim
    return RlsState(theta=model.stacked().copy(), P=np.eye(p) * scale, lam=lam)


def rls_update(state: RlsState, basis: LiftedBasis, x_k, u_k, x_next) -> float:
    """Apply one transition pair in place; returns the prediction error norm.

    All quantities are validated before any mutation, so a rejected update
    (non-finite input, non-positive gain denominator) leaves the state
    exactly as it was.
    """
    psi_k = basis.lift(_state_array(x_k, basis.state_dim))
    psi_next = basis.lift(_state_array(x_next, basis.state_dim))
    m = state.n_features - basis.lifted_dim
    u_arr = np.atleast_1d(np.asarray(u_k, dtype=float))
    if u_arr.shape != (m,):
        raise ValueError(f"input must have shape ({m},), got {u_arr.shape}")
    if not np.all(np.isfinite(u_arr)):
        raise ValueError(f"input must be finite, got {u_arr}")

    z = np.concatenate([psi_k, u_arr])
    Pz = state.P @ z
    denom = state.lam + float(z @ Pz)
    if not math.isfinite(denom) or denom <= 0.0:
        raise ValueError(f"update rejected: gain denominator is {denom}")
    eps = psi_next - state.theta @ z
    if not np.all(np.isfinite(eps)):
        raise ValueError("update rejected: non-finite prediction error")

    K = Pz / denom
    state.theta += np.outer(eps, K)
    # z' P equals (P z)' while P stays symmetric, which re-symmetrizing enforces
    P_new = (state.P - np.outer(K, Pz)) / state.lam
    state.P = 0.5 * (P_new + P_new.T)
    state.update_count += 1
    return float(np.linalg.norm(eps))


def _buffer_rows(buffer) -> np.ndarray:
    if isinstance(buffer, Trajectory):
        return np.column_stack([buffer.v, buffer.f_tr, buffer.v_ref])
    arr = np.asarray(buffer, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"buffer must be a Trajectory or a (k, 3) array, got {arr.shape}")
    return arr


def update_tick(state: RlsState, basis: LiftedBasis, buffer,
                cadence: float | None = None) -> np.ndarray:
    """Apply one tick's worth of buffered samples in time order.

    The buffer holds rows (v, f_tr, v_ref) and should include the last sample
    seen before the tick, so a tick covering 1 s of 40 Hz data carries 41
    rows and produces 40 updates. A buffer with fewer than two rows leaves
    the state unchanged. Returns the per-pair prediction error norms; the
    cadence argument is informational (it documents the intended tick
    spacing and is not used in the update itself).
    """
    del cadence
    rows = _buffer_rows(buffer)
    if len(rows) < 2:
        return np.empty(0)
    errs = np.empty(len(rows) - 1)
    for i in range(len(rows) - 1):
        try:
            errs[i] = rls_update(state, basis, rows[i, :2], rows[i, 2:3], rows[i + 1, :2])
        except ValueError as exc:
            raise ValueError(f"tick aborted at buffered pair {i}: {exc}") from exc
    return errs


def snapshot_model(state: RlsState, basis: LiftedBasis, sample_period: float,
                   provenance: dict | None = None) -> KoopmanModel:
    """Freeze the current parameter block into a standalone model."""
    prov = {"fitted_by": "rls", "updates": state.update_count, "lambda": state.lam}
    if provenance:
        prov.update(provenance)
    return KoopmanModel.from_stacked(basis, state.theta.copy(), sample_period, prov)
