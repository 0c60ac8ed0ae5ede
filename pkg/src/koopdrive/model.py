"""Lifted linear driver-response model: prediction, rollout, persistence.

A model is the triple (A, B, basis) together with the sample period. One
prediction step advances the lifted vector z by A @ z + B @ u, where u is the
advisory speed acting as the exogenous input. The physical state is read out
of the first entries of z (the identity observables), so the readout matrix
is [I 0] by construction and is not stored.

Model files are JSON documents carrying the basis metadata, the matrices at
full decimal precision, and free-form provenance left by the fitting code.
Writing is atomic (temp file plus rename), and a reload reproduces the
matrices bit for bit.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .basis import LiftedBasis, PhysicalState, _state_array

SCHEMA_VERSION = 1
_MODEL_KIND = "lifted_linear_driver_model"

TRAJECTORY_CSV_HEADER = "t_s,v_mps,f_tr_n,v_ref_mps"

__all__ = [
    "Trajectory",
    "KoopmanModel",
    "ModelFileError",
    "RolloutDivergenceError",
    "SCHEMA_VERSION",
    "TRAJECTORY_CSV_HEADER",
]


class ModelFileError(ValueError):
    """A model file is missing, malformed, or inconsistent."""


class RolloutDivergenceError(ArithmeticError):
    """A rollout produced a non-finite value; carries the failing step index."""

    def __init__(self, step: int, mode: str):
        self.step = step
        self.mode = mode
        super().__init__(f"rollout diverged at step {step} (mode={mode}): non-finite value")


def _fmt(x: float) -> str:
    # repr of a python float is the shortest string that round-trips exactly
    return repr(float(x))


@dataclass
class Trajectory:
    """Uniformly sampled record of (time, speed, traction force, advisory)."""

    sample_period: float
    t: np.ndarray
    v: np.ndarray
    f_tr: np.ndarray
    v_ref: np.ndarray

    def __post_init__(self):
        if not (math.isfinite(self.sample_period) and self.sample_period > 0):
            raise ValueError(f"sample_period must be positive, got {self.sample_period}")
        for name in ("t", "v", "f_tr", "v_ref"):
            arr = np.asarray(getattr(self, name), dtype=float)
            setattr(self, name, arr)
            if arr.ndim != 1:
                raise ValueError(f"{name} must be one dimensional")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        n = len(self.t)
        if n < 2:
            raise ValueError(f"a trajectory needs at least 2 samples, got {n}")
        for name in ("v", "f_tr", "v_ref"):
            if len(getattr(self, name)) != n:
                raise ValueError("all trajectory columns must have the same length")
        dt = np.diff(self.t)
        if not np.allclose(dt, self.sample_period, rtol=1e-9, atol=1e-9 * self.sample_period):
            worst = int(np.argmax(np.abs(dt - self.sample_period)))
            raise ValueError(
                f"time spacing must equal sample_period={self.sample_period}; "
                f"sample {worst} has spacing {dt[worst]}"
            )

    def __len__(self) -> int:
        return len(self.t)

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    def states(self) -> np.ndarray:
        """(k, 2) array of (v, f_tr) rows."""
        return np.column_stack([self.v, self.f_tr])

    def slice_samples(self, start: int, stop: int) -> "Trajectory":
        if not 0 <= start < stop <= len(self):
            raise ValueError(f"bad sample slice [{start}, {stop}) for length {len(self)}")
        return Trajectory(
            sample_period=self.sample_period,
            t=self.t[start:stop].copy(),
            v=self.v[start:stop].copy(),
            f_tr=self.f_tr[start:stop].copy(),
            v_ref=self.v_ref[start:stop].copy(),
        )

    def window(self, t_start: float, t_end: float) -> "Trajectory":
        """Sub-trajectory of samples with t in [t_start, t_end]."""
        if t_end <= t_start:
            raise ValueError(f"need t_start < t_end, got [{t_start}, {t_end}]")
        i0 = int(math.ceil((t_start - self.t[0]) / self.sample_period - 1e-9))
        i1 = int(math.floor((t_end - self.t[0]) / self.sample_period + 1e-9))
        i0 = max(i0, 0)
        i1 = min(i1, len(self) - 1)
        if i1 - i0 < 1:
            raise ValueError(f"window [{t_start}, {t_end}] covers fewer than 2 samples")
        return self.slice_samples(i0, i1 + 1)

    def write_csv(self, path: str) -> None:
        lines = [TRAJECTORY_CSV_HEADER]
        for k in range(len(self)):
            lines.append(
                f"{_fmt(self.t[k])},{_fmt(self.v[k])},{_fmt(self.f_tr[k])},{_fmt(self.v_ref[k])}"
            )
        _atomic_write_text(path, "\n".join(lines) + "\n")

    @classmethod
    def read_csv(cls, path: str) -> "Trajectory":
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != TRAJECTORY_CSV_HEADER:
                raise ValueError(
                    f"{path}: expected header '{TRAJECTORY_CSV_HEADER}', found '{header}'"
                )
            try:
                data = np.loadtxt(fh, delimiter=",", ndmin=2)
            except ValueError as exc:
                raise ValueError(f"{path}: malformed trajectory row: {exc}") from None
        if data.shape[0] < 2 or data.shape[1] != 4:
            raise ValueError(f"{path}: expected at least 2 rows of 4 columns, got {data.shape}")
        dt = np.diff(data[:, 0])
        period = float(np.median(dt))
        return cls(sample_period=period, t=data[:, 0], v=data[:, 1],
                   f_tr=data[:, 2], v_ref=data[:, 3])


def _atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp_", suffix=".part")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


@dataclass
class KoopmanModel:
    """Linear recursion in lifted coordinates driven by the advisory speed."""

    basis: LiftedBasis
    A: np.ndarray
    B: np.ndarray
    sample_period: float
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        if self.B.ndim == 1:
            self.B = self.B[:, None]
        N = self.basis.lifted_dim
        if self.A.shape != (N, N):
            raise ValueError(f"A must be ({N}, {N}) for this basis, got {self.A.shape}")
        if self.B.ndim != 2 or self.B.shape[0] != N or self.B.shape[1] < 1:
            raise ValueError(f"B must be ({N}, m) with m >= 1, got {self.B.shape}")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.B))):
            raise ValueError("model matrices must be finite")
        if not (math.isfinite(self.sample_period) and self.sample_period > 0):
            raise ValueError(f"sample_period must be positive, got {self.sample_period}")

    @property
    def lifted_dim(self) -> int:
        return self.basis.lifted_dim

    @property
    def input_dim(self) -> int:
        return self.B.shape[1]

    @property
    def C(self) -> np.ndarray:
        return self.basis.projection_matrix()

    @classmethod
    def from_stacked(cls, basis: LiftedBasis, theta: np.ndarray, sample_period: float,
                     provenance: dict | None = None) -> "KoopmanModel":
        """Build a model from the stacked parameter block [A B]."""
        theta = np.asarray(theta, dtype=float)
        N = basis.lifted_dim
        if theta.ndim != 2 or theta.shape[0] != N or theta.shape[1] <= N:
            raise ValueError(f"stacked block must be ({N}, {N}+m), got {theta.shape}")
        return cls(basis=basis, A=theta[:, :N].copy(), B=theta[:, N:].copy(),
                   sample_period=sample_period, provenance=provenance or {})

    def stacked(self) -> np.ndarray:
        return np.hstack([self.A, self.B])

    def step(self, z: np.ndarray, u) -> np.ndarray:
        """One prediction step in lifted coordinates."""
        z = np.asarray(z, dtype=float)
        if z.shape != (self.lifted_dim,):
            raise ValueError(f"z must have shape ({self.lifted_dim},), got {z.shape}")
        u_arr = np.atleast_1d(np.asarray(u, dtype=float))
        if u_arr.shape != (self.input_dim,):
            raise ValueError(f"u must have shape ({self.input_dim},), got {u_arr.shape}")
        return self.A @ z + self.B @ u_arr

    def rollout(self, x0, inputs, mode: str = "lifted") -> Trajectory:
        """Simulate the model forward from a physical initial state.

        inputs is the advisory speed series, one value per step; the returned
        trajectory has len(inputs) + 1 samples. In "lifted" mode the state is
        lifted once and then propagated linearly; in "relift" mode the
        physical prediction is re-lifted before every step. Raises
        RolloutDivergenceError naming the step at which a non-finite value
        first appears.
        """
        if mode not in ("lifted", "relift"):
            raise ValueError(f"mode must be 'lifted' or 'relift', got {mode!r}")
        if self.input_dim != 1:
            raise ValueError("rollout packaging requires a single advisory input")
        u = np.asarray(inputs, dtype=float)
        if u.ndim != 1 or len(u) == 0:
            raise ValueError("inputs must be a nonempty 1-D array of advisory speeds")
        if not np.all(np.isfinite(u)):
            raise ValueError("inputs must be finite")

        x0 = _state_array(x0, self.basis.state_dim)
        L = len(u)
        states = np.empty((L + 1, self.basis.state_dim))
        states[0] = x0

        # overflow is the divergence signal itself, reported with the step
        # index below rather than as a numpy warning
        with np.errstate(over="ignore", invalid="ignore"):
            if mode == "lifted":
                z = self.basis.lift(x0)
                for k in range(L):
                    z = self.A @ z + self.B[:, 0] * u[k]
                    if not np.all(np.isfinite(z)):
                        raise RolloutDivergenceError(step=k + 1, mode=mode)
                    states[k + 1] = self.basis.project(z)
            else:
                x = x0
                for k in range(L):
                    z = self.basis.lift(x)
                    z_next = self.A @ z + self.B[:, 0] * u[k]
                    if not np.all(np.isfinite(z_next)):
                        raise RolloutDivergenceError(step=k + 1, mode=mode)
                    x = self.basis.project(z_next)
                    states[k + 1] = x

        v_ref_col = np.append(u, u[-1])  # advisory held through the final sample
        return Trajectory(
            sample_period=self.sample_period,
            t=np.arange(L + 1) * self.sample_period,
            v=states[:, 0],
            f_tr=states[:, 1] if self.basis.state_dim > 1 else np.zeros(L + 1),
            v_ref=v_ref_col,
        )

    def save(self, path: str) -> None:
        payload = {
            "kind": _MODEL_KIND,
            "schema_version": SCHEMA_VERSION,
            "basis": self.basis.to_dict(),
            "sample_period": self.sample_period,
            "input_dim": self.input_dim,
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "provenance": _jsonable(self.provenance),
        }
        _atomic_write_text(path, json.dumps(payload, indent=2) + "\n")

    @classmethod
    def load(cls, path: str) -> "KoopmanModel":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFileError(f"{path}: not valid JSON: {exc}") from None
        if not isinstance(payload, dict) or payload.get("kind") != _MODEL_KIND:
            raise ModelFileError(f"{path}: not a model file (missing kind tag)")
        version = payload.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ModelFileError(
                f"{path}: unsupported schema_version {version!r}, expected {SCHEMA_VERSION}"
            )
        try:
            basis = LiftedBasis.from_dict(payload["basis"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFileError(f"{path}: invalid basis metadata: {exc}") from None
        try:
            A = np.array(payload["A"], dtype=float)
            B = np.array(payload["B"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFileError(f"{path}: invalid matrix data: {exc}") from None
        N = basis.lifted_dim
        if A.shape != (N, N):
            raise ModelFileError(f"{path}: matrix A has shape {A.shape}, expected ({N}, {N})")
        if B.ndim != 2 or B.shape[0] != N:
            raise ModelFileError(f"{path}: matrix B has shape {B.shape}, expected ({N}, m)")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise ModelFileError(f"{path}: model matrices contain non-finite entries")
        period = payload.get("sample_period")
        if not isinstance(period, (int, float)) or not period > 0:
            raise ModelFileError(f"{path}: sample_period must be positive, got {period!r}")
        provenance = payload.get("provenance") or {}
        if not isinstance(provenance, dict):
            raise ModelFileError(f"{path}: provenance must be an object")
        return cls(basis=basis, A=A, B=B, sample_period=float(period), provenance=provenance)
