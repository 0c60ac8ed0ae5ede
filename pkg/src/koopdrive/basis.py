"""Polynomial observable lifting for the driver-response state.

The physical state of the driver model is the pair (vehicle speed v in m/s,
traction force f_tr in N, signed so that braking is negative). Lifting maps
this state onto a dictionary of monomials so that the closed-loop response of
a driver to an advisory speed can be approximated by a linear recursion in
the lifted space. The first entries of the dictionary are always the raw
state variables themselves, which keeps the projection back to physical
coordinates a plain row selection.

The dictionary contains every monomial of total degree 1 through
``max_degree``; there is no constant observable. For the default two-state,
degree-3 setup the dictionary has nine entries and reads

    v, f, v*f, v**2, f**2, v**2*f, v*f**2, v**3, f**3

Ordering rule, for any state dimension: the identity monomials come first,
then each higher degree block in turn; inside a degree block, monomials that
mix several variables precede pure powers, and otherwise exponent tuples are
sorted lexicographically descending. The rule is deterministic, so a basis
can be rebuilt exactly from (state_dim, max_degree).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

import numpy as np

__all__ = [
    "PhysicalState",
    "StateScaler",
    "LiftedBasis",
    "enumerate_basis",
]


@dataclass(frozen=True)
class PhysicalState:
    """Validated (speed, traction force) pair in physical units."""

    v: float
    f_tr: float

    def __post_init__(self):
        if not (math.isfinite(self.v) and math.isfinite(self.f_tr)):
            raise ValueError(f"physical state must be finite, got ({self.v}, {self.f_tr})")

    def as_array(self) -> np.ndarray:
        return np.array([self.v, self.f_tr], dtype=float)


def _state_array(x, state_dim: int) -> np.ndarray:
    if isinstance(x, PhysicalState):
        if state_dim != 2:
            raise ValueError(f"PhysicalState is two dimensional, basis expects {state_dim}")
        return x.as_array()
    arr = np.asarray(x, dtype=float)
    if arr.shape != (state_dim,):
        raise ValueError(f"state must have shape ({state_dim},), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"state must be finite, got {arr}")
    return arr


@dataclass(frozen=True)
class StateScaler:
    """Optional affine pre-scaler applied to states before lifting.

    Each state channel is mapped to (x - offset) / scale. The default
    construction picks power-of-two scales and zero offsets, so that scaling
    and unscaling are exact in binary floating point and the lift/project
    round trip stays bit-exact.
    """

    scale: tuple[float, ...]
    offset: tuple[float, ...]

    def __post_init__(self):
        if len(self.scale) != len(self.offset):
            raise ValueError("scale and offset must have the same length")
        for s in self.scale:
            if not math.isfinite(s) or s == 0.0:
                raise ValueError(f"scale entries must be finite and nonzero, got {self.scale}")
        for o in self.offset:
            if not math.isfinite(o):
                raise ValueError(f"offset entries must be finite, got {self.offset}")

    @classmethod
    def pow2_from_data(cls, states: np.ndarray) -> "StateScaler":
        """Build a scaler from samples, rounding magnitudes to powers of two.

        ``states`` has one row per sample. Channels that are identically zero
        get unit scale.
        """
        arr = np.asarray(states, dtype=float)
        if arr.ndim != 2 or arr.shape[0] == 0:
            raise ValueError("need a nonempty 2-D sample array to build a scaler")
        scales = []
        for j in range(arr.shape[1]):
            m = float(np.max(np.abs(arr[:, j])))
            if m == 0.0 or not math.isfinite(m):
                scales.append(1.0)
            else:
                scales.append(2.0 ** round(math.log2(m)))
        return cls(scale=tuple(scales), offset=tuple(0.0 for _ in scales))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - np.asarray(self.offset)) / np.asarray(self.scale)

    def invert(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) * np.asarray(self.scale) + np.asarray(self.offset)

    def to_dict(self) -> dict:
        return {"scale": list(self.scale), "offset": list(self.offset)}

    @classmethod
    def from_dict(cls, d: dict) -> "StateScaler":
        return cls(scale=tuple(float(s) for s in d["scale"]),
                   offset=tuple(float(o) for o in d["offset"]))


def _monomial_order_key(exponents: tuple[int, ...]):
    # degree block first; mixed terms before pure powers; then lex descending
    degree = sum(exponents)
    nonzero = sum(1 for e in exponents if e > 0)
    return (degree, -nonzero, tuple(-e for e in exponents))


def _enumerate_exponents(state_dim: int, max_degree: int) -> tuple[tuple[int, ...], ...]:
    exps = [
        e
        for e in product(range(max_degree + 1), repeat=state_dim)
        if 1 <= sum(e) <= max_degree
    ]
    exps.sort(key=_monomial_order_key)
    return tuple(exps)


@dataclass(frozen=True)
class LiftedBasis:
    """Monomial dictionary with the identity observables in front."""

    state_dim: int
    max_degree: int
    monomials: tuple[tuple[int, ...], ...]
    scaler: StateScaler | None = None

    def __post_init__(self):
        if self.state_dim < 1:
            raise ValueError(f"state_dim must be >= 1, got {self.state_dim}")
        if self.max_degree < 1:
            raise ValueError(f"max_degree must be >= 1, got {self.max_degree}")
        seen = set()
        for e in self.monomials:
            if len(e) != self.state_dim:
                raise ValueError(f"monomial {e} does not match state_dim {self.state_dim}")
            if not 1 <= sum(e) <= self.max_degree:
                raise ValueError(f"monomial {e} has degree outside 1..{self.max_degree}")
            if e in seen:
                raise ValueError(f"duplicate monomial {e}")
            seen.add(e)
        for j in range(self.state_dim):
            ident = tuple(1 if i == j else 0 for i in range(self.state_dim))
            if len(self.monomials) <= j or self.monomials[j] != ident:
                raise ValueError("identity monomials must come first, in state order")
        if self.scaler is not None and len(self.scaler.scale) != self.state_dim:
            raise ValueError("scaler dimension does not match state_dim")
        object.__setattr__(self, "_exp", np.array(self.monomials, dtype=float))

    @property
    def lifted_dim(self) -> int:
        return len(self.monomials)

    @property
    def degrees(self) -> np.ndarray:
        """Total degree of each monomial."""
        return np.array([sum(e) for e in self.monomials], dtype=int)

    def lift(self, x) -> np.ndarray:
        """Map one physical state to its lifted image, shape (lifted_dim,)."""
        arr = _state_array(x, self.state_dim)
        return self.lift_many(arr[None, :])[0]

    def lift_many(self, states: np.ndarray) -> np.ndarray:
        """Lift a batch of states, one per row; returns (k, lifted_dim)."""
        arr = np.asarray(states, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != self.state_dim:
            raise ValueError(f"expected (k, {self.state_dim}) state array, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("states must be finite")
        if self.scaler is not None:
            arr = self.scaler.apply(arr)
        return np.prod(arr[:, None, :] ** self._exp[None, :, :], axis=2)

    def project(self, z) -> np.ndarray:
        """Read the physical state back out of a lifted vector."""
        arr = np.asarray(z, dtype=float)
        if arr.shape != (self.lifted_dim,):
            raise ValueError(f"lifted vector must have shape ({self.lifted_dim},), got {arr.shape}")
        x = arr[: self.state_dim]
        if self.scaler is not None:
            x = self.scaler.invert(x)
        return x

    def project_many(self, Z: np.ndarray) -> np.ndarray:
        arr = np.asarray(Z, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != self.lifted_dim:
            raise ValueError(f"expected (k, {self.lifted_dim}) array, got {arr.shape}")
        X = arr[:, : self.state_dim]
        if self.scaler is not None:
            X = self.scaler.invert(X)
        return X

    def projection_matrix(self) -> np.ndarray:
        """The linear readout [I 0] acting on lifted vectors."""
        C = np.zeros((self.state_dim, self.lifted_dim))
        C[:, : self.state_dim] = np.eye(self.state_dim)
        return C

    def to_dict(self) -> dict:
        return {
            "state_dim": self.state_dim,
            "max_degree": self.max_degree,
            "monomials": [list(e) for e in self.monomials],
            "scaler": self.scaler.to_dict() if self.scaler is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LiftedBasis":
        scaler = d.get("scaler")
        return cls(
            state_dim=int(d["state_dim"]),
            max_degree=int(d["max_degree"]),
            monomials=tuple(tuple(int(k) for k in e) for e in d["monomials"]),
            scaler=StateScaler.from_dict(scaler) if scaler else None,
        )


def enumerate_basis(state_dim: int = 2, max_degree: int = 3,
                    scaler: StateScaler | None = None) -> LiftedBasis:
    """Construct the monomial basis for the given dimensions.

    Raises ValueError for non-positive dimensions or degree.
    """
    if state_dim < 1:
        raise ValueError(f"state_dim must be >= 1, got {state_dim}")
    if max_degree < 1:
        raise ValueError(f"max_degree must be >= 1, got {max_degree}")
    return LiftedBasis(
        state_dim=state_dim,
        max_degree=max_degree,
        monomials=_enumerate_exponents(state_dim, max_degree),
        scaler=scaler,
    )
