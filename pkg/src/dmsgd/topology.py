"""Mixing matrices and their communication schedule.

Three communication patterns share one representation: a symmetric,
doubly stochastic matrix ``W`` applied every ``k`` iterations and the
identity otherwise.

* ``UNIFORM``  -- periodic simple averaging, ``W = 11^T / m``.
* ``GOSSIP``   -- symmetric circulant ring with self weight ``1 - 2w``.
* ``EASGD``    -- ``(m+1) x (m+1)`` block matrix coupling every worker to an
  anchor row through the elastic coefficient ``beta``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import BadParam, SpectralViolation

SYM_TOL = 1e-12
STOCH_TOL = 1e-12
UNIT_EIG_TOL = 1e-10


class MixingKind(str, enum.Enum):
    UNIFORM = "uniform"
    GOSSIP = "gossip"
    EASGD = "easgd"
    IDENTITY = "identity"


@dataclass(frozen=True)
class MixingMatrix:
    entries: np.ndarray
    kind: MixingKind
    m: int
    beta: float | None = None
    spectrum: np.ndarray = field(default=None, repr=False)
    lambda0: float = 0.0

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def has_anchor(self) -> bool:
        return self.kind is MixingKind.EASGD


def _freeze(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def validate(entries, kind, nonneg=True):
    """Check the mixing-matrix invariants and return ``(spectrum, lambda0)``.

    The spectrum is sorted ascending. ``lambda0`` is the largest modulus
    among the eigenvalues other than the unit one, 0 for a 1x1 matrix.
    """
    W = np.asarray(entries, dtype=float)
    d = W.shape[0]
    if W.ndim != 2 or W.shape[1] != d:
        raise SpectralViolation(f"mixing matrix must be square, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise SpectralViolation("mixing matrix has non-finite entries")
    asym = np.max(np.abs(W - W.T))
    if asym > SYM_TOL:
        raise SpectralViolation(f"not symmetric (max |W - W^T| = {asym:.3e})")
    row_err = np.max(np.abs(W.sum(axis=1) - 1.0))
    col_err = np.max(np.abs(W.sum(axis=0) - 1.0))
    if max(row_err, col_err) > STOCH_TOL:
        raise SpectralViolation(
            f"not doubly stochastic (row err {row_err:.3e}, col err {col_err:.3e})")
    if nonneg and np.min(W) < 0:
        raise SpectralViolation(f"{kind.value} mixing matrix has negative entries")

    spectrum = np.linalg.eigvalsh(W)
    unit = np.abs(spectrum - 1.0) <= UNIT_EIG_TOL
    if unit.sum() != 1:
        raise SpectralViolation(
            f"expected exactly one unit eigenvalue, found {int(unit.sum())}")
    rest = spectrum[~unit]
    lambda0 = float(np.max(np.abs(rest))) if rest.size else 0.0
    if lambda0 >= 1.0 - UNIT_EIG_TOL:
        raise SpectralViolation(f"second eigenvalue modulus {lambda0!r} is not below 1")
    return spectrum, lambda0


def _ring(m, neighbor_weight):
    if m < 3:
        raise BadParam(f"gossip ring needs m >= 3, got m={m}")
    w = float(neighbor_weight)
    self_w = 1.0 - 2.0 * w
    if not (0.0 < w <= 0.5) or self_w < 0.0:
        raise BadParam(f"neighbor_weight must lie in (0, 1/2], got {w}")
    W = np.zeros((m, m))
    idx = np.arange(m)
    W[idx, idx] = self_w
    W[idx, (idx + 1) % m] += w
    W[idx, (idx - 1) % m] += w
    return W


def _easgd(m, beta):
    b = float(beta)
    if not (0.0 < b < 2.0 / (m + 1)):
        raise BadParam(f"EASGD beta must satisfy 0 < beta < 2/(m+1) = {2.0 / (m + 1):.6g}, got {b}")
    W = np.empty((m + 1, m + 1))
    W[:m, :m] = (1.0 - b) * np.eye(m)
    W[:m, m] = b
    W[m, :m] = b
    W[m, m] = 1.0 - m * b
    return W


def build_mixing(kind, m, beta=None, neighbor_weight=None) -> MixingMatrix:
    """Construct and validate a mixing matrix for ``m`` workers."""
    kind = MixingKind(kind)
    m = int(m)
    if m < 1:
        raise BadParam(f"m must be >= 1, got {m}")

    if kind is MixingKind.UNIFORM:
        W = np.full((m, m), 1.0 / m)
    elif kind is MixingKind.IDENTITY:
        W = np.eye(m)
    elif kind is MixingKind.GOSSIP:
        if neighbor_weight is None:
            raise BadParam("gossip mixing requires neighbor_weight")
        W = _ring(m, neighbor_weight)
    else:
        if beta is None:
            raise BadParam("EASGD mixing requires beta")
        W = _easgd(m, beta)

    spectrum, lam0 = validate(W, kind, nonneg=kind is not MixingKind.EASGD)
    return MixingMatrix(
        entries=_freeze(W),
        kind=kind,
        m=m,
        beta=None if beta is None or kind is not MixingKind.EASGD else float(beta),
        spectrum=_freeze(spectrum),
        lambda0=lam0,
    )


def spectral_gap(W: MixingMatrix) -> float:
    """Second-largest eigenvalue modulus ``lambda0`` of a validated matrix.

    Despite the name this is the contraction factor, not ``1 - lambda0``.
    The value is recomputed from the entries so hand-built matrices are
    checked too.
    """
    kind = W.kind if isinstance(W, MixingMatrix) else MixingKind.EASGD
    entries = W.entries if isinstance(W, MixingMatrix) else W
    _, lam0 = validate(entries, kind, nonneg=False)
    return lam0


@dataclass(frozen=True)
class CommSchedule:
    """``matrix`` on iterations divisible by ``period_k``, identity otherwise."""

    period_k: int
    matrix: MixingMatrix

    def __post_init__(self):
        if int(self.period_k) < 1:
            raise BadParam(f"communication period must be >= 1, got {self.period_k}")

    def communicates(self, n: int) -> bool:
        return n % self.period_k == 0

    def matrix_at(self, n: int):
        """Entries of ``W_n``, or ``None`` when ``W_n`` is the identity."""
        return self.matrix.entries if self.communicates(n) else None

    def dense_at(self, n: int) -> np.ndarray:
        W = self.matrix_at(n)
        return np.eye(self.matrix.dim) if W is None else W

    def product(self, t: int, n: int) -> np.ndarray:
        """``W_{t,n} = prod_{s=t}^{n} W_s`` (all factors commute)."""
        P = np.eye(self.matrix.dim)
        for _ in range(count_comm_rounds(t, n, self.period_k)):
            P = P @ self.matrix.entries
        return P


def count_comm_rounds(t: int, n: int, k: int) -> int:
    """Number of multiples of ``k`` in the closed interval ``[t, n]``."""
    if k < 1:
        raise BadParam(f"k must be >= 1, got {k}")
    if not 1 <= t <= n:
        raise BadParam(f"need 1 <= t <= n, got t={t}, n={n}")
    return n // k - (t - 1) // k


@dataclass(frozen=True)
class ProjectionVectors:
    """Averaging vector ``u`` and the deviation vectors ``e_i``."""

    m: int

    @property
    def u(self) -> np.ndarray:
        return np.full(self.m, 1.0 / self.m)

    def e(self, i: int) -> np.ndarray:
        vec = np.full(self.m, -1.0 / self.m)
        vec[i] = 1.0 - 1.0 / self.m
        return vec

    def all_e(self) -> np.ndarray:
        return np.eye(self.m) - 1.0 / self.m
