"""Constrained adjacency-basis reparametrizations and their gradients.

A basis of K free n-by-n matrices ``ahat`` is mapped to an effective basis of
K adjacency matrices under one of four modes:

- ``NONE``: effective basis is ``ahat`` verbatim.
- ``ORTH``: per entry (i, j), a sharp softmax across the K matrices
  ("crispmax"). Large sharpness gamma drives each entry to concentrate its
  mass on a single k, so pairwise entrywise products between matrices vanish
  and the basis becomes (near-)orthogonal.
- ``STOCH``: per matrix, a column-wise softmax. Every column then sums to one
  with positive entries, so each matrix is a Markov transition matrix.
- ``ORTH_STOCH``: crispmax first, then the column softmax on its output. The
  order matters: the column softmax rescales within columns only, so the
  near-zero pattern created by the crispmax stage survives, while applying
  crispmax after the column stage would break the column sums.

All gradients are applied as vector-Jacobian products over the K-axis or the
column axis; the full (K n^2)^2 Jacobian is never materialized. All softmaxes
subtract the running maximum first, so arbitrarily large sharpness values
(500+ arise in practice) never overflow the exponential.
"""

from __future__ import annotations

import enum
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numkit import ShapeError, as_tensor3, check_finite

__all__ = [
    "ConstraintMode",
    "AdjacencyBasis",
    "EffectiveBasis",
    "BasisCache",
    "SparsityReport",
    "crispmax_forward",
    "crispmax_vjp",
    "stochastic_forward",
    "stochastic_vjp",
    "basis_forward",
    "basis_vjp",
    "epsilon_orth_bound",
    "check_epsilon_orth",
    "max_colsum_deviation",
    "delta_gap",
    "anneal",
    "perturb",
    "sparsity_report",
    "save_basis",
    "load_basis",
]

DEFAULT_SPARSITY_THRESHOLD = 1e-2

BASIS_FORMAT = "litegcn.basis"
BASIS_VERSION = 1


class ConstraintMode(enum.Enum):
    NONE = "none"
    ORTH = "orth"
    STOCH = "stc"
    ORTH_STOCH = "orth+stc"

    @classmethod
    def parse(cls, text: str) -> "ConstraintMode":
        key = text.strip().lower().replace(" ", "")
        aliases = {
            "none": cls.NONE,
            "l": cls.NONE,
            "orth": cls.ORTH,
            "stc": cls.STOCH,
            "stoch": cls.STOCH,
            "orth+stc": cls.ORTH_STOCH,
            "stc+orth": cls.ORTH_STOCH,
            "orthstoch": cls.ORTH_STOCH,
        }
        if key not in aliases:
            raise ValueError(f"unknown constraint mode {text!r}")
        return aliases[key]

    @property
    def has_orth(self) -> bool:
        return self in (ConstraintMode.ORTH, ConstraintMode.ORTH_STOCH)

    @property
    def has_stoch(self) -> bool:
        return self in (ConstraintMode.STOCH, ConstraintMode.ORTH_STOCH)


@dataclass
class AdjacencyBasis:
    """Free parameters of the learnable basis plus constraint settings.

    ``gamma_max`` is the fully annealed sharpness of the crispmax stage.
    ``gamma_stoch`` is the fully annealed per-column sharpness; ``None``
    couples it to ``gamma_max`` (both stages then share one annealed value).
    ``epsilon`` is the target for the relaxed-orthogonality check; it must be
    strictly inside (0, 0.5) because the sharpness bound involves
    sqrt(1 - 2 epsilon). ``delta`` is the per-entry winner margin assumed by
    that bound.
    """

    ahat: np.ndarray
    mode: ConstraintMode = ConstraintMode.NONE
    gamma_max: float = 530.0
    gamma_stoch: float | None = None
    epsilon: float = 0.01
    delta: float = 0.01

    def __post_init__(self) -> None:
        self.ahat = as_tensor3(self.ahat)
        if isinstance(self.mode, str):
            self.mode = ConstraintMode.parse(self.mode)
        k, rows, cols = self.ahat.shape
        if k < 1 or rows < 1 or rows != cols:
            raise ShapeError(f"basis must be (K, n, n) with K,n >= 1, got {self.ahat.shape}")
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError("epsilon must lie strictly in (0, 0.5)")
        if self.delta <= 0.0:
            raise ValueError("delta must be positive")
        if self.gamma_max < 0.0:
            raise ValueError("gamma_max must be nonnegative")
        if self.gamma_stoch is not None and self.gamma_stoch <= 0.0:
            raise ValueError("gamma_stoch must be positive when given")

    @property
    def k(self) -> int:
        return self.ahat.shape[0]

    @property
    def n(self) -> int:
        return self.ahat.shape[1]

    def stoch_sharpness(self, gamma_eff: float) -> float:
        """Annealed column sharpness matching the crispmax anneal fraction."""
        if self.gamma_stoch is None or self.gamma_max == 0.0:
            return gamma_eff
        return self.gamma_stoch * (gamma_eff / self.gamma_max)

    def copy(self) -> "AdjacencyBasis":
        return AdjacencyBasis(
            ahat=self.ahat.copy(),
            mode=self.mode,
            gamma_max=self.gamma_max,
            gamma_stoch=self.gamma_stoch,
            epsilon=self.epsilon,
            delta=self.delta,
        )


@dataclass
class EffectiveBasis:
    """Constrained matrices actually used for aggregation.

    For constrained modes every entry lies in [0, 1]; mode ``NONE`` passes
    ``ahat`` through untouched, whatever its range.
    """

    a: np.ndarray
    mode: ConstraintMode
    gamma_eff: float


@dataclass
class BasisCache:
    """Stage intermediates needed to backpropagate through basis_forward."""

    mode: ConstraintMode
    gamma_eff: float
    gamma_stoch_eff: float
    orth_out: np.ndarray | None = None


@dataclass
class SparsityReport:
    threshold: float
    nonzero_count: int
    total_count: int
    pruning_rate_percent: float
    target_rate_percent: float


def _softmax_over_axis(x: np.ndarray, gamma: float, axis: int) -> np.ndarray:
    z = gamma * x
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def crispmax_forward(ahat: np.ndarray, gamma_eff: float) -> np.ndarray:
    """Entrywise softmax across the K matrices at sharpness ``gamma_eff``.

    For every (i, j), the output over k is softmax(gamma * ahat[:, i, j]),
    so the outputs at each entry sum to one across k and lie in (0, 1).
    gamma must be nonnegative; gamma = 0 gives the uniform 1/K everywhere.
    """
    if gamma_eff < 0.0:
        raise ValueError("gamma_eff must be nonnegative")
    ahat = np.asarray(ahat, dtype=np.float64)
    if ahat.ndim != 3:
        raise ShapeError(f"expected (K, n, n) tensor, got shape {ahat.shape}")
    check_finite(ahat, "ahat")
    return _softmax_over_axis(ahat, gamma_eff, axis=0)


def crispmax_vjp(a: np.ndarray, gamma_eff: float, grad_a: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. the crispmax output back to the free parameters.

    ``a`` must be a crispmax_forward output for the same gamma. The Jacobian
    acts independently at each (i, j) along the K-axis:

        grad_ahat[k] = gamma * a[k] * (grad_a[k] - sum_k' a[k'] * grad_a[k'])
    """
    a = np.asarray(a, dtype=np.float64)
    grad_a = np.asarray(grad_a, dtype=np.float64)
    if a.shape != grad_a.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {grad_a.shape}")
    inner = (a * grad_a).sum(axis=0, keepdims=True)
    return gamma_eff * a * (grad_a - inner)


def stochastic_forward(ahat: np.ndarray, gamma_s: float) -> np.ndarray:
    """Column-wise softmax of one matrix at per-column sharpness ``gamma_s``.

    Every output column sums to one with entries in (0, 1); this is the
    normalized-exponential reparametrization that keeps a matrix
    column-stochastic for any free input.
    """
    if gamma_s < 0.0:
        raise ValueError("gamma_s must be nonnegative")
    ahat = np.asarray(ahat, dtype=np.float64)
    if ahat.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {ahat.shape}")
    check_finite(ahat, "ahat")
    return _softmax_over_axis(ahat, gamma_s, axis=0)


def stochastic_vjp(a: np.ndarray, gamma_s: float, grad_a: np.ndarray) -> np.ndarray:
    """Pull a gradient through the column softmax, column by column.

    Columns do not interact: the normalization is per column, so the Jacobian
    is block-diagonal over columns and

        grad_ahat[i, j] = gamma_s * a[i, j] * (grad_a[i, j] - sum_i' a[i', j] * grad_a[i', j])
    """
    a = np.asarray(a, dtype=np.float64)
    grad_a = np.asarray(grad_a, dtype=np.float64)
    if a.shape != grad_a.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {grad_a.shape}")
    inner = (a * grad_a).sum(axis=0, keepdims=True)
    return gamma_s * a * (grad_a - inner)


def basis_forward(
    basis: AdjacencyBasis, gamma_eff: float
) -> tuple[EffectiveBasis, BasisCache]:
    """Map free parameters to the effective basis under the basis mode.

    Returns the effective basis plus the stage intermediates that
    ``basis_vjp`` needs. For ``ORTH_STOCH`` the crispmax stage runs first and
    the column softmax is applied to each of its matrices; at high sharpness
    the per-column winner dominates, so near-zero crispmax entries stay near
    zero after normalization.
    """
    mode = basis.mode
    gamma_s = basis.stoch_sharpness(gamma_eff)
    if mode is ConstraintMode.NONE:
        eff = basis.ahat.copy()
        return (
            EffectiveBasis(eff, mode, gamma_eff),
            BasisCache(mode, gamma_eff, gamma_s),
        )
    if mode is ConstraintMode.ORTH:
        eff = crispmax_forward(basis.ahat, gamma_eff)
        return (
            EffectiveBasis(eff, mode, gamma_eff),
            BasisCache(mode, gamma_eff, gamma_s),
        )
    if mode is ConstraintMode.STOCH:
        eff = np.stack([stochastic_forward(m, gamma_s) for m in basis.ahat])
        return (
            EffectiveBasis(eff, mode, gamma_eff),
            BasisCache(mode, gamma_eff, gamma_s),
        )
    # ORTH_STOCH: orthogonality stage first, then per-column normalization.
    b = crispmax_forward(basis.ahat, gamma_eff)
    eff = np.stack([stochastic_forward(m, gamma_s) for m in b])
    return (
        EffectiveBasis(eff, mode, gamma_eff),
        BasisCache(mode, gamma_eff, gamma_s, orth_out=b),
    )


def basis_vjp(
    basis: AdjacencyBasis,
    eff: EffectiveBasis,
    cache: BasisCache,
    grad_a: np.ndarray,
) -> np.ndarray:
    """Chain the stage VJPs in reverse forward order.

    For ``ORTH_STOCH`` the column-softmax VJP runs first (it was the last
    forward stage), then the crispmax VJP, using the cached crispmax output.
    """
    if cache.mode is not basis.mode:
        raise ValueError(f"cache mode {cache.mode} does not match basis mode {basis.mode}")
    grad_a = np.asarray(grad_a, dtype=np.float64)
    if grad_a.shape != basis.ahat.shape:
        raise ShapeError(f"gradient shape {grad_a.shape} != basis shape {basis.ahat.shape}")
    mode = basis.mode
    if mode is ConstraintMode.NONE:
        return grad_a.copy()
    if mode is ConstraintMode.ORTH:
        return crispmax_vjp(eff.a, cache.gamma_eff, grad_a)
    if mode is ConstraintMode.STOCH:
        return np.stack(
            [stochastic_vjp(eff.a[k], cache.gamma_stoch_eff, grad_a[k]) for k in range(basis.k)]
        )
    if cache.orth_out is None:
        raise ValueError("cache is missing the crispmax-stage output")
    grad_b = np.stack(
        [stochastic_vjp(eff.a[k], cache.gamma_stoch_eff, grad_a[k]) for k in range(basis.k)]
    )
    return crispmax_vjp(cache.orth_out, cache.gamma_eff, grad_b)


def epsilon_orth_bound(k: int, delta: float, epsilon: float) -> float:
    """Closed-form lower bound on the sharpness needed for epsilon-orthogonality.

        gamma >= (1 / delta) * ln(K * sqrt(1 - 2 eps) / (1 - sqrt(1 - 2 eps)) + 1)

    Any basis whose per-entry winner margin is at least ``delta`` becomes
    epsilon-orthogonal at this sharpness or above.
    """
    if k < 2:
        raise ValueError("bound requires at least two matrices (k >= 2)")
    if delta <= 0.0:
        raise ValueError("delta must be positive")
    if not 0.0 < epsilon < 0.5:
        raise ValueError("epsilon must lie strictly in (0, 0.5)")
    root = math.sqrt(1.0 - 2.0 * epsilon)
    return math.log(k * root / (1.0 - root) + 1.0) / delta


def check_epsilon_orth(eff, epsilon: float) -> tuple[bool, float]:
    """Largest entry of any pairwise entrywise product between basis matrices.

    Returns ``(ok, max_violation)`` where ``ok`` means every such entry is at
    most ``epsilon``. With fewer than two matrices the check is vacuous.
    """
    a = eff.a if isinstance(eff, EffectiveBasis) else np.asarray(eff, dtype=np.float64)
    k = a.shape[0]
    if k < 2:
        return True, 0.0
    worst = 0.0
    for p in range(k):
        for q in range(p + 1, k):
            worst = max(worst, float(np.max(a[p] * a[q])))
    return worst <= epsilon, worst


def max_colsum_deviation(eff) -> float:
    """Largest absolute deviation of any column sum from one."""
    a = eff.a if isinstance(eff, EffectiveBasis) else np.asarray(eff, dtype=np.float64)
    return float(np.max(np.abs(a.sum(axis=1) - 1.0)))


def delta_gap(ahat: np.ndarray) -> float:
    """Smallest winner margin: min over (i, j) of (top-1 minus top-2) across k.

    A tie anywhere yields 0 and a warning; ``perturb`` is the remedy.
    """
    ahat = np.asarray(ahat, dtype=np.float64)
    if ahat.shape[0] < 2:
        raise ValueError("delta_gap needs at least two matrices")
    top2 = np.sort(ahat, axis=0)[-2:]
    gap = float(np.min(top2[1] - top2[0]))
    if gap == 0.0:
        warnings.warn("basis has tied entries (delta gap 0); add noise to break ties")
    return gap


def anneal(gamma_max: float, epoch: int, max_epochs: int) -> float:
    """Linear sharpness schedule: gamma_max * epoch / max_epochs, clamped."""
    if max_epochs < 1:
        raise ValueError("max_epochs must be at least 1")
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    if epoch >= max_epochs:
        return float(gamma_max)
    return gamma_max * epoch / max_epochs


def perturb(ahat: np.ndarray, magnitude: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. uniform noise in [-magnitude, magnitude] to every entry."""
    if magnitude < 0.0:
        raise ValueError("magnitude must be nonnegative")
    ahat = np.asarray(ahat, dtype=np.float64)
    if magnitude == 0.0:
        return ahat.copy()
    return ahat + rng.uniform(-magnitude, magnitude, size=ahat.shape)


def _target_rate_percent(mode: ConstraintMode, k: int, n: int) -> float:
    if mode is ConstraintMode.ORTH:
        return float(math.floor((1.0 - 1.0 / k) * 100.0))
    if mode is ConstraintMode.ORTH_STOCH:
        return float(math.floor((1.0 - 1.0 / n) * 100.0))
    return 0.0


def sparsity_report(eff: EffectiveBasis, threshold: float = DEFAULT_SPARSITY_THRESHOLD) -> SparsityReport:
    """Count effective entries at or above ``threshold`` and derive rates."""
    if threshold <= 0.0:
        raise ValueError("threshold must be positive")
    a = eff.a
    k, n = a.shape[0], a.shape[1]
    total = a.size
    nonzero = int(np.count_nonzero(np.abs(a) >= threshold))
    rate = 100.0 * (1.0 - nonzero / total)
    return SparsityReport(
        threshold=threshold,
        nonzero_count=nonzero,
        total_count=total,
        pruning_rate_percent=rate,
        target_rate_percent=_target_rate_percent(eff.mode, k, n),
    )


def _basis_payload(basis: AdjacencyBasis) -> dict:
    # Field order is part of the format: mode, K, n, gammas, then the tensor
    # flattened row-major.
    return {
        "format": BASIS_FORMAT,
        "version": BASIS_VERSION,
        "mode": basis.mode.value,
        "k": basis.k,
        "n": basis.n,
        "gamma_max": basis.gamma_max,
        "gamma_stoch": basis.gamma_stoch,
        "epsilon": basis.epsilon,
        "delta": basis.delta,
        "ahat": basis.ahat.ravel().tolist(),
    }


def save_basis(basis: AdjacencyBasis, path: str | Path) -> None:
    Path(path).write_text(json.dumps(_basis_payload(basis)))


def _basis_from_payload(payload: dict) -> AdjacencyBasis:
    if payload.get("format") != BASIS_FORMAT:
        raise ValueError(f"not a basis checkpoint: format={payload.get('format')!r}")
    if payload.get("version") != BASIS_VERSION:
        raise ValueError(f"unsupported basis checkpoint version {payload.get('version')!r}")
    k, n = payload["k"], payload["n"]
    ahat = np.array(payload["ahat"], dtype=np.float64).reshape(k, n, n)
    return AdjacencyBasis(
        ahat=ahat,
        mode=ConstraintMode.parse(payload["mode"]),
        gamma_max=payload["gamma_max"],
        gamma_stoch=payload["gamma_stoch"],
        epsilon=payload["epsilon"],
        delta=payload["delta"],
    )


def load_basis(path: str | Path) -> AdjacencyBasis:
    return _basis_from_payload(json.loads(Path(path).read_text()))
