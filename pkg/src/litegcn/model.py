"""The GCN itself: aggregation block, classifier head, loss, and exact
reverse-mode gradients through every parameter group including the
adjacency basis.

The architecture is deliberately minimal: one graph-convolution block

    hidden = f( sum_k A_k @ U^T @ W_k )        (n x C)

followed by a row-major flatten and a single affine layer into class logits.
``A_k`` comes from the constrained basis, ``U`` (s x n) is the node signal,
and the ``W_k`` (s x C) are the per-matrix filter banks. The per-sample
functions here are the reference path used by the gradient checks; the
trainer runs the batched backend kernels, which are tested against this
path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .connectivity import (
    AdjacencyBasis,
    BasisCache,
    ConstraintMode,
    EffectiveBasis,
    basis_forward,
    basis_vjp,
)
from .numkit import ShapeError

__all__ = [
    "GcnModel",
    "ForwardTrace",
    "Gradients",
    "gc_block",
    "model_forward",
    "cross_entropy",
    "model_backward",
    "finite_diff_oracle",
    "gradient_check",
    "init_model",
    "save_model",
    "load_model",
]

MODEL_FORMAT = "litegcn.model"
MODEL_VERSION = 1

PARAM_GROUPS = ("ahat", "filters", "head_w", "head_b")


@dataclass
class GcnModel:
    """Adjacency basis, filter banks, affine head, and activation choice.

    ``prune_mask`` (0/1, same shape as the basis) is set by magnitude
    pruning; masked entries of the effective basis are forced to zero in the
    forward pass and receive no gradient, so they can never resurrect.
    """

    basis: AdjacencyBasis
    filters: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray
    activation: str = "relu"
    prune_mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.filters = np.ascontiguousarray(self.filters, dtype=np.float64)
        self.head_w = np.ascontiguousarray(self.head_w, dtype=np.float64)
        self.head_b = np.ascontiguousarray(self.head_b, dtype=np.float64)
        if self.filters.ndim != 3 or self.filters.shape[0] != self.basis.k:
            raise ShapeError(
                f"filters must be (K, s, C) with K={self.basis.k}, got {self.filters.shape}"
            )
        n, c = self.basis.n, self.filters.shape[2]
        if self.head_w.shape != (n * c, self.head_b.shape[0]):
            raise ShapeError(
                f"head must map n*C={n * c} features to {self.head_b.shape[0]} classes, "
                f"got {self.head_w.shape}"
            )
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def k(self) -> int:
        return self.basis.k

    @property
    def n(self) -> int:
        return self.basis.n

    @property
    def s(self) -> int:
        return self.filters.shape[1]

    @property
    def c(self) -> int:
        return self.filters.shape[2]

    @property
    def num_classes(self) -> int:
        return self.head_b.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {
            "ahat": self.basis.ahat,
            "filters": self.filters,
            "head_w": self.head_w,
            "head_b": self.head_b,
        }

    def copy(self) -> "GcnModel":
        return GcnModel(
            basis=self.basis.copy(),
            filters=self.filters.copy(),
            head_w=self.head_w.copy(),
            head_b=self.head_b.copy(),
            activation=self.activation,
            prune_mask=None if self.prune_mask is None else self.prune_mask.copy(),
        )


@dataclass
class ForwardTrace:
    """Everything the backward pass needs from one forward evaluation.

    ``eff`` is the basis actually used (prune mask applied, if any);
    ``eff_unmasked`` keeps the raw reparametrization output, which the basis
    VJP needs because the stage Jacobians are functions of the unmasked
    softmax outputs.
    """

    eff: EffectiveBasis
    eff_unmasked: EffectiveBasis
    cache: BasisCache
    u: np.ndarray
    pre_activation: np.ndarray
    hidden: np.ndarray
    logits: np.ndarray


@dataclass
class Gradients:
    d_ahat: np.ndarray
    d_filters: np.ndarray
    d_head_w: np.ndarray
    d_head_b: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "ahat": self.d_ahat,
            "filters": self.d_filters,
            "head_w": self.d_head_w,
            "head_b": self.d_head_b,
        }


def _activate(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(pre, 0.0)
    return pre.copy()


def gc_block(eff, u: np.ndarray, filters: np.ndarray, activation: str = "relu") -> np.ndarray:
    """Graph-convolution block: f(sum_k A_k @ U^T @ W_k), an (n x C) matrix.

    The A_k multiply aggregates each node's neighborhood signal; the filter
    multiply then convolves the aggregates.
    """
    a = eff.a if isinstance(eff, EffectiveBasis) else np.asarray(eff, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if a.ndim != 3 or u.ndim != 2:
        raise ShapeError("expected (K, n, n) basis and (s, n) signal")
    k, n = a.shape[0], a.shape[1]
    if u.shape[1] != n:
        raise ShapeError(f"signal has {u.shape[1]} nodes, basis has {n}")
    if filters.shape[0] != k or filters.shape[1] != u.shape[0]:
        raise ShapeError(
            f"filters {filters.shape} incompatible with K={k}, s={u.shape[0]}"
        )
    ut = u.T
    pre = np.zeros((n, filters.shape[2]))
    for kk in range(k):
        pre += a[kk] @ ut @ filters[kk]
    return _activate(pre, activation)


def model_forward(model: GcnModel, sample, gamma_eff: float) -> ForwardTrace:
    """Full forward pass: basis -> GC block -> flatten -> affine head."""
    u = np.asarray(sample.u, dtype=np.float64)
    eff_unmasked, cache = basis_forward(model.basis, gamma_eff)
    eff = eff_unmasked
    if model.prune_mask is not None:
        eff = EffectiveBasis(eff.a * model.prune_mask, eff.mode, eff.gamma_eff)
    ut = u.T
    pre = np.zeros((model.n, model.c))
    for k in range(model.k):
        pre += eff.a[k] @ ut @ model.filters[k]
    hidden = _activate(pre, model.activation)
    logits = hidden.reshape(-1) @ model.head_w + model.head_b
    return ForwardTrace(
        eff=eff,
        eff_unmasked=eff_unmasked,
        cache=cache,
        u=u,
        pre_activation=pre,
        hidden=hidden,
        logits=logits,
    )


def cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Stabilized softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
    z = logits - logits.max()
    ez = np.exp(z)
    p = ez / ez.sum()
    loss = float(np.log(ez.sum()) - z[label])
    d_logits = p.copy()
    d_logits[label] -= 1.0
    return loss, d_logits


def model_backward(model: GcnModel, trace: ForwardTrace, d_logits: np.ndarray) -> Gradients:
    """Exact reverse-mode gradients for head, filters, and basis parameters."""
    d_logits = np.asarray(d_logits, dtype=np.float64)
    if d_logits.shape != trace.logits.shape:
        raise ShapeError("d_logits shape does not match the trace")
    flat = trace.hidden.reshape(-1)
    d_head_w = np.outer(flat, d_logits)
    d_head_b = d_logits.copy()
    d_hidden = (model.head_w @ d_logits).reshape(trace.hidden.shape)
    if model.activation == "relu":
        d_pre = d_hidden * (trace.pre_activation > 0.0)
    else:
        d_pre = d_hidden
    ut = trace.u.T
    d_a = np.empty_like(trace.eff.a)
    d_filters = np.empty_like(model.filters)
    for k in range(model.k):
        bmat = ut @ model.filters[k]          # (n, C)
        d_a[k] = d_pre @ bmat.T
        d_filters[k] = (trace.eff.a[k] @ ut).T @ d_pre
    if model.prune_mask is not None:
        d_a *= model.prune_mask
    d_ahat = basis_vjp(model.basis, trace.eff_unmasked, trace.cache, d_a)
    return Gradients(d_ahat=d_ahat, d_filters=d_filters, d_head_w=d_head_w, d_head_b=d_head_b)


def _loss_at(model: GcnModel, sample, gamma_eff: float) -> float:
    trace = model_forward(model, sample, gamma_eff)
    loss, _ = cross_entropy(trace.logits, sample.label)
    return loss


def finite_diff_oracle(
    model: GcnModel,
    sample,
    selector: str,
    gamma_eff: float,
    step: float = 1e-5,
) -> np.ndarray:
    """Central-difference gradient of the loss for one parameter group.

    Perturbs each scalar of the selected group by +/- step and evaluates the
    full forward; the result has the group's shape. Deliberately independent
    of model_backward so it can arbitrate it.
    """
    if step <= 0.0:
        raise ValueError("step must be positive")
    if selector not in PARAM_GROUPS:
        raise ValueError(f"unknown parameter group {selector!r}")
    work = model.copy()
    target = work.params()[selector]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + step
        up = _loss_at(work, sample, gamma_eff)
        flat[idx] = orig - step
        down = _loss_at(work, sample, gamma_eff)
        flat[idx] = orig
        gflat[idx] = (up - down) / (2.0 * step)
    return grad


def gradient_check(
    model: GcnModel,
    sample,
    gamma_eff: float,
    step: float = 1e-5,
) -> dict[str, float]:
    """Max relative error of analytic vs finite-difference gradients per group.

    Relative error of a pair (x, y) is |x - y| / max(1, |x|, |y|) taken
    entrywise, which stays meaningful for near-zero gradients.
    """
    trace = model_forward(model, sample, gamma_eff)
    _, d_logits = cross_entropy(trace.logits, sample.label)
    grads = model_backward(model, trace, d_logits).as_dict()
    errors: dict[str, float] = {}
    for group in PARAM_GROUPS:
        numeric = finite_diff_oracle(model, sample, group, gamma_eff, step)
        analytic = grads[group]
        denom = np.maximum(1.0, np.maximum(np.abs(numeric), np.abs(analytic)))
        errors[group] = float(np.max(np.abs(analytic - numeric) / denom))
    return errors


def init_model(
    n: int,
    s: int,
    c: int,
    num_classes: int,
    k: int,
    mode: ConstraintMode | str = ConstraintMode.NONE,
    gamma_max: float = 530.0,
    gamma_stoch: float | None = None,
    epsilon: float = 0.01,
    delta: float = 0.01,
    activation: str = "relu",
    rng: np.random.Generator | None = None,
) -> GcnModel:
    """Seeded initialization.

    Filters and head use uniform +/- 1/sqrt(fan_in). The free basis starts
    i.i.d. uniform [0, 1]; the per-entry winner then gets a +delta bump so
    the winner margin is at least delta everywhere from the start.
    """
    if rng is None:
        rng = np.random.default_rng()
    if isinstance(mode, str):
        mode = ConstraintMode.parse(mode)
    ahat = rng.uniform(0.0, 1.0, size=(k, n, n))
    if k > 1:
        winners = ahat.argmax(axis=0)
        ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        ahat[winners, ii, jj] += delta
    basis = AdjacencyBasis(
        ahat=ahat,
        mode=mode,
        gamma_max=gamma_max,
        gamma_stoch=gamma_stoch,
        epsilon=epsilon,
        delta=delta,
    )
    bound_f = 1.0 / np.sqrt(s)
    filters = rng.uniform(-bound_f, bound_f, size=(k, s, c))
    bound_h = 1.0 / np.sqrt(n * c)
    head_w = rng.uniform(-bound_h, bound_h, size=(n * c, num_classes))
    head_b = np.zeros(num_classes)
    return GcnModel(
        basis=basis,
        filters=filters,
        head_w=head_w,
        head_b=head_b,
        activation=activation,
    )


def save_model(model: GcnModel, path: str | Path, epoch: int = 0) -> None:
    """Versioned JSON checkpoint: basis payload, filters, head, activation."""
    from .connectivity import _basis_payload

    payload = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "epoch": epoch,
        "activation": model.activation,
        "basis": _basis_payload(model.basis),
        "s": model.s,
        "c": model.c,
        "num_classes": model.num_classes,
        "filters": model.filters.ravel().tolist(),
        "head_w": model.head_w.ravel().tolist(),
        "head_b": model.head_b.tolist(),
        "prune_mask": None if model.prune_mask is None else model.prune_mask.ravel().astype(int).tolist(),
    }
    Path(path).write_text(json.dumps(payload))


def load_model(path: str | Path) -> tuple[GcnModel, int]:
    """Inverse of save_model; returns the model and the stored epoch."""
    from .connectivity import _basis_from_payload

    payload = json.loads(Path(path).read_text())
    if payload.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a model checkpoint: format={payload.get('format')!r}")
    if payload.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model checkpoint version {payload.get('version')!r}")
    basis = _basis_from_payload(payload["basis"])
    k, n = basis.k, basis.n
    s, c, num_classes = payload["s"], payload["c"], payload["num_classes"]
    filters = np.array(payload["filters"], dtype=np.float64).reshape(k, s, c)
    head_w = np.array(payload["head_w"], dtype=np.float64).reshape(n * c, num_classes)
    head_b = np.array(payload["head_b"], dtype=np.float64)
    mask = payload.get("prune_mask")
    prune_mask = None if mask is None else np.array(mask, dtype=np.float64).reshape(k, n, n)
    model = GcnModel(
        basis=basis,
        filters=filters,
        head_w=head_w,
        head_b=head_b,
        activation=payload["activation"],
        prune_mask=prune_mask,
    )
    return model, int(payload["epoch"])
