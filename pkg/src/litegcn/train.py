"""End-to-end optimization: Adam, the loss-speed learning-rate rule,
per-epoch sharpness annealing and noise injection, evaluation, magnitude
pruning with fine-tuning, and an ablation grid runner.

Training protocol per epoch: perturb the free basis with uniform noise, set
the annealed sharpness, run shuffled mini-batches (batched forward/backward
through the selected backend kernels, then the basis VJP and one Adam step
per batch), update the global learning rate from the loss-speed rule, and
record one metrics row. Everything is driven by one seeded generator, so a
(dataset, config, seed) triple reproduces bitwise.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import backend
from .connectivity import (
    AdjacencyBasis,
    ConstraintMode,
    anneal,
    basis_forward,
    basis_vjp,
    check_epsilon_orth,
    max_colsum_deviation,
    perturb,
    sparsity_report,
    DEFAULT_SPARSITY_THRESHOLD,
)
from .data import Dataset, handcrafted_adjacency, power_map_basis
from .model import GcnModel, init_model

__all__ = [
    "DivergenceError",
    "PruneSpec",
    "TrainConfig",
    "EpochRecord",
    "RunMetrics",
    "AdamState",
    "adam_step",
    "adapt_lr",
    "train",
    "evaluate",
    "magnitude_prune",
    "run_ablation",
    "ABLATION_MODES",
]


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries a diagnostic state dump."""

    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class PruneSpec:
    rate: float
    fine_tune_epochs: int


@dataclass
class TrainConfig:
    max_epochs: int = 2800
    batch_size: int = 600
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_init: float = 1e-2
    lr_factor: float = 0.99
    lr_bounds: tuple[float, float] = (1e-5, 1e-1)
    mode: ConstraintMode = ConstraintMode.NONE
    gamma_max: float = 530.0
    gamma_stoch: float | None = None
    epsilon: float = 0.01
    delta: float = 0.01
    noise_magnitude: float | None = None
    seed: int = 0
    filters_c: int = 16
    activation: str = "relu"
    freeze_basis: bool = False
    sparsity_threshold: float = DEFAULT_SPARSITY_THRESHOLD
    prune: PruneSpec | None = None

    def __post_init__(self) -> None:
        if isinstance(self.mode, str):
            self.mode = ConstraintMode.parse(self.mode)
        if not 0.0 < self.lr_factor < 1.0:
            raise ValueError("lr_factor must lie in (0, 1)")
        lo, hi = self.lr_bounds
        if not lo <= self.lr_init <= hi:
            raise ValueError("lr_init must lie within lr_bounds")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be nonnegative")
        if self.prune is not None and not 0.0 <= self.prune.rate < 100.0:
            raise ValueError("prune rate must lie in [0, 100)")

    def resolved_noise(self) -> float:
        """Noise defaults to delta/2 when a crispmax stage is active, else 0."""
        if self.noise_magnitude is not None:
            return self.noise_magnitude
        return self.delta / 2.0 if self.mode.has_orth else 0.0


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    nu: float
    gamma_eff: float
    max_cross_orth: float
    max_colsum_dev: float
    pruning_rate: float


@dataclass
class RunMetrics:
    records: list[EpochRecord] = field(default_factory=list)
    per_class_accuracy: list[float] | None = None
    mean_class_accuracy: float | None = None

    CSV_HEADER = "epoch,loss,nu,gamma_eff,max_cross_orth,max_colsum_dev,pruning_rate"

    def csv_lines(self) -> list[str]:
        lines = [self.CSV_HEADER]
        for r in self.records:
            lines.append(
                f"{r.epoch},{r.loss!r},{r.nu!r},{r.gamma_eff!r},"
                f"{r.max_cross_orth!r},{r.max_colsum_dev!r},{r.pruning_rate!r}"
            )
        return lines

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.csv_lines()))
            fh.write("\n")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    nu: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update at step size ``nu``, in place."""
    for name, p in params.items():
        if p.shape != grads[name].shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= nu * (m / c1) / (np.sqrt(v / c2) + eps)


def adapt_lr(
    loss_history: list[float],
    nu_prev: float,
    factor: float = 0.99,
    bounds: tuple[float, float] = (1e-5, 1e-1),
) -> float:
    """Loss-speed learning-rate rule.

    Speed is the absolute one-epoch loss change. When the latest speed
    exceeds the previous one, the rate shrinks by ``factor``; otherwise it
    grows by ``1/factor``. Always clamped to ``bounds``. With fewer than
    three recorded losses there are not two speeds to compare, so ``nu_prev``
    is returned unchanged.
    """
    if len(loss_history) < 3:
        return nu_prev
    speed_now = abs(loss_history[-1] - loss_history[-2])
    speed_prev = abs(loss_history[-2] - loss_history[-3])
    nu = nu_prev * factor if speed_now > speed_prev else nu_prev / factor
    return min(max(nu, bounds[0]), bounds[1])


def _stack_split(dataset: Dataset, split: str) -> tuple[np.ndarray, np.ndarray]:
    samples = dataset.split(split)
    if not samples:
        raise ValueError(f"{split} split is empty")
    u = np.ascontiguousarray(np.stack([s.u for s in samples]), dtype=np.float64)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return u, labels


def _trainable_params(model: GcnModel, freeze_basis: bool) -> dict[str, np.ndarray]:
    params = model.params()
    if freeze_basis:
        params.pop("ahat")
    return params


def _epoch_metrics(
    model: GcnModel, config: TrainConfig, epoch: int, loss: float, nu: float, gamma_eff: float
) -> EpochRecord:
    eff, _ = basis_forward(model.basis, gamma_eff)
    if model.prune_mask is not None:
        eff.a = eff.a * model.prune_mask
    _, cross = check_epsilon_orth(eff, model.basis.epsilon)
    report = sparsity_report(eff, config.sparsity_threshold)
    return EpochRecord(
        epoch=epoch,
        loss=loss,
        nu=nu,
        gamma_eff=gamma_eff,
        max_cross_orth=cross,
        max_colsum_dev=max_colsum_deviation(eff),
        pruning_rate=report.pruning_rate_percent,
    )


def _run_epochs(
    model: GcnModel,
    u_train: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator,
    state: AdamState,
    metrics: RunMetrics,
    epochs: int,
    epoch_offset: int,
    nu: float,
    loss_history: list[float],
    anneal_max_epochs: int,
    anneal_offset: int,
) -> float:
    n_train = u_train.shape[0]
    noise = config.resolved_noise()
    relu = model.activation == "relu"
    for local_epoch in range(1, epochs + 1):
        epoch = epoch_offset + local_epoch
        gamma_eff = anneal(config.gamma_max, anneal_offset + local_epoch, anneal_max_epochs)
        if noise > 0.0 and not config.freeze_basis:
            model.basis.ahat[...] = perturb(model.basis.ahat, noise, rng)
        order = rng.permutation(n_train)
        loss_total = 0.0
        for start in range(0, n_train, config.batch_size):
            batch = order[start : start + config.batch_size]
            bu = np.ascontiguousarray(u_train[batch])
            blab = np.ascontiguousarray(labels[batch])
            eff, cache = basis_forward(model.basis, gamma_eff)
            a_used = eff.a if model.prune_mask is None else eff.a * model.prune_mask
            a_used = np.ascontiguousarray(a_used)
            loss_sum, d_a, d_w, d_hw, d_hb = backend.batch_grads(
                a_used, bu, blab, model.filters, model.head_w, model.head_b, relu
            )
            if not math.isfinite(loss_sum):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}",
                    state={
                        "epoch": epoch,
                        "nu": nu,
                        "gamma_eff": gamma_eff,
                        "ahat_max": float(np.max(np.abs(model.basis.ahat))),
                        "filters_max": float(np.max(np.abs(model.filters))),
                        "head_max": float(np.max(np.abs(model.head_w))),
                    },
                )
            loss_total += loss_sum
            scale = 1.0 / batch.size
            grads = {
                "filters": d_w * scale,
                "head_w": d_hw * scale,
                "head_b": d_hb * scale,
            }
            if not config.freeze_basis:
                if model.prune_mask is not None:
                    d_a *= model.prune_mask
                grads["ahat"] = basis_vjp(model.basis, eff, cache, d_a) * scale
            params = _trainable_params(model, config.freeze_basis)
            adam_step(params, grads, state, nu, config.beta1, config.beta2, config.adam_eps)
        epoch_loss = loss_total / n_train
        loss_history.append(epoch_loss)
        metrics.records.append(
            _epoch_metrics(model, config, epoch, epoch_loss, nu, gamma_eff)
        )
        nu = adapt_lr(loss_history, nu, config.lr_factor, config.lr_bounds)
    return nu


def train(dataset: Dataset, model: GcnModel, config: TrainConfig) -> tuple[GcnModel, RunMetrics]:
    """Run the full training protocol; returns the trained model and metrics.

    When ``config.prune`` is set, the main phase is followed by magnitude
    pruning of the effective basis and a fine-tuning phase; the pruned
    entries stay exactly zero. Metrics accumulate one record per executed
    epoch across both phases. The loss-speed history is reset for the
    fine-tuning phase; the learning rate carries over.
    """
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    metrics = RunMetrics()
    u_train, labels = _stack_split(dataset, "train")
    state = AdamState.for_params(_trainable_params(model, config.freeze_basis))
    loss_history: list[float] = []
    nu = config.lr_init
    nu = _run_epochs(
        model,
        u_train,
        labels,
        config,
        rng,
        state,
        metrics,
        epochs=config.max_epochs,
        epoch_offset=0,
        nu=nu,
        loss_history=loss_history,
        anneal_max_epochs=max(config.max_epochs, 1),
        anneal_offset=0,
    )
    if config.prune is not None:
        model = magnitude_prune(model, config.prune.rate, gamma_eff=config.gamma_max)
        state = AdamState.for_params(_trainable_params(model, config.freeze_basis))
        loss_history = []
        # Fine-tuning runs at the fully annealed sharpness.
        _run_epochs(
            model,
            u_train,
            labels,
            config,
            rng,
            state,
            metrics,
            epochs=config.prune.fine_tune_epochs,
            epoch_offset=config.max_epochs,
            nu=nu,
            loss_history=loss_history,
            anneal_max_epochs=1,
            anneal_offset=1,
        )
    mean_acc, per_class, _ = evaluate(model, dataset, "test", gamma_eff=config.gamma_max)
    metrics.mean_class_accuracy = mean_acc
    metrics.per_class_accuracy = per_class
    return model, metrics


def evaluate(
    model: GcnModel,
    dataset: Dataset,
    split: str = "test",
    gamma_eff: float | None = None,
) -> tuple[float, list[float], np.ndarray]:
    """Mean per-class accuracy, per-class accuracies, and confusion matrix.

    The mean is over classes, not samples. Classes absent from the split are
    reported as NaN and excluded from the mean, with a warning.
    """
    samples = dataset.split(split)
    if not samples:
        raise ValueError(f"{split} split is empty")
    if gamma_eff is None:
        gamma_eff = model.basis.gamma_max
    u, labels = _stack_split(dataset, split)
    eff, _ = basis_forward(model.basis, gamma_eff)
    a_used = eff.a if model.prune_mask is None else np.ascontiguousarray(eff.a * model.prune_mask)
    logits = backend.batch_logits(
        np.ascontiguousarray(a_used), u, model.filters, model.head_w, model.head_b,
        model.activation == "relu",
    )
    pred = logits.argmax(axis=1)
    ncls = model.num_classes
    confusion = np.zeros((ncls, ncls), dtype=np.int64)
    for truth, guess in zip(labels, pred):
        confusion[truth, guess] += 1
    per_class: list[float] = []
    present: list[float] = []
    for cls in range(ncls):
        total = int(confusion[cls].sum())
        if total == 0:
            warnings.warn(f"class {cls} absent from {split} split; excluded from the mean")
            per_class.append(float("nan"))
            continue
        acc = confusion[cls, cls] / total
        per_class.append(float(acc))
        present.append(float(acc))
    if not present:
        raise ValueError("no class present in the split")
    return float(np.mean(present)), per_class, confusion


def magnitude_prune(model: GcnModel, rate: float, gamma_eff: float | None = None) -> GcnModel:
    """Zero the smallest-magnitude share of the effective basis, keep a mask.

    Exactly ``ceil(total * rate / 100)`` entries are zeroed (stable ordering
    breaks ties deterministically). Filters and head are untouched. The mask
    is applied in every subsequent forward and gradient, so masked entries
    never resurrect. Rates must lie in [0, 100).
    """
    if not 0.0 <= rate < 100.0:
        raise ValueError("prune rate must lie in [0, 100)")
    pruned = model.copy()
    if rate == 0.0:
        return pruned
    if gamma_eff is None:
        gamma_eff = model.basis.gamma_max
    eff, _ = basis_forward(pruned.basis, gamma_eff)
    a = eff.a if pruned.prune_mask is None else eff.a * pruned.prune_mask
    total = a.size
    count = math.ceil(total * rate / 100.0)
    order = np.argsort(np.abs(a).ravel(), kind="stable")
    mask = np.ones(total)
    mask[order[:count]] = 0.0
    mask = mask.reshape(a.shape)
    if pruned.prune_mask is not None:
        mask *= pruned.prune_mask
    pruned.prune_mask = mask
    if pruned.basis.mode is ConstraintMode.NONE:
        pruned.basis.ahat *= mask
    return pruned


ABLATION_MODES = ("H", "L", "L+orth", "L+MP", "L+stc", "L+orth+stc", "L+MP-n")


def _resolve_ablation_mode(token: str, k: int, n: int) -> tuple[ConstraintMode, bool, float | None]:
    """Map a Table-style mode token to (constraint mode, freeze, prune rate)."""
    t = token.strip()
    if t == "H":
        return ConstraintMode.NONE, True, None
    if t == "L":
        return ConstraintMode.NONE, False, None
    if t == "L+orth":
        return ConstraintMode.ORTH, False, None
    if t == "L+stc":
        return ConstraintMode.STOCH, False, None
    if t == "L+orth+stc":
        return ConstraintMode.ORTH_STOCH, False, None
    if t == "L+MP":
        return ConstraintMode.NONE, False, float(math.floor((1.0 - 1.0 / k) * 100.0))
    if t == "L+MP-n":
        return ConstraintMode.NONE, False, float(math.floor((1.0 - 1.0 / n) * 100.0))
    if t.startswith("L+MP:"):
        return ConstraintMode.NONE, False, float(t.split(":", 1)[1])
    raise ValueError(f"unknown ablation mode token {token!r}")


def run_ablation(
    dataset: Dataset,
    base_config: TrainConfig,
    k_values: list[int],
    modes: list[str],
) -> list[dict]:
    """Train one model per (K, mode) cell and tabulate accuracy and sparsity.

    Rows have keys ``k``, ``mode``, ``accuracy``, ``pruning_rate`` (the
    measured effective rate; "none" for the unpruned H and L baselines).
    """
    rows: list[dict] = []
    n = dataset.graph.n
    s = dataset.samples[0].u.shape[0]
    for k in k_values:
        for token in modes:
            mode, freeze, prune_rate = _resolve_ablation_mode(token, k, n)
            config = replace(
                base_config,
                mode=mode,
                freeze_basis=freeze,
                prune=(
                    None
                    if prune_rate is None
                    else PruneSpec(
                        rate=prune_rate,
                        fine_tune_epochs=(
                            base_config.prune.fine_tune_epochs
                            if base_config.prune is not None
                            else max(1, base_config.max_epochs // 10)
                        ),
                    )
                ),
            )
            rng = np.random.default_rng(config.seed)
            model = init_model(
                n=n,
                s=s,
                c=config.filters_c,
                num_classes=dataset.num_classes,
                k=k,
                mode=mode,
                gamma_max=config.gamma_max,
                gamma_stoch=config.gamma_stoch,
                epsilon=config.epsilon,
                delta=config.delta,
                activation=config.activation,
                rng=rng,
            )
            if token == "H":
                model.basis.ahat = power_map_basis(handcrafted_adjacency(dataset.graph), k)
            trained, metrics = train(dataset, model, config)
            if token in ("H", "L"):
                rate: float | str = "none"
            else:
                eff, _ = basis_forward(trained.basis, config.gamma_max)
                if trained.prune_mask is not None:
                    eff.a = eff.a * trained.prune_mask
                rate = sparsity_report(eff, config.sparsity_threshold).pruning_rate_percent
            rows.append(
                {
                    "k": k,
                    "mode": token,
                    "accuracy": metrics.mean_class_accuracy,
                    "pruning_rate": rate,
                }
            )
    return rows
