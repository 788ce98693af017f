"""Command-line entry point.

Subcommands: ``train``, ``eval``, ``gradcheck``, ``bound``, ``ablate``,
``prune``. Options may come from a flat ``key = value`` config file
(``--config``); explicit flags always win over file values. The merged run
spec is echoed to the output directory as ``runspec.json`` for provenance.

Exit codes: 0 success, 1 a check failed, 2 usage or config error,
3 training diverged. ``LITEGCN_OUTPUT_ROOT`` prefixes relative output
directories.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .connectivity import (
    ConstraintMode,
    basis_forward,
    check_epsilon_orth,
    crispmax_forward,
    epsilon_orth_bound,
    sparsity_report,
)
from .data import (
    SkeletonGraph,
    chain_skeleton,
    load_split,
    synth_dataset,
)
from .model import (
    GcnModel,
    cross_entropy,
    finite_diff_oracle,
    init_model,
    load_model,
    model_backward,
    model_forward,
    save_model,
)
from .train import (
    DivergenceError,
    PruneSpec,
    TrainConfig,
    evaluate,
    run_ablation,
    train,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3

GRADCHECK_TOL = 1e-6


class SpecError(ValueError):
    """Bad or conflicting run configuration."""


def _read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


_BOOL_STRINGS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _coerce(raw: str, kind):
    if kind is bool:
        if raw.lower() not in _BOOL_STRINGS:
            raise SpecError(f"expected a boolean, got {raw!r}")
        return _BOOL_STRINGS[raw.lower()]
    return kind(raw)


class RunSpec:
    """Flag values merged over config-file values merged over defaults."""

    def __init__(self, args: argparse.Namespace, schema: dict):
        self.values: dict = {}
        file_values: dict[str, str] = {}
        config_path = getattr(args, "config", None)
        if config_path:
            file_values = _read_config_file(config_path)
            unknown = set(file_values) - set(schema)
            if unknown:
                raise SpecError(f"unknown config keys: {sorted(unknown)}")
        for key, (kind, default) in schema.items():
            flag_value = getattr(args, key, None)
            if flag_value is not None:
                self.values[key] = flag_value
            elif key in file_values:
                self.values[key] = _coerce(file_values[key], kind)
            else:
                self.values[key] = default

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    def echo(self, out_dir: Path) -> None:
        (out_dir / "runspec.json").write_text(
            json.dumps(self.values, sort_keys=True, indent=2, default=str) + "\n"
        )


# Schema entries: key -> (type, default). Shared by train/ablate/prune.
DATA_SCHEMA = {
    "synthetic": (bool, None),
    "fpha": (str, None),
    "classes": (int, 5),
    "nodes": (int, 12),
    "per_class": (int, 12),
    "data_noise": (float, 0.05),
    "frames": (int, 32),
    "chunks": (int, 4),
    "center": (bool, False),
    "skeleton": (str, None),
}

TRAIN_SCHEMA = {
    **DATA_SCHEMA,
    "epochs": (int, 300),
    "batch_size": (int, 600),
    "mode": (str, "none"),
    "k": (int, 4),
    "filters": (int, 16),
    "gamma": (float, 530.0),
    "gamma_stoch": (float, None),
    "delta": (float, 0.01),
    "epsilon": (float, 0.01),
    "noise": (float, None),
    "lr": (float, 1e-2),
    "lr_factor": (float, 0.99),
    "lr_min": (float, 1e-5),
    "lr_max": (float, 1e-1),
    "threshold": (float, 1e-2),
    "seed": (int, 0),
    "freeze_basis": (bool, False),
    "prune_rate": (float, None),
    "fine_tune_epochs": (int, None),
    "out": (str, "litegcn-run"),
}


def _add_schema_flags(parser: argparse.ArgumentParser, schema: dict) -> None:
    parser.add_argument("--config", help="flat key = value config file")
    for key, (kind, _default) in schema.items():
        flag = "--" + key.replace("_", "-")
        if kind is bool:
            parser.add_argument(flag, action=argparse.BooleanOptionalAction, default=None)
        else:
            parser.add_argument(flag, type=kind, default=None)


def _resolve_out_dir(out: str) -> Path:
    root = os.environ.get("LITEGCN_OUTPUT_ROOT")
    path = Path(out)
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_skeleton(spec) -> SkeletonGraph:
    if spec.skeleton:
        payload = json.loads(Path(spec.skeleton).read_text())
        return SkeletonGraph(n=payload["n"], edges=[tuple(e) for e in payload["edges"]])
    return chain_skeleton(spec.nodes)


def _build_dataset(spec):
    synthetic = spec.synthetic
    if synthetic and spec.fpha:
        raise SpecError("--synthetic conflicts with --fpha")
    if spec.fpha:
        return load_split(
            spec.fpha, _load_skeleton(spec), m=spec.chunks, center=spec.center
        )
    return synth_dataset(
        num_classes=spec.classes,
        n=spec.nodes,
        per_class=spec.per_class,
        noise=spec.data_noise,
        seed=spec.seed,
        m=spec.chunks,
        frames=spec.frames,
    )


def _train_config(spec) -> TrainConfig:
    prune = None
    if spec.prune_rate is not None:
        fine = spec.fine_tune_epochs
        if fine is None:
            fine = max(1, spec.epochs // 10)
        prune = PruneSpec(rate=spec.prune_rate, fine_tune_epochs=fine)
    return TrainConfig(
        max_epochs=spec.epochs,
        batch_size=spec.batch_size,
        lr_init=spec.lr,
        lr_factor=spec.lr_factor,
        lr_bounds=(spec.lr_min, spec.lr_max),
        mode=ConstraintMode.parse(spec.mode),
        gamma_max=spec.gamma,
        gamma_stoch=spec.gamma_stoch,
        epsilon=spec.epsilon,
        delta=spec.delta,
        noise_magnitude=spec.noise,
        seed=spec.seed,
        filters_c=spec.filters,
        freeze_basis=spec.freeze_basis,
        sparsity_threshold=spec.threshold,
        prune=prune,
    )


def _init_from_spec(spec, dataset, config: TrainConfig) -> GcnModel:
    rng = np.random.default_rng(config.seed)
    return init_model(
        n=dataset.graph.n,
        s=dataset.samples[0].u.shape[0],
        c=config.filters_c,
        num_classes=dataset.num_classes,
        k=spec.k,
        mode=config.mode,
        gamma_max=config.gamma_max,
        gamma_stoch=config.gamma_stoch,
        epsilon=config.epsilon,
        delta=config.delta,
        rng=rng,
    )


def _final_summary(trained: GcnModel, metrics, config: TrainConfig) -> dict:
    eff, _ = basis_forward(trained.basis, config.gamma_max)
    if trained.prune_mask is not None:
        eff.a = eff.a * trained.prune_mask
    _, cross = check_epsilon_orth(eff, trained.basis.epsilon)
    report = sparsity_report(eff, config.sparsity_threshold)
    colsum_dev = float(np.max(np.abs(eff.a.sum(axis=1) - 1.0)))
    return {
        "mean_class_accuracy": metrics.mean_class_accuracy,
        "per_class_accuracy": metrics.per_class_accuracy,
        "epochs": len(metrics.records),
        "mode": trained.basis.mode.value,
        "k": trained.basis.k,
        "n": trained.basis.n,
        "pruning_rate_percent": report.pruning_rate_percent,
        "target_rate_percent": report.target_rate_percent,
        "max_cross_orth": cross,
        "max_colsum_dev": colsum_dev,
    }


def cmd_train(args: argparse.Namespace) -> int:
    spec = RunSpec(args, TRAIN_SCHEMA)
    dataset = _build_dataset(spec)
    config = _train_config(spec)
    model = _init_from_spec(spec, dataset, config)
    out_dir = _resolve_out_dir(spec.out)
    spec.echo(out_dir)
    trained, metrics = train(dataset, model, config)
    metrics.write_csv(out_dir / "metrics.csv")
    save_model(trained, out_dir / "model.json", epoch=len(metrics.records))
    summary = _final_summary(trained, metrics, config)
    (out_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(f"trained {len(metrics.records)} epochs; "
          f"mean class accuracy {summary['mean_class_accuracy']:.4f}; "
          f"pruning rate {summary['pruning_rate_percent']:.2f}%")
    print(f"outputs in {out_dir}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    spec = RunSpec(args, {**TRAIN_SCHEMA, "checkpoint": (str, None), "split": (str, "test")})
    if not spec.checkpoint:
        raise SpecError("--checkpoint is required")
    model, _epoch = load_model(spec.checkpoint)
    dataset = _build_dataset(spec)
    mean_acc, per_class, confusion = evaluate(model, dataset, spec.split)
    result = {
        "split": spec.split,
        "mean_class_accuracy": mean_acc,
        "per_class_accuracy": per_class,
        "confusion": confusion.tolist(),
    }
    out_dir = _resolve_out_dir(spec.out)
    spec.echo(out_dir)
    (out_dir / "eval.json").write_text(json.dumps(result, sort_keys=True, indent=2) + "\n")
    print(f"{spec.split} mean class accuracy: {mean_acc:.4f}")
    return EXIT_OK


GRADCHECK_SCHEMA = {
    "mode": (str, "all"),
    "k": (int, 3),
    "n": (int, 5),
    "s": (int, 4),
    "filters": (int, 3),
    "classes": (int, 3),
    "seeds": (int, 5),
    "gamma": (float, 2.5),
    "step": (float, 1e-5),
    "inject_fault": (bool, False),
}


def _gradcheck_instance(mode: ConstraintMode, spec, seed: int):
    """One random desk-scale model/sample pair, resampled away from relu kinks."""
    rng = np.random.default_rng(seed)
    for _ in range(50):
        model = init_model(
            n=spec.n, s=spec.s, c=spec.filters, num_classes=spec.classes,
            k=spec.k, mode=mode, gamma_max=spec.gamma, rng=rng,
        )
        u = rng.normal(0.0, 1.0, size=(spec.s, spec.n))
        label = int(rng.integers(spec.classes))
        sample = type("S", (), {"u": u, "label": label})()
        trace = model_forward(model, sample, spec.gamma)
        if np.min(np.abs(trace.pre_activation)) > 1e-4:
            return model, sample, trace
    raise RuntimeError("could not sample away from relu kinks")


def cmd_gradcheck(args: argparse.Namespace) -> int:
    spec = RunSpec(args, GRADCHECK_SCHEMA)
    if spec.mode == "all":
        modes = list(ConstraintMode)
    else:
        modes = [ConstraintMode.parse(spec.mode)]
    worst = 0.0
    failed: list[str] = []
    for mode in modes:
        group_worst: dict[str, float] = {}
        for i in range(spec.seeds):
            model, sample, trace = _gradcheck_instance(mode, spec, seed=1000 + i)
            _, d_logits = cross_entropy(trace.logits, sample.label)
            grads = model_backward(model, trace, d_logits).as_dict()
            for group, analytic in grads.items():
                if spec.inject_fault:
                    analytic = -analytic
                numeric = finite_diff_oracle(model, sample, group, spec.gamma, spec.step)
                denom = np.maximum(1.0, np.maximum(np.abs(numeric), np.abs(analytic)))
                err = float(np.max(np.abs(analytic - numeric) / denom))
                group_worst[group] = max(group_worst.get(group, 0.0), err)
        for group, err in group_worst.items():
            status = "PASS" if err <= GRADCHECK_TOL else "FAIL"
            print(f"mode={mode.value:<9} group={group:<8} max_rel_err={err:.3e} {status}")
            worst = max(worst, err)
            if err > GRADCHECK_TOL:
                failed.append(f"{mode.value}/{group}")
    if failed:
        print(f"gradient check FAILED for: {', '.join(failed)}")
        return EXIT_CHECK_FAILED
    print(f"gradient check passed (worst {worst:.3e} <= {GRADCHECK_TOL:.0e})")
    return EXIT_OK


BOUND_SCHEMA = {
    "k": (int, 2),
    "delta": (float, 0.01),
    "eps": (float, 0.01),
    "trials": (int, 1000),
    "n": (int, 8),
    "seed": (int, 0),
}


def cmd_bound(args: argparse.Namespace) -> int:
    spec = RunSpec(args, BOUND_SCHEMA)
    gamma = epsilon_orth_bound(spec.k, spec.delta, spec.eps)
    print(f"gamma >= {gamma:.4f} gives {spec.eps}-orthogonality "
          f"for K={spec.k} bases with winner margin delta={spec.delta}")
    rng = np.random.default_rng(spec.seed)
    worst = 0.0
    for _ in range(spec.trials):
        ahat = rng.uniform(0.0, 1.0, size=(spec.k, spec.n, spec.n))
        winners = ahat.argmax(axis=0)
        ii, jj = np.meshgrid(np.arange(spec.n), np.arange(spec.n), indexing="ij")
        ahat[winners, ii, jj] += spec.delta
        eff = crispmax_forward(ahat, gamma)
        ok, violation = check_epsilon_orth(eff, spec.eps)
        worst = max(worst, violation)
        if not ok:
            print(f"verification: FAIL (violation {violation:.3e} > {spec.eps})")
            return EXIT_CHECK_FAILED
    print(f"verification: PASS over {spec.trials} trials "
          f"(max pairwise product {worst:.3e} <= {spec.eps})")
    return EXIT_OK


ABLATE_SCHEMA = {
    **TRAIN_SCHEMA,
    "k_grid": (str, "2,4"),
    "modes": (str, "H,L,L+orth,L+orth+stc"),
}


def cmd_ablate(args: argparse.Namespace) -> int:
    spec = RunSpec(args, ABLATE_SCHEMA)
    dataset = _build_dataset(spec)
    config = _train_config(spec)
    k_values = [int(tok) for tok in str(spec.k_grid).split(",") if tok.strip()]
    modes = [tok.strip() for tok in spec.modes.split(",") if tok.strip()]
    rows = run_ablation(dataset, config, k_values, modes)
    out_dir = _resolve_out_dir(spec.out)
    spec.echo(out_dir)
    lines = ["k,mode,accuracy,pruning_rate"]
    for row in rows:
        rate = row["pruning_rate"]
        rate_txt = rate if isinstance(rate, str) else repr(rate)
        lines.append(f"{row['k']},{row['mode']},{row['accuracy']!r},{rate_txt}")
    (out_dir / "ablation.csv").write_text("\n".join(lines) + "\n")
    (out_dir / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    for line in lines:
        print(line)
    return EXIT_OK


def cmd_prune(args: argparse.Namespace) -> int:
    schema = {**TRAIN_SCHEMA, "checkpoint": (str, None), "rate": (float, None)}
    spec = RunSpec(args, schema)
    if not spec.checkpoint:
        raise SpecError("--checkpoint is required")
    if spec.rate is None:
        raise SpecError("--rate is required")
    model, epoch = load_model(spec.checkpoint)
    dataset = _build_dataset(spec)
    fine = spec.fine_tune_epochs
    if fine is None:
        fine = max(1, spec.epochs // 10)
    spec.values["prune_rate"] = spec.rate
    spec.values["fine_tune_epochs"] = fine
    spec.values["epochs"] = 0
    spec.values["mode"] = model.basis.mode.value
    spec.values["k"] = model.basis.k
    config = _train_config(spec)
    out_dir = _resolve_out_dir(spec.out)
    spec.echo(out_dir)
    trained, metrics = train(dataset, model, config)
    metrics.write_csv(out_dir / "metrics.csv")
    save_model(trained, out_dir / "model.json", epoch=epoch + len(metrics.records))
    summary = _final_summary(trained, metrics, config)
    (out_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(f"pruned at {spec.rate}% and fine-tuned {fine} epochs; "
          f"mean class accuracy {summary['mean_class_accuracy']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="litegcn",
        description="Train and analyze lightweight GCNs with learned sparse connectivity.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and write metrics/checkpoint")
    _add_schema_flags(p_train, TRAIN_SCHEMA)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_schema_flags(p_eval, {**TRAIN_SCHEMA, "checkpoint": (str, None), "split": (str, "test")})
    p_eval.set_defaults(func=cmd_eval)

    p_grad = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    _add_schema_flags(p_grad, GRADCHECK_SCHEMA)
    p_grad.set_defaults(func=cmd_gradcheck)

    p_bound = sub.add_parser("bound", help="sharpness lower bound plus empirical verification")
    _add_schema_flags(p_bound, BOUND_SCHEMA)
    p_bound.set_defaults(func=cmd_bound)

    p_abl = sub.add_parser("ablate", help="run a (K, mode) grid and tabulate results")
    _add_schema_flags(p_abl, ABLATE_SCHEMA)
    p_abl.set_defaults(func=cmd_ablate)

    p_prune = sub.add_parser("prune", help="magnitude-prune a checkpoint and fine-tune")
    _add_schema_flags(p_prune, {**TRAIN_SCHEMA, "checkpoint": (str, None), "rate": (float, None)})
    p_prune.set_defaults(func=cmd_prune)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles --help (0) and usage errors (2)
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        print(f"state: {json.dumps(exc.state, sort_keys=True)}", file=sys.stderr)
        return EXIT_DIVERGED
    except (SpecError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
