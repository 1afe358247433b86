"""Command-line driver: balancing runs, uniqueness checks, training, approximation.

Exit codes: 0 success, 1 usage or I/O failure, 2 non-convergence or divergence.
All randomness flows from one per-run seed recorded in the manifest; the
environment variable BALANCEKIT_SEED overrides it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .activations import (
    ActivationSpec,
    IDENTITY,
    LOGISTIC_UNIT,
    RELU,
    TANH_UNIT,
    activation_from_json,
    construct_universal_approximator,
    leaky_relu,
    max_slice_jump,
)
from .balancing import Schedule, network_deficit, run_balancing, trace_to_csv
from .manifold import apply_multipliers, solve_convex
from .netgraph import forward, load, make_layered, save, validate
from .regularizer import network_cost, parse_cost
from .training import (
    BalanceMode,
    Dataset,
    TrainConfig,
    TrainingDiverged,
    load_csv,
    load_idx,
    make_concentric_circles,
    metrics_to_csv,
    sgd_train,
)

_ACTIVATIONS = {
    "relu": RELU,
    "identity": IDENTITY,
    "tanh": TANH_UNIT,
    "logistic": LOGISTIC_UNIT,
    "leaky_relu": leaky_relu(),
}


def _activation(spec) -> ActivationSpec:
    if isinstance(spec, str):
        try:
            return _ACTIVATIONS[spec]
        except KeyError:
            raise ValueError(f"unknown activation name {spec!r}") from None
    return activation_from_json(spec)


def _env_seed(default):
    env = os.environ.get("BALANCEKIT_SEED")
    return int(env) if env else default


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest(out: Path, command: str, params: dict):
    _write_json(out / "manifest.json", {"command": command, "params": params, "version": __version__})


def _structural(net):
    return [p for p in validate(net) if "all-zero" not in p and "no nonzero" not in p]


def _parse_schedule(text: str, seed: int, tol: float, max_steps: int) -> Schedule:
    if text == "stochastic" or text.startswith("stochastic:"):
        if ":" in text:
            seed = int(text.split(":", 1)[1])
        return Schedule("stochastic", seed=seed, deficit_tol=tol, max_steps=max_steps)
    kinds = {"sequential": "sequential", "layer": "layer_independent",
             "layer-tied": "layer_tied", "partial": "partial_pass"}
    if text in kinds:
        return Schedule(kinds[text], seed=seed, deficit_tol=tol, max_steps=max_steps)
    raise ValueError(f"unknown schedule {text!r}")


# -- balance -----------------------------------------------------------------


def cmd_balance(args) -> int:
    net = load(args.net)
    problems = _structural(net)
    if problems:
        raise ValueError("invalid network: " + "; ".join(problems))
    cost = parse_cost(args.cost)
    seed = _env_seed(args.seed)
    schedule = _parse_schedule(args.schedule, seed, args.tol, args.max_steps)
    out = _out_dir(args.out)
    r_before = network_cost(net, cost)
    final, trace = run_balancing(net, schedule, cost)
    save(final, out / "balanced.json")
    (out / "trace.csv").write_text(trace_to_csv(trace), encoding="utf-8")
    summary = {
        "r_before": r_before,
        "r_after": network_cost(final, cost),
        "steps": len(trace.steps),
        "final_deficit": network_deficit(final, cost),
        "converged": trace.converged,
        "notes": trace.notes,
    }
    _write_json(out / "summary.json", summary)
    _manifest(out, "balance", {
        "net": str(args.net), "cost": args.cost, "schedule": args.schedule,
        "tol": args.tol, "max_steps": args.max_steps, "seed": seed,
    })
    return 0 if trace.converged else 2


# -- verify-uniqueness -------------------------------------------------------


def cmd_verify_uniqueness(args) -> int:
    if args.n_schedules < 2:
        raise ValueError("need at least 2 schedules to compare")
    net = load(args.net)
    problems = _structural(net)
    if problems:
        raise ValueError("invalid network: " + "; ".join(problems))
    cost = parse_cost(args.cost)
    seed = _env_seed(args.seed)
    out = _out_dir(args.out)
    _manifest(out, "verify-uniqueness", {
        "net": str(args.net), "cost": args.cost, "n_schedules": args.n_schedules,
        "tol": args.tol, "max_steps": args.max_steps, "seed": seed,
    })

    base = Schedule("stochastic", seed=seed, deficit_tol=args.tol, max_steps=args.max_steps)
    _, probe = run_balancing(net, base, cost)
    if "nothing to balance" in probe.notes:
        _write_json(out / "report.json", {"note": "nothing to balance", "n_schedules": 0})
        print("nothing to balance; trivially unique")
        return 0

    results = []
    for k in range(args.n_schedules):
        sched = Schedule("stochastic", seed=seed + k, deficit_tol=args.tol,
                         max_steps=args.max_steps)
        final, trace = run_balancing(net, sched, cost)
        if not trace.converged:
            print(f"schedule with seed {seed + k} did not converge", file=sys.stderr)
            return 2
        results.append(final.weights())
    stack = np.stack(results)
    max_pairwise = float(np.max(stack.max(axis=0) - stack.min(axis=0))) if len(results) else 0.0

    solution = solve_convex(net, cost)
    oracle = apply_multipliers(net, solution.multipliers).weights()
    max_vs_oracle = float(np.max(np.abs(stack - oracle[None, :])))
    _write_json(out / "oracle.json", {
        "r_star": solution.r_star,
        "lambda_per_unit": {str(u): v for u, v in sorted(solution.multipliers.lambda_per_unit.items())},
        "grad_norm": solution.grad_norm,
        "iterations": solution.iterations,
        "constraint_residuals": solution.constraint_residuals,
    })
    report = {
        "n_schedules": args.n_schedules,
        "max_pairwise": max_pairwise,
        "max_vs_oracle": max_vs_oracle,
        "r_star": solution.r_star,
        "oracle_grad_norm": solution.grad_norm,
        "oracle_iterations": solution.iterations,
        "max_constraint_residual": max((abs(r) for r in solution.constraint_residuals), default=0.0),
    }
    _write_json(out / "report.json", report)
    ok = max_pairwise < 1e-6 and max_vs_oracle < 1e-6
    print(f"max pairwise discrepancy: {max_pairwise:.3e}")
    print(f"max run-vs-oracle discrepancy: {max_vs_oracle:.3e}")
    return 0 if ok else 2


# -- train -------------------------------------------------------------------


def _build_net(spec: dict, seed: int):
    if "path" in spec:
        return load(spec["path"])
    if "layers" not in spec:
        raise ValueError("net config needs either 'path' or 'layers'")
    return make_layered(
        spec["layers"],
        hidden_activation=_activation(spec.get("hidden_activation", "relu")),
        output_activation=_activation(spec.get("output_activation", "identity")),
        bias=bool(spec.get("bias", True)),
        seed=int(spec.get("init_seed", seed)),
        bias_init=spec.get("bias_init", "zeros"),
    )


def _build_data(spec: dict):
    kind = spec.get("kind")
    if kind == "circles":
        data = make_concentric_circles(
            int(spec.get("n", 500)), float(spec.get("noise", 0.1)), int(spec.get("data_seed", 0))
        )
        frac = float(spec.get("test_fraction", 0.3))
        n_test = int(round(data.n_samples * frac))
        test = Dataset(data.inputs[:n_test], data.targets[:n_test], name="circles-test")
        train = Dataset(data.inputs[n_test:], data.targets[n_test:], name="circles-train")
        return train, test
    if kind == "csv":
        label = spec.get("label_column", "label")
        return load_csv(spec["train"], label), load_csv(spec["test"], label)
    if kind == "idx":
        return (
            load_idx(spec["train_images"], spec["train_labels"], name="train"),
            load_idx(spec["test_images"], spec["test_labels"], name="test"),
        )
    raise ValueError(f"unknown dataset kind {kind!r}")


def _train_config(spec: dict, balance_kind: str, seed: int) -> TrainConfig:
    bal = dict(spec.get("balance", {}))
    bal["kind"] = balance_kind
    bal_cost = bal.get("cost")
    mode = BalanceMode(
        kind=bal["kind"],
        tol=float(bal.get("tol", 1e-8)),
        cost=parse_cost(bal_cost) if bal_cost else None,
        allow_nonhomogeneous=bool(bal.get("allow_nonhomogeneous", False)),
    )
    cost = spec.get("cost")
    return TrainConfig(
        learning_rate=float(spec["learning_rate"]),
        batch_size=int(spec.get("batch_size", 16)),
        epochs=int(spec.get("epochs", 10)),
        loss=spec["loss"],
        cost=parse_cost(cost) if cost else None,
        balance=mode,
        seed=seed,
    )


def cmd_train(args) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        config = json.load(fh)
    out = _out_dir(args.out)
    seeds = config.get("seeds", [0])
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
    env = os.environ.get("BALANCEKIT_SEED")
    if env:
        seeds = [int(env)]
    arms = config.get("arms")
    if not arms:
        arms = [config.get("train", {}).get("balance", {}).get("kind", "none")]
    _manifest(out, "train", {"config": str(args.config), "seeds": seeds, "arms": arms})

    train_spec = config["train"]
    diverged = False
    per_arm_rows = {}
    for arm in arms:
        for seed in seeds:
            run_dir = _out_dir(out / arm / f"seed_{seed}")
            net = _build_net(config["net"], seed)
            train_data, test_data = _build_data(config["data"])
            cfg = _train_config(train_spec, arm, seed)
            note = ""
            try:
                final, rows = sgd_train(net, train_data, test_data, cfg)
            except TrainingDiverged as exc:
                rows = exc.metrics
                final = exc.network
                note = str(exc)
                diverged = True
            (run_dir / "metrics.csv").write_text(metrics_to_csv(rows), encoding="utf-8")
            save(final, run_dir / "network.json")
            _write_json(run_dir / "manifest.json", {
                "arm": arm, "seed": seed, "epochs_completed": rows[-1].epoch if rows else 0,
                "note": note,
            })
            per_arm_rows.setdefault(arm, []).append(rows)

    lines = [
        "arm,epoch,mean_train_loss,std_train_loss,mean_test_accuracy,std_test_accuracy,"
        "mean_deficit,std_deficit,mean_frobenius_norm,std_frobenius_norm"
    ]
    for arm in arms:
        runs = per_arm_rows[arm]
        depth = min(len(r) for r in runs)
        for k in range(depth):
            cols = []
            for attr in ("train_loss", "test_accuracy", "network_deficit", "frobenius_norm"):
                vals = np.array([getattr(r[k], attr) for r in runs])
                cols += [repr(float(vals.mean())), repr(float(vals.std()))]
            lines.append(f"{arm},{runs[0][k].epoch}," + ",".join(cols))
    (out / "aggregate.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 2 if diverged else 0


# -- approx ------------------------------------------------------------------


def _read_samples(path):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if lineno == 1 and any(c.strip().lower() in ("x", "y") for c in cells):
                continue
            if len(cells) < 2:
                raise ValueError(f"{path}: line {lineno}: need two columns x,y")
            try:
                rows.append((float(cells[0]), float(cells[1])))
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: non-numeric sample") from None
    if len(rows) < 2:
        raise ValueError(f"{path}: need at least two samples")
    return rows


def cmd_approx(args) -> int:
    samples = _read_samples(args.samples)
    if args.n is not None and len(samples) != args.n + 1:
        raise ValueError(f"expected N+1={args.n + 1} samples, file has {len(samples)}")
    net = construct_universal_approximator(samples, args.epsilon)
    out = _out_dir(args.out)
    save(net, out / "network.json")

    n_slices = len(samples) - 1
    xs = np.linspace(0.0, 1.0, args.grid)
    ys = np.array([float(forward(net, [x])[0]) for x in xs])
    knots_x = np.array([x for x, _ in samples])
    knots_y = np.array([y for _, y in samples])
    lin = np.interp(xs, knots_x, knots_y)
    report = {
        "n": n_slices,
        "epsilon": args.epsilon,
        "max_slice_jump": max_slice_jump(samples),
        "max_interpolation_error": float(np.max(np.abs(ys - lin))),
        "grid_points": int(args.grid),
    }
    _write_json(out / "report.json", report)
    _manifest(out, "approx", {
        "samples": str(args.samples), "epsilon": args.epsilon,
        "n": n_slices, "grid": int(args.grid),
    })
    print(f"max grid error vs interpolant: {report['max_interpolation_error']:.3e}")
    return 0


# -- argument plumbing -------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="balancekit")
    sub = top.add_subparsers(dest="command", required=True)

    b = sub.add_parser("balance", help="balance a network under a weight cost")
    b.add_argument("--net", required=True)
    b.add_argument("--cost", default="l2")
    b.add_argument("--schedule", default="stochastic")
    b.add_argument("--tol", type=float, default=1e-8)
    b.add_argument("--max-steps", type=int, default=100_000)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_balance)

    v = sub.add_parser("verify-uniqueness", help="many stochastic runs vs the convex oracle")
    v.add_argument("--net", required=True)
    v.add_argument("--cost", default="l2")
    v.add_argument("--n-schedules", type=int, default=10)
    v.add_argument("--tol", type=float, default=1e-16)
    v.add_argument("--max-steps", type=int, default=200_000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_verify_uniqueness)

    t = sub.add_parser("train", help="train per a JSON config, with seed sweeps")
    t.add_argument("--config", required=True)
    t.add_argument("--seeds", default="")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("approx", help="build the piecewise-linear interpolating network")
    a.add_argument("--samples", required=True)
    a.add_argument("--epsilon", type=float, required=True)
    a.add_argument("--n", type=int, default=None)
    a.add_argument("--grid", type=int, default=10_000)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_approx)
    return top


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
