"""Command-line interface.

Subcommands: count-params, train, analyze, bench, gradcheck. Exit codes are
stable for scripting: 0 success, 1 usage or configuration error, 2 numeric
error (singular matrices, non-finite losses, failed gradient checks).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import adapters, analysis, matcore, model, trainer
from .config import ConfigError, ExperimentConfig, load_config

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2

GRADCHECK_MAX_D = 16
GRADCHECK_MAX_LAYERS = 2
GRADCHECK_TOL = 1e-4

PAPER_DIMS = {"d_model": 768, "rank": 8, "modules": ("query", "value"), "n_layers": 12}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p: _Parser) -> None:
    p.add_argument("--config", help="experiment config file (key = value lines)")
    p.add_argument("--seed-model", type=int, dest="seed_model")
    p.add_argument("--seed-adapter", type=int, dest="seed_adapter")
    p.add_argument("--seed-data", type=int, dest="seed_data")
    p.add_argument("--out", help="output directory")


def build_parser() -> _Parser:
    parser = _Parser(prog="loralab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("count-params", parents=[], help="trainable-parameter table")
    _add_common(p)
    p.add_argument("--paper-dims", action="store_true",
                   help="use d=768, r=8, modules {query,value}, 12 layers")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("train", help="train one adapter and write its checkpoint")
    _add_common(p)
    p.add_argument("--method", choices=adapters.METHODS)
    p.add_argument("--task", choices=("teacher", "parity"))
    p.add_argument("--max-steps", type=int, dest="max_steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze", help="conversion-matrix grids and adapter comparison")
    _add_common(p)
    p.add_argument("--model", required=True, dest="model_ckpt", help="model checkpoint")
    p.add_argument("--adapter", required=True, action="append", dest="adapter_ckpts",
                   help="adapter checkpoint (repeat to compare two methods)")
    p.add_argument("--side", choices=analysis.SIDES, default="left")
    p.add_argument("--i", type=int, dest="i_vectors")
    p.add_argument("--j", type=int, dest="j_vectors")
    p.add_argument("--pseudoinverse", action="store_true",
                   help="allow SVD pseudoinverse for ill-conditioned projections")
    p.add_argument("--baseline-seed", type=int, default=0)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench", help="training throughput for both methods")
    _add_common(p)
    p.add_argument("--seconds", type=float, default=2.0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_common(p)
    p.add_argument("--method", choices=adapters.METHODS + ("both",), default="both")
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--perturb", action="store_true",
                   help="corrupt one analytic gradient entry (negative control)")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def _load_experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    overrides = (
        ("method", "method"),
        ("task", "task"),
        ("max_steps", "max_steps"),
        ("seed_model", "seed_model"),
        ("seed_adapter", "seed_adapter"),
        ("seed_data", "seed_data"),
        ("out", "output_dir"),
    )
    for attr, field_name in overrides:
        value = getattr(args, attr, None)
        if value is not None:
            setattr(cfg, field_name, value)
    return cfg


def cmd_count_params(args) -> int:
    cfg = _load_experiment(args)
    if args.paper_dims:
        d = PAPER_DIMS["d_model"]
        layers = tuple(range(1, PAPER_DIMS["n_layers"] + 1))
        lora_spec = adapters.AdapterSpec("lora", PAPER_DIMS["rank"], float(PAPER_DIMS["rank"]),
                                         PAPER_DIMS["modules"], layers)
    else:
        d = cfg.d_model
        lora_spec = cfg.adapter_spec("lora")
    cond_spec = adapters.as_method(lora_spec, "condlora")
    lora_count = adapters.count_trainable(lora_spec, d)
    cond_count = adapters.count_trainable(cond_spec, d)
    print(f"lora {lora_count}")
    print(f"condlora {cond_count}")
    print(f"ratio {lora_count // cond_count}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_experiment(args)
    weights = model.build_model(cfg.model_config())
    task = cfg.make_task(weights)
    spec = cfg.adapter_spec()
    train_cfg = cfg.train_config()
    params, report = trainer.train_run(weights, spec, task, train_cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.save_model(out / "model.ckpt", weights)
    adapters.save_adapter(out / "adapter.ckpt", params, spec)
    with open(out / "report.csv", "w") as fh:
        trainer.write_report(fh, report)
    summary = {
        "method": spec.method,
        "task": cfg.task,
        "max_steps": cfg.max_steps,
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
        "examples_per_second": report.examples_per_second,
        "trainable_params": report.trainable_param_count,
        "wall_clock_seconds": report.wall_clock_seconds,
        "seeds": {"model": cfg.seed_model, "adapter": cfg.seed_adapter, "data": cfg.seed_data},
    }
    with open(out / "run.json", "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(
        f"{spec.method}: params={report.trainable_param_count} "
        f"initial_loss={report.initial_loss:.6g} final_loss={report.final_loss:.6g} "
        f"examples/s={report.examples_per_second:.3f}"
    )
    return EXIT_OK


def cmd_analyze(args) -> int:
    weights = model.load_model(args.model_ckpt)
    loaded = [adapters.load_adapter(path) for path in args.adapter_ckpts]
    if len(loaded) > 2:
        raise UsageError("at most two adapter checkpoints are supported")
    params, spec = loaded[0]
    spec.validate_for(weights.config)
    i = args.i_vectors or spec.rank
    j = args.j_vectors or spec.rank
    out = Path(args.out or "analysis")
    out.mkdir(parents=True, exist_ok=True)

    for module in spec.target_modules:
        for which in ("A", "B"):
            grid = analysis.conversion_grid(
                weights, params, spec, module, which,
                i=i, j=j, side=args.side, pseudoinverse=args.pseudoinverse,
            )
            path = out / f"conv_{which}_{module}.csv"
            with open(path, "w") as fh:
                analysis.write_grid_csv(fh, grid)
            print(f"conv_{which} {module} avg_offdiag={grid.average_offdiagonal:.6f}")

    d = weights.config.d_model
    baseline = analysis.random_baseline_grid(
        d, spec.rank, len(spec.target_layers), i, j, side=args.side, seed=args.baseline_seed
    )
    with open(out / "random_baseline.csv", "w") as fh:
        analysis.write_grid_csv(fh, baseline)
    print(f"random_baseline avg_offdiag={baseline.average_offdiagonal:.6f}")

    if len(loaded) == 2:
        by_method = {s.method: (p, s) for p, s in loaded}
        if set(by_method) != {"lora", "condlora"}:
            raise UsageError("comparison needs one lora and one condlora checkpoint")
        lora_params, lora_spec = by_method["lora"]
        cond_params, cond_spec = by_method["condlora"]
        if (lora_spec.rank, lora_spec.target_modules, lora_spec.target_layers) != (
            cond_spec.rank, cond_spec.target_modules, cond_spec.target_layers
        ):
            raise UsageError("adapter checkpoints target different shapes; cannot compare")
        rows = analysis.compare_lora_condlora(lora_params, cond_params, weights, lora_spec)
        with open(out / "comparison.csv", "w") as fh:
            analysis.write_comparison_csv(fh, rows)
        mean_delta = float(np.mean([r.phi_delta for r in rows]))
        print(f"comparison rows={len(rows)} mean_phi_dW={mean_delta:.6f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.seconds < 1:
        raise UsageError(f"--seconds must be >= 1, got {args.seconds}")
    cfg = _load_experiment(args)
    weights = model.build_model(cfg.model_config())
    task = cfg.make_task(weights)
    for method in adapters.METHODS:
        spec = cfg.adapter_spec(method)
        train_cfg = trainer.TrainConfig(
            learning_rate=cfg.train_config(method).learning_rate,
            max_steps=1_000_000,
            batch_size=cfg.batch_size,
            seed=cfg.seed_adapter,
            loss_kind=cfg.resolved_loss_kind(),
        )
        rate = trainer.bench_throughput(weights, spec, task, args.seconds, train_cfg)
        print(f"{method} {rate:.3f} examples/s")
    return EXIT_OK


def _gradcheck_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = _load_experiment(args)
    else:
        cfg = ExperimentConfig(
            n_layers=2, d_model=16, n_heads=4, d_ff=32, vocab_size=32,
            max_len=16, n_outputs=4, rank=2, seq_len=8, task="teacher",
        )
        for attr, field_name in (("seed_model", "seed_model"), ("seed_adapter", "seed_adapter"),
                                 ("seed_data", "seed_data")):
            value = getattr(args, attr, None)
            if value is not None:
                setattr(cfg, field_name, value)
    if cfg.d_model > GRADCHECK_MAX_D or cfg.n_layers > GRADCHECK_MAX_LAYERS:
        raise UsageError(
            f"gradcheck is limited to d_model <= {GRADCHECK_MAX_D} and "
            f"n_layers <= {GRADCHECK_MAX_LAYERS}, got d={cfg.d_model}, N={cfg.n_layers}"
        )
    return cfg


def cmd_gradcheck(args) -> int:
    cfg = _gradcheck_config(args)
    if args.trials < 1:
        raise UsageError(f"--trials must be >= 1, got {args.trials}")
    weights = model.build_model(cfg.model_config())
    loss_kind = cfg.resolved_loss_kind()
    methods = adapters.METHODS if args.method == "both" else (args.method,)
    worst = 0.0
    for method in methods:
        spec = cfg.adapter_spec(method)
        for trial in range(args.trials):
            task = cfg.make_task(weights)
            params = trainer.generic_params(spec, cfg.d_model, cfg.seed_adapter + trial)
            batch = task.batch(f"gradcheck.{trial}", 4)
            _, grads = trainer.loss_and_grads(weights, params, spec, batch, loss_kind)
            if args.perturb:
                first = next(iter(grads))
                grads[first] = grads[first].copy()
                grads[first].flat[0] += 1.0 + abs(grads[first]).max()
            fd = trainer.fd_gradients(weights, params, spec, batch, loss_kind)
            errors = trainer.gradient_errors(grads, fd)
            for key, err in errors.items():
                print(f"{method} trial={trial} {key} rel_err={err:.3e}")
                worst = max(worst, err)
    status = "PASS" if worst < GRADCHECK_TOL else "FAIL"
    print(f"gradcheck {status}: max rel_err {worst:.3e} (tolerance {GRADCHECK_TOL:g})")
    return EXIT_OK if worst < GRADCHECK_TOL else EXIT_NUMERIC


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except matcore.NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, LookupError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
