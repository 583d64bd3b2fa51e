"""Command-line entry point ``falsim``.

Subcommands: ``run``, ``sweep``, ``stability`` and ``check-width``. Exit
status is 0 on success, 2 on invalid configuration and 3 on runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, from_dict, parse_config
from .experiment import SWEEP_KEYS, parse_values, run_experiment, run_stability, run_sweep
from .models import ModelSpec, check_width_condition, compute_constants

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

# flag name -> dotted config key
FLAG_KEYS = {
    "rho": "attack.rho",
    "skew": "data.a",
    "clients": "data.m",
    "rounds": "training.T",
    "algo": "algo",
    "smoothing": "smoothing.method",
    "q": "smoothing.Q",
    "gamma": "smoothing.gamma",
    "aggregator": "aggregation.rule",
    "m_hat": "aggregation.m_hat",
    "out": "out",
}


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", help="JSON config file (defaults apply when omitted)")
    src.add_argument("--manifest", help="rerun exactly from a run directory's manifest.json")
    p.add_argument("--rho", type=float)
    p.add_argument("--skew", type=float, help="label-skew share a (percent per foreign shard)")
    p.add_argument("--clients", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--algo", choices=["vfal", "sfal"])
    p.add_argument("--smoothing", choices=["ssa", "rsa", "opsa"])
    p.add_argument("--q", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--aggregator", choices=["uniform", "alpha_slack", "tv_weighted", "tv_inverse"])
    p.add_argument("--m-hat", dest="m_hat", type=int)
    p.add_argument("--seeds", type=_seeds)
    p.add_argument("--out")
    p.add_argument("--dry-run", action="store_true", help="validate and echo the config, then stop")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="falsim", description="Federated adversarial learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("run", help="train every seed of one configuration"))
    p = sub.add_parser("sweep", help="run one configuration per value of a swept key")
    _common(p)
    p.add_argument("--vary", required=True, help="KEY=v1,v2,... with KEY in "
                   + ", ".join(SWEEP_KEYS) + " or a dotted config key")
    p = sub.add_parser("stability", help="estimate on-average stability with coupled runs")
    _common(p)
    p.add_argument("--client", type=int, default=0)
    p.add_argument("--indices", type=int, default=3, help="number of sample positions J")
    p.add_argument("--resamples", type=int, default=3, help="replacements R per position")
    p.add_argument("--no-replace", action="store_true", help="null test: keep the original sample")
    _common(sub.add_parser("check-width", help="evaluate the shallow-net width condition"))
    return parser


def config_from_args(args) -> ExperimentConfig:
    if args.manifest:
        try:
            raw = json.loads(Path(args.manifest).read_text())["config"]
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read manifest {args.manifest}: {exc}") from exc
        cfg = from_dict(raw)
    else:
        cfg = parse_config(args.config)
    over = {key: getattr(args, flag) for flag, key in FLAG_KEYS.items() if getattr(args, flag) is not None}
    if args.seeds is not None:
        over["seeds"] = args.seeds
    return cfg.with_overrides(**over) if over else cfg


def width_report(cfg: ExperimentConfig) -> dict:
    th = cfg.theory
    eta, T, K = cfg.training.eta0, cfg.training.T, cfg.training.K
    spec = ModelSpec("shallow_net", cfg.data.dim, width=th.width, activation=cfg.model.activation)
    consts = compute_constants(spec, cfg.attack.rho, K, eta, th.C_0, th.C_x, th.C_y, th.C_W)
    check = check_width_condition(consts, th.width, eta, T, K)
    return {"s": th.width, "required_s": check.required_s, "satisfied": check.satisfied,
            "zeta_theta": consts.zeta_theta, "zeta_x": consts.zeta_x, "b_prime": consts.b_prime,
            "H_K": consts.H_K, "eta": eta, "T": T, "K": K, "rho": cfg.attack.rho}


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=float))


def dispatch(args) -> int:
    cfg = config_from_args(args)
    if args.dry_run:
        print(cfg.to_json())
        return EXIT_OK
    if args.command == "run":
        summary = run_experiment(cfg)
        _print_json({"out": cfg.out, "final_acc_gap": summary["final_acc_gap"]})
    elif args.command == "sweep":
        key, _, values = args.vary.partition("=")
        if not values:
            raise ConfigError("--vary expects KEY=v1,v2,...")
        vals = parse_values(values)
        for v in vals:  # validate every point before training any
            cfg.with_overrides(**{SWEEP_KEYS.get(key, key): v})
        print(run_sweep(cfg, key, vals), end="")
    elif args.command == "stability":
        if not 0 <= args.client < cfg.data.m:
            raise ConfigError(f"--client {args.client} out of range for m={cfg.data.m}")
        if args.indices < 1 or args.resamples < 1:
            raise ConfigError("--indices and --resamples must be >= 1")
        est = run_stability(cfg, args.client, args.indices, args.resamples, replace=not args.no_replace)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stability.json").write_text(json.dumps(est.to_dict(), indent=2, sort_keys=True) + "\n")
        _print_json({"epsilon_hat": est.epsilon_hat, "per_index": est.to_dict()["per_index"]})
    elif args.command == "check-width":
        _print_json(width_report(cfg))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return dispatch(args)
    except ConfigError as exc:
        print(f"falsim: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surfaced as exit status 3
        print(f"falsim: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
