"""Command-line entry point. Exit codes: 0 ok, 1 verification failed, 2 config error, 3 divergence."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .environment import SuiteConfig, generate_suite, save_suite
from .exceptions import ConfigError, NonFiniteLoss, SpecError
from .harness import (
    ExpertPolicy,
    RunConfig,
    ablate,
    build_environment,
    evaluate,
    load_checkpoint,
    load_eval_suite,
    pareto_sweep,
    train,
)
from .policy import Controller
from .runtime import emit_trace, read_traces, run_inference, verify_traces
from .training import TrainingConfig

log = logging.getLogger("supernet_sampler")

_NESTED = {"suite": SuiteConfig, "training": TrainingConfig}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _parse_value(text: str, default):
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if isinstance(default, tuple):
        items = [t for t in text.split(",") if t.strip()]
        kind = type(default[0]) if default else str
        return tuple(kind(t) for t in items)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return None if text.lower() == "none" else text


def _config_fields():
    """(dest, section, field name, default) for every overridable config value."""
    out = []
    for f in dataclasses.fields(RunConfig):
        if f.name in _NESTED:
            for g in dataclasses.fields(_NESTED[f.name]):
                out.append((g.name, f.name, g.name, getattr(_NESTED[f.name](), g.name)))
        else:
            default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            out.append((f.name, None, f.name, default))
    return out


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="RunConfig JSON file; flags override its values")
    grp = p.add_argument_group("config overrides")
    for dest, _, name, _ in _config_fields():
        grp.add_argument(_flag(name), dest="cfg_" + dest, default=None, metavar="VALUE")


def resolve_config(args) -> RunConfig:
    base = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    data = base.to_dict()
    try:
        for dest, section, name, default in _config_fields():
            raw = getattr(args, "cfg_" + dest, None)
            if raw is None:
                continue
            value = _parse_value(raw, default if default is not None else "")
            if section:
                data[section][name] = value
            else:
                data[name] = value
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig.from_dict(data)


def _controller(config, checkpoint):
    env = build_environment(config)
    ckpt = load_checkpoint(checkpoint, env.graph)
    return Controller(ckpt.params, env.graph), env


def cmd_gen_suite(args, config):
    suite = generate_suite(config.suite_seed, config.suite)
    save_suite(args.out, suite)
    print(f"wrote {len(suite)} instances to {args.out}")


def cmd_train(args, config):
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.json")
    result = train(config, out_dir=out, resume=args.resume)
    print(f"trained {len(result.rows)} steps; checkpoints in {out}")


def cmd_eval(args, config):
    env = build_environment(config)
    suite = load_eval_suite(config, args.suite)
    if args.expert:
        policy = ExpertPolicy()
    else:
        policy = Controller(load_checkpoint(args.checkpoint, env.graph).params, env.graph)
    rep = evaluate(policy, suite, env, alpha=config.eval_alpha, greedy=config.eval_greedy,
                   seed=config.eval_seed, lam=config.training.lam, out_dir=config.output_dir,
                   header=config.header())
    print(json.dumps(rep.metrics, indent=2, sort_keys=True))


def cmd_infer(args, config):
    controller, env = _controller(config, args.checkpoint)
    suite = load_eval_suite(config, args.suite)
    chosen = suite[args.start:args.start + args.n]
    meta = {"seed": args.seed, "lambda": config.training.lam, "checkpoint": str(args.checkpoint)}
    if args.trace:
        Path(args.trace).write_text("")
    for i, inst in enumerate(chosen):
        rng = np.random.default_rng([args.seed, i])
        res = run_inference(controller, inst, env, rng=rng, alpha=config.eval_alpha,
                            greedy=args.greedy, meta=meta)
        if args.trace:
            emit_trace(res, args.trace)
        print(json.dumps({"uid": inst.uid, "answer": res.answer,
                          "workflow": [s.action.name for s in res.trajectory.steps]}, sort_keys=True))


def cmd_trace_verify(args, config):
    controller, _ = _controller(config, args.checkpoint)
    report = verify_traces(read_traces(args.traces), controller, tol=args.tol)
    print(f"traces={report.n_traces} steps={report.n_steps} "
          f"max_abs_error={report.max_abs_error:.3e} failures={len(report.failures)}")
    for f in report.failures[:20]:
        print("FAIL", *f)
    return 0 if report.ok else 1


def cmd_sweep(args, config):
    points = pareto_sweep(config, mode=args.mode, out_dir=config.output_dir)
    for p in points:
        print(f"lambda={p.lam:g} cost={p.mean_normalized_cost:.4f} acc={p.accuracy:.3f} "
              f"utility={p.mean_utility:.4f} seeds={p.n_seeds}")


def cmd_ablate(args, config):
    variants = args.variants.split(",") if args.variants else None
    kw = {"variants": variants} if variants else {}
    report = ablate(config, out_dir=config.output_dir, **kw)
    for r in report.rows:
        print(f"{r['config']:>14} acc={r['accuracy']:.3f} cost={r['mean_cost']:.4f} "
              f"dcost={r['delta_cost']:+.1f}%")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="supernet-sampler", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-suite", help="write a synthetic suite as JSON lines")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_suite)

    p = sub.add_parser("train", help="run the three-phase curriculum")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or the expert) on a suite")
    p.add_argument("--checkpoint")
    p.add_argument("--suite", help="suite JSONL; default is the held-out split")
    p.add_argument("--expert", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="sample workflows and optionally write audit traces")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--suite")
    p.add_argument("--start", type=int, default=0)
    p.add_argument("-n", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--trace")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("trace-verify", help="replay traces against a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("--tol", type=float, default=1e-9)
    p.set_defaults(func=cmd_trace_verify)

    p = sub.add_parser("sweep", help="lambda sweep and frontier CSV")
    p.add_argument("--mode", choices=("refit", "full"))
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="ablation table")
    p.add_argument("--variants", help="comma-separated subset of the ablations")
    p.set_defaults(func=cmd_ablate)

    for name, sp in sub.choices.items():
        _add_config_flags(sp)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        if args.command in ("eval",) and not args.expert and not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --expert")
        rc = args.func(args, config)
    except (ConfigError, SpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteLoss as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
