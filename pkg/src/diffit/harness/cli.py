"""Command-line entry point: ``diffit <subcommand> [flags]``.

Failures print a single line ``error: <kind>: <message>`` on stderr and exit
non-zero (2 for usage errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..blocks import count_params
from ..checkpoint import CheckpointError, load_checkpoint
from ..diffusion import NoiseSchedule, SamplerConfig, sample_network
from ..networks import PRESETS, ConfigError, build_network, config_from_dict
from ..tensor import Rng
from ..tensor.core import ContractError, NumericError
from .attn import attn_dump
from .config import RunConfig
from .flops import flops
from .images import save_samples
from .oracles import run_oracles
from .train import TrainingAborted, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _threads() -> int | None:
    raw = os.environ.get("DIFFIT_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"DIFFIT_THREADS must be a positive integer, got {raw!r}")
    return n


def _load_model_config(args):
    if args.preset:
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
        return PRESETS[args.preset]()
    if not args.config:
        raise UsageError("one of --config or --preset is required")
    try:
        doc = json.loads(Path(args.config).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {args.config}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {args.config}: {e}") from None
    if isinstance(doc, dict) and "family" in doc:
        return config_from_dict(doc)
    return RunConfig.from_dict(doc).model


def _sampler(args) -> SamplerConfig:
    return SamplerConfig(kind=args.sampler, steps=args.steps, guidance_scale=args.guidance, seed=args.seed,
                         beta=args.beta)


def _network_from(args):
    """(network, schedule) from --ckpt, or an untrained net from --config."""
    if args.ckpt:
        ck = load_checkpoint(args.ckpt)
        if getattr(args, "ema", False):
            if not ck.ema:
                raise ContractError("checkpoint has no EMA weights")
            ck.network.load_state_dict(ck.ema)
        sched = NoiseSchedule(**ck.meta["schedule"]) if "schedule" in ck.meta else NoiseSchedule()
        return ck.network, sched
    if args.config:
        run = RunConfig.load(args.config)
        return build_network(run.model, Rng(run.seed).spawn(2)), run.schedule
    raise UsageError("one of --ckpt or --config is required")


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> dict:
    cfg = RunConfig.load(args.config)
    if args.steps is not None:
        cfg = cfg.with_(optimizer=cfg.optimizer.__class__(**{**asdict(cfg.optimizer), "steps": args.steps}))
    out = args.out or cfg.output_dir
    res = train(cfg, out)
    return {"checkpoint": str(res.checkpoint), "loss_csv": str(res.loss_csv), "steps": len(res.log),
            "final_loss": res.log[-1][1], "final_ema_loss": res.log[-1][2]}


def cmd_sample(args) -> dict:
    net, sched = _network_from(args)
    label = None if args.label is None else np.full(args.n, args.label)
    x = sample_network(net, args.n, sched, _sampler(args), label=label)
    out = Path(args.out or Path(args.ckpt or ".").parent / "samples")
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "samples.npy", x.astype(np.float32))
    files = save_samples(out, np.clip(x, -1, 1))
    return {"out": str(out), "n": args.n, "files": len(files)}


def cmd_attn_dump(args) -> dict:
    net, sched = _network_from(args)
    trace = attn_dump(net, sched, _sampler(args), args.layer, args.out, label=args.label)
    return {"out": args.out, "layer": args.layer, "steps": trace.steps}


def cmd_count_params(args) -> dict:
    cfg = _load_model_config(args)
    table = count_params(build_network(cfg, meta=True), depth=args.depth)
    return dict(table)


def cmd_flops(args) -> dict:
    return dict(flops(_load_model_config(args)))


def cmd_oracle_check(args) -> dict:
    report = run_oracles(seed=args.seed, draws=args.draws)
    if not report["passed"]:
        raise _Failed(report)
    return report


class _Failed(Exception):
    def __init__(self, payload):
        super().__init__("oracle check failed")
        self.payload = payload


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="diffit", description="Time-dependent attention diffusion models on toy data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--steps", type=int)
    t.set_defaults(fn=cmd_train)

    def sampling_flags(sp):
        sp.add_argument("--ckpt")
        sp.add_argument("--config", help="run config for an untrained network (instead of --ckpt)")
        sp.add_argument("--sampler", default="heun_ode", choices=["heun_ode", "euler_ode", "sde", "ddpm"])
        sp.add_argument("--steps", type=int, default=18)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--guidance", type=float, default=1.0)
        sp.add_argument("--beta", type=float)
        sp.add_argument("--label", type=int)
        sp.add_argument("--out")

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    sampling_flags(s)
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--ema", action="store_true", help="use the EMA weights")
    s.set_defaults(fn=cmd_sample)

    a = sub.add_parser("attn-dump", help="centre-token attention maps along a sampling run")
    sampling_flags(a)
    a.add_argument("--layer", type=int, default=0)
    a.set_defaults(fn=cmd_attn_dump)

    for name, fn in (("count-params", cmd_count_params), ("flops", cmd_flops)):
        c = sub.add_parser(name)
        c.add_argument("--config")
        c.add_argument("--preset")
        if name == "count-params":
            c.add_argument("--depth", type=int, default=1)
        c.set_defaults(fn=fn)

    o = sub.add_parser("oracle-check", help="closed-form sampler oracles")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--draws", type=int, default=10000)
    o.set_defaults(fn=cmd_oracle_check)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    print(f"error: {kind}: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command in ("sample", "attn-dump") and args.ckpt and args.config:
            raise UsageError("give --ckpt or --config, not both")
        n = _threads()
        if n is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=n):
                result = args.fn(args)
        else:
            result = args.fn(args)
    except UsageError as e:
        return _fail("usage", e, 2)
    except _Failed as e:
        print(json.dumps(e.payload, default=float))
        return _fail("oracle", "one or more oracle checks failed", 1)
    except CheckpointError as e:
        return _fail("checkpoint", e, 1)
    except ConfigError as e:
        return _fail("config", e, 1)
    except TrainingAborted as e:
        return _fail("numeric", f"{e}; last good checkpoint: {e.checkpoint}", 1)
    except (ContractError, NumericError) as e:
        return _fail("invariant", e, 1)
    except OSError as e:
        return _fail("io", e, 1)
    print(json.dumps(result, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
