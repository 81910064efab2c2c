"""Command-line entry point.

Commands: gen-data, train, evaluate, count-ops, gate-analyze, grad-check.
Exit codes: 0 success, 1 validation error (bad arguments, config, missing
inputs), 2 runtime failure (divergence, corrupt files, failed checks). Every
command that takes --out persists the effective post-override config and the
seed before doing any work, so a run can be reproduced from its output
directory alone.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from srtg import checks, config, data, opcount, train as training
from srtg.blocks import Network
from srtg.config import ConfigError
from srtg.data import DatasetFormatError, load_dataset, save_dataset
from srtg.tensor import ShapeError
from srtg.train import (
    CheckpointError,
    SGD,
    TrainingDivergedError,
    apply_checkpoint,
    checkpoint_load,
    evaluate,
)

_VALIDATION_ERRORS = (ConfigError, FileNotFoundError, NotADirectoryError)
_RUNTIME_ERRORS = (
    CheckpointError,
    DatasetFormatError,
    TrainingDivergedError,
    ShapeError,
    ValueError,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _ensure_out(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {path}: {e}") from e
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {path} is not writable")
    return path


def _load_cfg(args, seed_section=None):
    """Read config, apply --set overrides and the --seed shorthand."""
    cfg = config.read_config(args.config)
    config.apply_overrides(cfg, args.set or [])
    if seed_section and getattr(args, "seed", None) is not None:
        cfg.setdefault(seed_section, {})["seed"] = str(args.seed)
    return cfg


def _persist(cfg, out_dir):
    config.write_config(cfg, os.path.join(out_dir, "effective.cfg"))


def _emit(payload, out_dir, filename):
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out_dir is not None:
        with open(os.path.join(out_dir, filename), "w") as fh:
            fh.write(text + "\n")
    print(text)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _cmd_gen_data(args):
    cfg = _load_cfg(args, seed_section="synthetic")
    spec = config.synthetic_spec(cfg)
    out = _ensure_out(args.out)
    _persist(cfg, out)
    train_ds, val_ds = data.generate(spec)
    save_dataset(os.path.join(out, "train.bin"), train_ds)
    save_dataset(os.path.join(out, "val.bin"), val_ds)
    _emit(
        {
            "train": {"path": "train.bin", "clips": len(train_ds)},
            "val": {"path": "val.bin", "clips": len(val_ds)},
            "seed": spec.seed,
            "family": spec.family,
        },
        out,
        "gen_data.json",
    )
    return 0


def _cmd_train(args):
    cfg = _load_cfg(args, seed_section="train")
    net_spec = config.network_spec(cfg)
    train_cfg = config.train_config(cfg)
    train_path, val_path = config.data_paths(cfg)
    out = _ensure_out(args.out)
    _persist(cfg, out)
    train_ds = load_dataset(train_path)
    val_ds = load_dataset(val_path)
    net = Network(net_spec, seed=train_cfg.seed)
    optimizer = SGD(net.named_params(), train_cfg.momentum, train_cfg.weight_decay)
    start_epoch = 0
    if args.resume:
        state = checkpoint_load(args.resume)
        apply_checkpoint(net, optimizer, state)
        start_epoch = state["epoch"]
    net_sections = {
        s: dict(cfg[s]) for s in cfg if s == "network" or s.startswith("stage")
    }
    _, history = training.train(
        net,
        train_ds,
        val_ds,
        train_cfg,
        metrics_path=os.path.join(out, "metrics.csv"),
        checkpoint_path=os.path.join(out, "checkpoint.bin"),
        start_epoch=start_epoch,
        optimizer=optimizer,
        stop_after=args.stop_after,
        net_config=net_sections,
    )
    final = history[-1] if history else {}
    _emit({"epochs_run": len(history), "final": final, "seed": train_cfg.seed},
          out, "train_result.json")
    return 0


def _net_from_checkpoint(args):
    """Rebuild the network named by --config or, failing that, by the network
    sections embedded in the checkpoint header."""
    state = checkpoint_load(args.checkpoint)
    if args.config:
        cfg = _load_cfg(args)
    elif state["net_config"]:
        cfg = config.apply_overrides(dict(state["net_config"]), args.set or [])
    else:
        raise ConfigError(
            "checkpoint predates embedded network configs; pass --config"
        )
    net = Network(config.network_spec(cfg), seed=0)
    apply_checkpoint(net, None, state)
    return net, cfg


def _cmd_evaluate(args):
    net, cfg = _net_from_checkpoint(args)
    out = _ensure_out(args.out) if args.out else None
    if out:
        _persist(cfg, out)
    ds = load_dataset(args.data)
    metrics = evaluate(net, ds)
    _emit(
        {
            "top1": metrics.top1,
            "top5": metrics.top5,
            "loss": metrics.loss,
            "gate_open_rates": metrics.gate_open_rates,
            "clips": len(ds),
        },
        out,
        "eval.json",
    )
    return 0


def _cmd_count_ops(args):
    cfg = config.read_config(args.net)
    config.apply_overrides(cfg, args.set or [])
    net_spec = config.network_spec(cfg)
    input_shape = config.parse_shape(args.input)
    out = _ensure_out(args.out) if args.out else None
    if out:
        _persist(cfg, out)
    counts = opcount.count_macs(net_spec, input_shape)
    report = opcount.report_dict(counts, input_shape, units=args.units)
    _emit(report, out, "opcount.json")
    return 0


def _cmd_gate_analyze(args):
    net, cfg = _net_from_checkpoint(args)
    out = _ensure_out(args.out) if args.out else None
    if out:
        _persist(cfg, out)
    ds = load_dataset(args.data)

    records = []
    open_counts: dict[str, list[int]] = {}
    from srtg.tensor import no_grad

    with no_grad():
        for start in range(0, len(ds), args.batch_size):
            idx = np.arange(start, min(start + args.batch_size, len(ds)))
            _, gate_log = net.forward(ds.clips[idx], training=False)
            for layer, decisions in gate_log:
                for pos, decision in enumerate(decisions):
                    records.append(decision.to_record(layer, int(idx[pos])))
                    acc = open_counts.setdefault(layer, [0, 0])
                    acc[0] += 1 if decision.fused else 0
                    acc[1] += 1
    lines = "\n".join(json.dumps(r, sort_keys=True) for r in records)
    if out:
        with open(os.path.join(out, "gates.jsonl"), "w") as fh:
            fh.write(lines + "\n")
    else:
        print(lines)
    summary = {layer: n_open / n for layer, (n_open, n) in sorted(open_counts.items())}
    _emit({"open_rates": summary, "clips": len(ds)}, out, "gate_summary.json")
    return 0


def _cmd_grad_check(args):
    targets = args.target or None
    results = checks.run_checks(targets)
    failed = {
        name: err
        for name, err in results.items()
        if err > checks.CHECK_TOLERANCES[name]
    }
    payload = {
        "errors": results,
        "tolerances": {k: checks.CHECK_TOLERANCES[k] for k in results},
        "passed": not failed,
    }
    out = _ensure_out(args.out) if args.out else None
    _emit(payload, out, "grad_check.json")
    return 0 if not failed else 2


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------


def _build_parser():
    parser = _Parser(prog="srtg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="config override (repeatable)")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    common(p)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a network")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--stop-after", type=int, default=None,
                   help="halt after this epoch (simulated interruption)")
    common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    p.add_argument("--config", default=None,
                   help="network config (default: the one embedded in the checkpoint)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    common(p, out_required=False)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("count-ops", help="analytic MAC/GFLOP report for a spec")
    p.add_argument("--net", required=True, help="network config")
    p.add_argument("--input", required=True, metavar="CxTxHxW")
    p.add_argument("--units", choices=("macs", "gflops"), default="macs")
    common(p, out_required=False)
    p.set_defaults(func=_cmd_count_ops)

    p = sub.add_parser("gate-analyze", help="dump per-clip gate decisions")
    p.add_argument("--config", default=None,
                   help="network config (default: the one embedded in the checkpoint)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--batch-size", type=int, default=16)
    common(p, out_required=False)
    p.set_defaults(func=_cmd_gate_analyze)

    p = sub.add_parser("grad-check", help="finite-difference gradient checks")
    p.add_argument("--target", action="append",
                   choices=sorted(checks.CHECK_TOLERANCES),
                   help="check to run (repeatable; default all)")
    common(p, out_required=False)
    p.set_defaults(func=_cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except _RUNTIME_ERRORS as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
