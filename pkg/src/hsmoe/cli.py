"""Operator surface: ``hsmoe {describe,gradcheck,bench,train,eval}``.

Configuration comes from an optional ``key = value`` file (dotted keys,
unknown keys rejected), environment overrides HSMOE_SEED / HSMOE_THREADS,
then command-line flags, in increasing precedence. Exit codes: 0 success,
1 validation error, 2 runtime/numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import bench as bench_mod
from .checkpoint import CheckpointError, load_into, save_checkpoint
from .config import ConfigError, NetworkConfig, PRESETS, TrainConfig, make_network_config
from .metrics import (EmptyMaskError, MetricError, dsc_per_class, hd95, mdsc,
                      summarize, write_metrics_csv, write_metrics_json)
from .network import SegNet, manifest_parameter_count
from .tensor import NumericalError, Tensor
from .train import TrainingDiverged, synth_volumes, train_loop
from .volio import VolumeIOError, read_volume, write_volume

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


@dataclass
class DataConfig:
    num_volumes: int = 8
    size: int = 16
    noise_sigma: float = 0.03


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    precision: str = "f64"
    preset: str = "tiny"
    num_classes: int = 3
    norm: str = "dyt"
    network_overrides: Dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def network(self) -> NetworkConfig:
        if self.network_overrides:
            kwargs = dict(num_classes=self.num_classes, norm=self.norm)
            kwargs.update(self.network_overrides)
            return make_network_config(**kwargs)
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        return PRESETS[self.preset](num_classes=self.num_classes, norm=self.norm)


_SCALAR_KEYS = {
    "seed": ("seed", int),
    "threads": ("threads", int),
    "precision": ("precision", str),
    "network.preset": ("preset", str),
    "network.num_classes": ("num_classes", int),
    "network.norm": ("norm", str),
    "train.lr": ("train.lr", float),
    "train.weight_decay": ("train.weight_decay", float),
    "train.batch_size": ("train.batch_size", int),
    "train.steps": ("train.steps", int),
    "train.cosine": ("train.cosine_schedule", bool),
    "train.checkpoint_every": ("train.checkpoint_every", int),
    "data.num_volumes": ("data.num_volumes", int),
    "data.size": ("data.size", int),
    "data.noise_sigma": ("data.noise_sigma", float),
}

_NETWORK_OVERRIDE_KEYS = {
    "network.stem_channels": ("stem_channels", int),
    "network.experts": ("experts", "int_list"),
    "network.experts_l2": ("experts_l2", "int_list"),
    "network.base_group_size": ("base_group_size", int),
    "network.group_ratio": ("group_ratio", float),
    "network.slots_per_expert": ("slots_per_expert", int),
    "network.layers_per_stage": ("layers_per_stage", "int_list"),
    "network.ssm_state_dim": ("ssm_state_dim", int),
    "network.scan_block_size": ("scan_block_size", int),
    "network.ffn_ratio": ("ffn_ratio", int),
    "network.in_channels": ("in_channels", int),
}


def _convert(raw: str, kind) -> object:
    raw = raw.strip()
    if kind is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if kind == "int_list":
        if not (raw.startswith("[") and raw.endswith("]")):
            raise ConfigError(f"expected a list like [2,3,4], got {raw!r}")
        return tuple(int(v) for v in raw[1:-1].split(",") if v.strip())
    try:
        return kind(raw)
    except ValueError as err:
        raise ConfigError(f"bad value {raw!r}: {err}") from err


def parse_config_file(path: str) -> Dict[str, object]:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    values: Dict[str, object] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
            key, raw = (part.strip() for part in stripped.split("=", 1))
            if key in _SCALAR_KEYS:
                _, kind = _SCALAR_KEYS[key]
            elif key in _NETWORK_OVERRIDE_KEYS:
                _, kind = _NETWORK_OVERRIDE_KEYS[key]
            else:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _convert(raw, kind)
    return values


def build_run_config(config_path: Optional[str]) -> RunConfig:
    run = RunConfig()
    values = parse_config_file(config_path) if config_path else {}
    for key, value in values.items():
        if key in _NETWORK_OVERRIDE_KEYS:
            run.network_overrides[_NETWORK_OVERRIDE_KEYS[key][0]] = value
            continue
        target, _ = _SCALAR_KEYS[key]
        if target.startswith("train."):
            setattr(run.train, target.split(".", 1)[1], value)
        elif target.startswith("data."):
            setattr(run.data, target.split(".", 1)[1], value)
        else:
            setattr(run, target, value)
    if "HSMOE_SEED" in os.environ:
        run.seed = int(os.environ["HSMOE_SEED"])
    if "HSMOE_THREADS" in os.environ:
        run.threads = int(os.environ["HSMOE_THREADS"])
    if run.precision not in ("f64", "f32"):
        raise ConfigError(f"precision must be f64 or f32, got {run.precision!r}")
    if run.threads < 1:
        raise ConfigError(f"threads must be >= 1, got {run.threads}")
    return run


def _apply_common_flags(run: RunConfig, args) -> RunConfig:
    for attr in ("seed", "threads", "precision"):
        val = getattr(args, attr, None)
        if val is not None:
            setattr(run, attr, val)
    if getattr(args, "preset", None):
        run.preset = args.preset
        run.network_overrides.clear()
    if getattr(args, "classes", None):
        run.num_classes = args.classes
    if getattr(args, "norm", None):
        run.norm = args.norm
    return run


# ---------------------------------------------------------------------------
# subcommands


def cmd_describe(run: RunConfig, args) -> int:
    cfg = run.network()
    out = sys.stdout
    print(f"preset: {run.preset if not run.network_overrides else 'custom'}", file=out)
    print(f"stem_channels: {cfg.stem_channels}", file=out)
    print(f"channels: {list(cfg.channels)}", file=out)
    print(f"experts_level1: {[s.num_experts for s in cfg.stages]}", file=out)
    print(f"experts_level2: {[s.num_experts_l2 for s in cfg.stages]}", file=out)
    print(f"group_sizes: {[s.group_size for s in cfg.stages]}", file=out)
    print(f"slots_per_expert: {cfg.stages[0].slots_per_expert}", file=out)
    print(f"layers_per_stage: {list(cfg.layers_per_stage)}", file=out)
    print(f"norm: {cfg.norm}", file=out)
    size = args.size
    div = 2 ** cfg.num_stages
    if size % div:
        raise ConfigError(f"--size {size} not divisible by {div}")
    print(f"\nstage  channels  spatial@{size}^3  experts  experts_l2  group  slots", file=out)
    for i, s in enumerate(cfg.stages):
        sp = size // 2 ** (i + 1)
        print(f"{i + 1:5d}  {s.dim:8d}  {sp:^13d}  {s.num_experts:7d}  "
              f"{s.num_experts_l2:10d}  {s.group_size:5d}  {s.slots_per_expert:5d}", file=out)
    total = manifest_parameter_count(cfg)
    print(f"\nparameters: {total}", file=out)
    return EXIT_OK


def cmd_gradcheck(run: RunConfig, args) -> int:
    from .gradcheck import run_suites

    results = run_suites(args.modules)
    width = max(len(r.name) for r in results)
    failed = False
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed |= not r.passed
        print(f"{r.name:{width}s}  {status}  max_rel_err={r.max_rel_err:.3e}  "
              f"tol={r.tol:.0e}  coords={r.coords_checked}")
    print("gradcheck:", "FAIL" if failed else "PASS")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_bench(run: RunConfig, args) -> int:
    n_values = [2 ** k for k in range(args.min_exp, args.max_exp + 1)]
    rows = bench_mod.routing_sweep(n_values, group_size=args.group_size, seed=run.seed,
                                   repeats=args.repeats)
    header = ["N", "K", "E", "S", "G", "wall_ms", "est_flops",
              "assign_flops_grouped", "assign_flops_global"]
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        writer.writerows(rows)
    slope = bench_mod.fit_loglog_slope([r["N"] for r in rows], [r["wall_ms"] for r in rows])
    print(f"routing sweep written to {args.out}")
    print(f"routing log-log slope: {slope:.3f}")
    ok = all(r["assign_flops_grouped"] <= r["assign_flops_global"] for r in rows)
    print(f"grouped assignment cost <= global at equal N: {'yes' if ok else 'NO'}")
    if args.network_out:
        net_rows = bench_mod.network_sweep(n_values, seed=run.seed, repeats=args.repeats)
        with open(args.network_out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["N", "shape", "wall_ms"])
            writer.writeheader()
            writer.writerows(net_rows)
        net_slope = bench_mod.fit_loglog_slope([r["N"] for r in net_rows],
                                               [r["wall_ms"] for r in net_rows])
        print(f"network sweep written to {args.network_out}")
        print(f"network log-log slope: {net_slope:.3f}")
    if args.compare_norms:
        times = bench_mod.norm_comparison(seed=run.seed)
        print(f"norm-layer forward ms over sweep sizes, dyt: {times['dyt']:.2f}  "
              f"ln: {times['ln']:.2f}  (dyt <= ln: {'yes' if times['dyt'] <= times['ln'] else 'no'})")
        net_times = bench_mod.norm_net_comparison(seed=run.seed)
        print(f"whole-net forward ms, dyt: {net_times['dyt']:.2f}  ln: {net_times['ln']:.2f}")
    return EXIT_OK


def _write_history(history: List[Dict], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "loss", "mdsc", "lr"])
        writer.writeheader()
        writer.writerows(history)


def cmd_train(run: RunConfig, args) -> int:
    for flag, target in (("steps", "steps"), ("lr", "lr"), ("batch_size", "batch_size")):
        val = getattr(args, flag, None)
        if val is not None:
            setattr(run.train, target, val)
    for flag, target in (("volumes", "num_volumes"), ("size", "size")):
        val = getattr(args, flag, None)
        if val is not None:
            setattr(run.data, target, val)
    cfg = run.network()
    net = SegNet(cfg, seed=run.seed)
    run.train.seed = run.seed
    data = synth_volumes(seed=run.seed + 1, n=run.data.num_volumes, size=run.data.size,
                         classes=run.num_classes, noise_sigma=run.data.noise_sigma)
    history = train_loop(net, data, run.train, checkpoint_path=args.checkpoint)
    _write_history(history, args.history)
    last = history[-1]
    print(f"trained {len(history)} steps; final loss {last['loss']:.4f} "
          f"train mDSC {last['mdsc']:.4f}")
    print(f"history written to {args.history}")
    if args.checkpoint:
        print(f"checkpoint written to {args.checkpoint}.json/.bin")
    return EXIT_OK


def _eval_case(case_id: str, pred: np.ndarray, gt: np.ndarray, num_classes: int,
               spacing) -> List[Dict]:
    rows = []
    for c in range(1, num_classes):
        try:
            dist = hd95(pred == c, gt == c, spacing)
        except EmptyMaskError:
            dist = ""
        rows.append({"case_id": case_id, "class": c,
                     "dsc": dsc_per_class(pred, gt, c), "hd95": dist})
    return rows


def cmd_eval(run: RunConfig, args) -> int:
    for flag, target in (("volumes", "num_volumes"), ("size", "size")):
        val = getattr(args, flag, None)
        if val is not None:
            setattr(run.data, target, val)
    num_classes = run.num_classes
    cases = []
    if args.pred_dir:
        if not args.gt_dir:
            raise ConfigError("--pred-dir requires --gt-dir")
        names = sorted(f[:-4] for f in os.listdir(args.pred_dir) if f.endswith(".vol"))
        if not names:
            raise ConfigError(f"no .vol files in {args.pred_dir}")
        for name in names:
            pred, spacing = read_volume(os.path.join(args.pred_dir, name))
            gt, _ = read_volume(os.path.join(args.gt_dir, name))
            cases.append((name, pred, gt, spacing))
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint (or --pred-dir/--gt-dir)")
        cfg = run.network()
        net = SegNet(cfg, seed=run.seed)
        load_into(net, args.checkpoint)
        data = synth_volumes(seed=run.seed + 2, n=run.data.num_volumes, size=run.data.size,
                             classes=num_classes, noise_sigma=run.data.noise_sigma)
        for i, sample in enumerate(data):
            logits = net(Tensor(sample.image[None]))
            pred = np.argmax(logits.data, axis=1)[0]
            cases.append((f"case{i:03d}", pred, sample.label, sample.spacing_mm))

    def work(case):
        name, pred, gt, spacing = case
        return _eval_case(name, pred, gt, num_classes, spacing)

    if run.threads > 1:
        with ThreadPoolExecutor(max_workers=run.threads) as pool:
            per_case = list(pool.map(work, cases))
    else:
        per_case = [work(c) for c in cases]
    rows = [row for case_rows in per_case for row in case_rows]
    write_metrics_csv(rows, args.out)
    summary = summarize(rows, num_classes)
    write_metrics_json(summary, args.json_out)
    print(f"evaluated {len(cases)} cases over {num_classes - 1} foreground classes")
    print(f"mDSC: {summary['mdsc']}")
    print(f"mHD95: {summary['mhd95']}")
    print(f"per-case metrics written to {args.out}; summary to {args.json_out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation errors (exit 1), not runtime failures."""

    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("--precision", choices=("f64", "f32"), default=None)

    parser = _Parser(prog="hsmoe", parents=[common],
                     description="hierarchical soft-MoE segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("describe", parents=[common],
                       help="echo schedules, stage shapes, parameter count")
    p.add_argument("--preset", choices=("tiny", "full"))
    p.add_argument("--classes", type=int)
    p.add_argument("--norm", choices=("dyt", "ln"))
    p.add_argument("--size", type=int, default=64, help="reference input extent")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference suites per module")
    p.add_argument("--modules", nargs="*", default=None,
                   help="subset of: tensor_core nn_prims ssm_scan routing block network")

    p = sub.add_parser("bench", parents=[common], help="scaling sweeps and cost accounting")
    p.add_argument("--out", default="bench_routing.csv")
    p.add_argument("--network-out", default=None)
    p.add_argument("--compare-norms", action="store_true")
    p.add_argument("--min-exp", type=int, default=10)
    p.add_argument("--max-exp", type=int, default=16)
    p.add_argument("--group-size", type=int, default=256)
    p.add_argument("--repeats", type=int, default=3)

    p = sub.add_parser("train", parents=[common], help="train on synthetic volumes")
    p.add_argument("--preset", choices=("tiny", "full"))
    p.add_argument("--classes", type=int)
    p.add_argument("--norm", choices=("dyt", "ln"))
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--volumes", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--history", default="history.csv")
    p.add_argument("--checkpoint", default="checkpoint")

    p = sub.add_parser("eval", parents=[common], help="metrics from a checkpoint or label volumes")
    p.add_argument("--preset", choices=("tiny", "full"))
    p.add_argument("--classes", type=int)
    p.add_argument("--norm", choices=("dyt", "ln"))
    p.add_argument("--volumes", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--pred-dir", default=None)
    p.add_argument("--gt-dir", default=None)
    p.add_argument("--out", default="metrics.csv")
    p.add_argument("--json-out", default="metrics.json")
    return parser


_COMMANDS = {
    "describe": cmd_describe,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
    "train": cmd_train,
    "eval": cmd_eval,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        run = build_run_config(args.config)
        run = _apply_common_flags(run, args)
        return _COMMANDS[args.command](run, args)
    except (ConfigError, CheckpointError, VolumeIOError, MetricError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, TrainingDiverged) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
