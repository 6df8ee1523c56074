"""Command-line interface.

Subcommands: synth-data, train, register, finetune, evaluate, report. Each
takes --config <path> (YAML), --seed <u64> (optional override) and --out
<dir>. Exit codes: 0 success, 2 contract violation, 3 degraded result.
SARREG_THREADS caps worker/torch parallelism.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import yaml

from ..checkpoint import load_checkpoint
from ..errors import ContractViolation, DegradedResult
from ..image import SegMask, load_image
from ..tensorfile import read_tensor
from ..transfer import FinetuneConfig, finetune_register, register_frozen, save_result
from .domains import DomainSpec, synth_domain
from .experiment import (ExperimentConfig, ExperimentReport, run_experiment,
                         stage_eval_frozen, stage_train, stage_transfer)

EXIT_OK = 0
EXIT_CONTRACT = 2
EXIT_DEGRADED = 3


def apply_thread_cap() -> int:
    """SARREG_THREADS caps torch intra-op parallelism; 0/unset keeps defaults."""
    raw = os.environ.get("SARREG_THREADS", "")
    if not raw:
        return 0
    n = max(1, int(raw))
    import torch
    torch.set_num_threads(n)
    return n


def _load_yaml(path) -> dict:
    with open(path) as fh:
        return yaml.safe_load(fh) or {}


def _dataclass_from(cls, d: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    clean = {}
    for k, v in (d or {}).items():
        if k not in known:
            raise ContractViolation(f"unknown {cls.__name__} key {k!r}")
        clean[k] = tuple(v) if isinstance(v, list) else v
    return cls(**clean)


def _mask_arg(cfg: dict, key: str, base: Path) -> SegMask | None:
    rel = cfg.get(key)
    if rel is None:
        return None
    return SegMask(read_tensor(base / rel))


def cmd_synth_data(args) -> int:
    cfg = _load_yaml(args.config)
    specs = cfg.get("domains") or [cfg]
    out = Path(args.out)
    for spec_dict in specs:
        spec_dict = dict(spec_dict)
        if args.seed is not None:
            spec_dict["seed"] = args.seed
        spec = _dataclass_from(DomainSpec, spec_dict)
        synth_domain(spec, out / spec.name)
        print(f"synthesized domain {spec.name!r} -> {out / spec.name}")
    return EXIT_OK


def _experiment_config(cfg: dict, seed) -> ExperimentConfig:
    if seed is not None:
        cfg = dict(cfg)
        cfg["train"] = dict(cfg.get("train") or {})
        cfg["train"]["seed"] = seed
    return ExperimentConfig.from_dict(cfg)


def cmd_train(args) -> int:
    cfg = _load_yaml(args.config)
    domain_dir = cfg.get("domain")
    config = _experiment_config(cfg.get("experiment") or cfg, args.seed)
    out = Path(args.out)
    if domain_dir is None:
        domain_dir = out / "data"
        synth_domain(config.source_domain, domain_dir)
    ckpt = stage_train(Path(domain_dir), config.model, config.train,
                       config.train_pairs, out)
    print(f"final checkpoint: {ckpt}")
    return EXIT_OK


def _pair_from_config(cfg: dict, config_path) -> tuple:
    base = Path(config_path).parent
    flt = load_image(base / cfg["floating"])
    ref = load_image(base / cfg["reference"])
    flt_mask = _mask_arg(cfg, "floating_mask", base)
    ref_mask = _mask_arg(cfg, "reference_mask", base)
    masks = (flt_mask, ref_mask) if flt_mask is not None and ref_mask is not None else None
    params = load_checkpoint(base / cfg["checkpoint"])
    return params, flt, ref, masks


def cmd_register(args) -> int:
    cfg = _load_yaml(args.config)
    params, flt, ref, masks = _pair_from_config(cfg, args.config)
    result = register_frozen(params, flt, ref, masks,
                             spacing_mm=float(cfg.get("spacing_mm", 1.0)))
    save_result(result, args.out, ref)
    print(f"registered in {result.runtime_s:.3f}s -> {args.out}")
    return EXIT_DEGRADED if result.degraded else EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _load_yaml(args.config)
    params, flt, ref, masks = _pair_from_config(cfg, args.config)
    ft = _dataclass_from(FinetuneConfig, cfg.get("finetune") or {})
    result = finetune_register(params, flt, ref, cfg=ft, masks=masks,
                               spacing_mm=float(cfg.get("spacing_mm", 1.0)))
    save_result(result, args.out, ref)
    print(f"fine-tuned for {result.iters_used} iterations "
          f"({result.runtime_s:.3f}s) -> {args.out}")
    return EXIT_DEGRADED if result.degraded else EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_yaml(args.config)
    base = Path(args.config).parent
    config = _experiment_config(cfg.get("experiment") or cfg, args.seed)
    domain_dir = base / cfg["domain"]
    ckpt = base / cfg["checkpoint"]
    mode = cfg.get("mode", "frozen")
    report = ExperimentReport()
    out = Path(args.out)
    if mode == "frozen":
        stage_eval_frozen(ckpt, domain_dir, config.train, config.evaluate,
                          report, "eval", out / "figures")
    elif mode == "finetune":
        stage_transfer(ckpt, domain_dir, config.train, config.evaluate,
                       report, "eval", out / "figures")
    else:
        raise ContractViolation(f"unknown evaluate mode {mode!r}")
    report.write(out)
    table = report.table("eval")
    for method in table.methods:
        print(f"{method}: dice {table.mean(method, 'dice'):.4f} "
              f"hd95 {table.mean(method, 'hd95'):.3f} "
              f"mad {table.mean(method, 'mad'):.3f}")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _load_yaml(args.config)
    config = _experiment_config(cfg.get("experiment") or cfg, args.seed)
    report = run_experiment(config, args.out)
    failed = [k for k, v in report.stages.items() if v.startswith("failed")]
    for name, status in report.stages.items():
        print(f"stage {name}: {status}")
    if report.transfer_gap_dice is not None:
        print(f"transfer gap (baseline dice - transfer dice): "
              f"{report.transfer_gap_dice:+.4f}")
    return EXIT_DEGRADED if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sarreg",
        description="Segmentation-augmented adversarial registration toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "synth-data": (cmd_synth_data, "generate a procedural toy dataset"),
        "train": (cmd_train, "train the registration GAN on a dataset"),
        "register": (cmd_register, "register one pair with a frozen model"),
        "finetune": (cmd_finetune, "register one pair with last-layer fine-tuning"),
        "evaluate": (cmd_evaluate, "evaluate a checkpoint on a dataset test split"),
        "report": (cmd_report, "run the full transfer-gap experiment pipeline"),
    }
    for name, (fn, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="YAML config file")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    apply_thread_cap()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ContractViolation as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except DegradedResult as exc:
        print(f"degraded result: {exc}", file=sys.stderr)
        return EXIT_DEGRADED


if __name__ == "__main__":
    sys.exit(main())
