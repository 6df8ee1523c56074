"""End-to-end experiment pipeline: synthesize two toy domains, train on the
source, evaluate frozen in-domain, transfer-register the target with per-pair
fine-tuning, optionally train an in-domain baseline on the target, and emit a
report that mirrors the before/after-per-method table layout.

Stages communicate only through serialized artifacts (datasets, checkpoints,
CSV files); a stage whose outputs already exist is skipped, so the pipeline
can be resumed or driven stage by stage from the CLI.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from ..checkpoint import load_checkpoint
from ..errors import require
from ..metrics import METRIC_CSV_HEADER, MetricReport, evaluate_registration
from ..networks import DiscriminatorConfig, GeneratorConfig, ModelParams
from ..training import (TrainConfig, TrainingPair, make_training_pair,
                        pretrain_generator, split_dataset, train)
from ..transfer import (FinetuneConfig, finetune_register, register_frozen,
                        save_overlay)
from ..warp import warp
from .dataset import PatientCase, load_domain
from .domains import DomainSpec, synth_domain

REPORT_METRICS = ("dice", "hd95", "mad", "runtime_s")


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class ModelConfig:
    g_width: int = 16
    g_blocks: int = 2
    field_scale: float = 20.0
    field_head_stride: int = 1
    d_n_conv: int = 8
    d_base_width: int = 16
    d_max_width: int = 128
    d_dense_units: int = 64
    seed: int = 0

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(n_res_blocks=self.g_blocks, width=self.g_width,
                               field_scale=self.field_scale,
                               field_head_stride=self.field_head_stride)

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(n_conv=self.d_n_conv, base_width=self.d_base_width,
                                   max_width=self.d_max_width,
                                   dense_units=self.d_dense_units)


@dataclass(frozen=True)
class EvalConfig:
    n_pairs: int = 24
    seed: int = 9000
    spacing_mm: float = 1.0
    use_gt_masks_for_finetune: bool = False
    finetune: FinetuneConfig = FinetuneConfig()


@dataclass(frozen=True)
class ExperimentConfig:
    source_domain: DomainSpec
    target_domain: DomainSpec
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    evaluate: EvalConfig = EvalConfig()
    train_pairs: int = 200
    run_baseline: bool = True

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        def build(cls, sub):
            sub = dict(sub or {})
            known = {f.name for f in dataclasses.fields(cls)}
            unknown = set(sub) - known
            require(not unknown, f"unknown {cls.__name__} keys: {sorted(unknown)}")
            for name, value in list(sub.items()):
                if isinstance(value, list):
                    sub[name] = tuple(value)
            return cls(**sub)

        eval_dict = dict(d.get("evaluate") or {})
        finetune = build(FinetuneConfig, eval_dict.pop("finetune", None))
        evaluate = dataclasses.replace(build(EvalConfig, eval_dict),
                                       finetune=finetune)
        return ExperimentConfig(
            source_domain=build(DomainSpec, d.get("source_domain")),
            target_domain=build(DomainSpec, d.get("target_domain")),
            model=build(ModelConfig, d.get("model")),
            train=build(TrainConfig, d.get("train")),
            evaluate=evaluate,
            train_pairs=int(d.get("train_pairs", 200)),
            run_baseline=bool(d.get("run_baseline", True)),
        )

    @staticmethod
    def load(path) -> "ExperimentConfig":
        with open(path) as fh:
            return ExperimentConfig.from_dict(yaml.safe_load(fh) or {})


# ---------------------------------------------------------------------------
# pair construction

def build_pairs(cases: list[PatientCase], cfg: TrainConfig, n_pairs: int,
                seed_base: int) -> tuple[list[TrainingPair], list[str]]:
    """Deterministic pair schedule: first visit is the reference, later visits
    are partners (self-pairing for single-visit patients); the schedule cycles
    with fresh deformation seeds until n_pairs are built."""
    require(len(cases) >= 1, "no cases to build pairs from")
    units = []
    for case in cases:
        if len(case.images) >= 2:
            for v in range(1, len(case.images)):
                units.append((case, v))
        else:
            units.append((case, 0))
    pairs: list[TrainingPair] = []
    ids: list[str] = []
    k = 0
    while len(pairs) < n_pairs:
        case, v = units[k % len(units)]
        seed = seed_base + 7919 * k
        if v == 0:
            pair = make_training_pair(case.images[0], case.masks[0], cfg=cfg, seed=seed)
        else:
            pair = make_training_pair(case.images[0], case.masks[0],
                                      case.images[v], case.masks[v], cfg, seed)
        pairs.append(pair)
        ids.append(f"{case.patient_id}_v{v}_s{k}")
        k += 1
    return pairs, ids


# ---------------------------------------------------------------------------
# report containers

@dataclass
class MethodTable:
    """Per-metric rows x per-method columns, with per-case backing rows."""

    name: str
    methods: list[str] = field(default_factory=list)
    per_case: dict[str, list[tuple[str, MetricReport]]] = field(default_factory=dict)

    def add(self, method: str, case_id: str, report: MetricReport) -> None:
        if method not in self.methods:
            self.methods.append(method)
            self.per_case[method] = []
        self.per_case[method].append((case_id, report))

    def values(self, method: str, metric: str) -> list[float]:
        return [getattr(rep, metric) for _, rep in self.per_case[method]]

    def mean(self, method: str, metric: str) -> float:
        return float(np.mean(self.values(method, metric)))

    def std(self, method: str, metric: str) -> float:
        vals = self.values(method, metric)
        return float(statistics.stdev(vals)) if len(vals) > 1 else 0.0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["metric"]
            for m in self.methods:
                header += [f"{m}_mean", f"{m}_std"]
            writer.writerow(header)
            for metric in REPORT_METRICS:
                row = [metric]
                for m in self.methods:
                    row += [self.mean(m, metric), self.std(m, metric)]
                writer.writerow(row)

    @staticmethod
    def parse_csv(path) -> dict[tuple[str, str], tuple[float, float]]:
        out = {}
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            methods = [h[:-5] for h in header[1::2]]
            for row in reader:
                metric = row[0]
                for i, m in enumerate(methods):
                    out[(m, metric)] = (float(row[1 + 2 * i]), float(row[2 + 2 * i]))
        return out

    def write_per_case(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for method in self.methods:
            with open(out_dir / f"percase_{self.name}_{method}.csv", "w") as fh:
                fh.write(",".join(METRIC_CSV_HEADER) + "\n")
                for case_id, rep in self.per_case[method]:
                    fh.write(rep.csv_row(case_id) + "\n")


@dataclass
class ExperimentReport:
    tables: dict[str, MethodTable] = field(default_factory=dict)
    stages: dict[str, str] = field(default_factory=dict)
    transfer_gap_dice: float | None = None
    transfer_audit: list[dict] = field(default_factory=list)

    def table(self, name: str) -> MethodTable:
        if name not in self.tables:
            self.tables[name] = MethodTable(name)
        return self.tables[name]

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, table in self.tables.items():
            table.to_csv(out_dir / f"report_{name}.csv")
            table.write_per_case(out_dir)
        meta = {"stages": self.stages,
                "transfer_gap_dice": self.transfer_gap_dice,
                "transfer_audit": self.transfer_audit}
        (out_dir / "experiment.json").write_text(json.dumps(meta, indent=2))


# ---------------------------------------------------------------------------
# stages

def stage_synth(spec: DomainSpec, out_dir) -> Path:
    out_dir = Path(out_dir)
    if not (out_dir / "manifest.json").exists():
        synth_domain(spec, out_dir)
    return out_dir


def stage_train(domain_dir, model_cfg: ModelConfig, train_cfg: TrainConfig,
                n_pairs: int, out_dir) -> Path:
    """Train on the domain's train split; returns the final checkpoint path.
    Skipped (checkpoint reused) when the final checkpoint already exists."""
    out_dir = Path(out_dir)
    final = out_dir / "checkpoint_final"
    if (final / "manifest.json").exists():
        return final
    cases = load_domain(domain_dir)
    splits = split_dataset(cases, seed=train_cfg.seed)
    pairs, _ = build_pairs(splits["train"], train_cfg, n_pairs,
                           seed_base=train_cfg.seed * 1_000 + 17)
    params = ModelParams(model_cfg.generator_config(),
                         model_cfg.discriminator_config(),
                         seed=model_cfg.seed)
    pretrain_generator(params, pairs, train_cfg)
    train(params, pairs, train_cfg, out_dir=out_dir)
    return final


def build_eval_pairs(domain_dir, train_cfg: TrainConfig, eval_cfg: EvalConfig):
    """Held-out pairs from the test split with known ground truth."""
    cases = load_domain(domain_dir)
    splits = split_dataset(cases, seed=train_cfg.seed)
    return build_pairs(splits["test"], train_cfg, eval_cfg.n_pairs,
                       seed_base=eval_cfg.seed * 1_000 + 23)


def before_registration_report(pair: TrainingPair, spacing_mm: float) -> MetricReport:
    """Residual error after affine pre-alignment only (no model involved)."""
    return evaluate_registration(pair.flt, pair.ref, pair.flt_seg, pair.ref_seg,
                                 spacing_mm, runtime_s=0.0)


def report_with_gt(result, pair: TrainingPair, spacing_mm: float) -> MetricReport:
    """Score a registration result against ground-truth masks."""
    seg_trans = warp(pair.flt_seg, result.def_recv, "nearest")
    return evaluate_registration(result.trans, pair.ref, seg_trans, pair.ref_seg,
                                 spacing_mm, result.runtime_s)


def frozen_layer_diff(before: ModelParams, after: ModelParams) -> list[str]:
    """Names of tensors that changed; fine-tuning must only touch the
    designated last convolution layer."""
    import torch
    before_t = dict(before.named_tensors())
    changed = []
    for name, t in after.named_tensors():
        if not torch.equal(before_t[name], t):
            changed.append(name)
    return changed


def stage_eval_frozen(ckpt_dir, domain_dir, train_cfg: TrainConfig,
                      eval_cfg: EvalConfig, report: ExperimentReport,
                      table_name: str, figures_dir=None) -> None:
    params = load_checkpoint(ckpt_dir)
    pairs, ids = build_eval_pairs(domain_dir, train_cfg, eval_cfg)
    spacing = eval_cfg.spacing_mm
    table = report.table(table_name)
    for case_id, pair in zip(ids, pairs):
        table.add("bef_reg", case_id, before_registration_report(pair, spacing))
        res = register_frozen(params, pair.flt, pair.ref,
                              masks=(pair.flt_seg, pair.ref_seg),
                              spacing_mm=spacing)
        table.add("frozen", case_id, res.metrics)
        if figures_dir is not None and case_id == ids[0]:
            Path(figures_dir).mkdir(parents=True, exist_ok=True)
            save_overlay(pair.ref, pair.ref_seg, res.seg_trans,
                         Path(figures_dir) / f"{table_name}_{case_id}.png")


def stage_transfer(ckpt_dir, domain_dir, train_cfg: TrainConfig,
                   eval_cfg: EvalConfig, report: ExperimentReport,
                   table_name: str = "target", figures_dir=None) -> None:
    """Frozen inference and per-pair fine-tuning on the target test pairs.

    Each pair starts from the pristine checkpoint; the audit records the
    iteration count and that only the designated layer changed.
    """
    params = load_checkpoint(ckpt_dir)
    pairs, ids = build_eval_pairs(domain_dir, train_cfg, eval_cfg)
    spacing = eval_cfg.spacing_mm
    table = report.table(table_name)
    for i, (case_id, pair) in enumerate(zip(ids, pairs)):
        table.add("bef_reg", case_id, before_registration_report(pair, spacing))

        frozen = register_frozen(params, pair.flt, pair.ref)
        table.add("frozen", case_id, report_with_gt(frozen, pair, spacing))

        masks = (pair.flt_seg, pair.ref_seg) \
            if eval_cfg.use_gt_masks_for_finetune else None
        tuned = finetune_register(params, pair.flt, pair.ref,
                                  cfg=eval_cfg.finetune, masks=masks,
                                  keep_params=True)
        table.add("transfer", case_id, report_with_gt(tuned, pair, spacing))
        changed = frozen_layer_diff(params, tuned.finetuned_params)
        prefix = params.last_conv_layer + "."
        report.transfer_audit.append({
            "case_id": case_id,
            "iters_used": tuned.iters_used,
            "within_cap": tuned.iters_used <= eval_cfg.finetune.max_iters,
            "loss_trace_len": len(tuned.loss_trace),
            "only_designated_layer_changed": all(c.startswith(prefix) for c in changed),
            "degraded": tuned.degraded,
        })
        if figures_dir is not None and i < 3:
            Path(figures_dir).mkdir(parents=True, exist_ok=True)
            seg_trans = warp(pair.flt_seg, tuned.def_recv, "nearest")
            save_overlay(pair.ref, pair.ref_seg, seg_trans,
                         Path(figures_dir) / f"{table_name}_transfer_{case_id}.png")


def run_experiment(config: ExperimentConfig, out_dir) -> ExperimentReport:
    """Full pipeline; failed stages are recorded and later dependents skipped."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = ExperimentReport()
    figures = out_dir / "figures"

    def run_stage(name, fn, *deps):
        if any(report.stages.get(d, "").startswith(("failed", "skipped"))
               for d in deps):
            report.stages[name] = f"skipped: dependency failed"
            return None
        try:
            result = fn()
            report.stages[name] = "ok"
            return result
        except Exception as exc:  # noqa: BLE001 - partial report on any failure
            report.stages[name] = f"failed: {exc}"
            return None

    src_dir = run_stage("synth_source",
                        lambda: stage_synth(config.source_domain, out_dir / "data_source"))
    tgt_dir = run_stage("synth_target",
                        lambda: stage_synth(config.target_domain, out_dir / "data_target"))

    src_ckpt = run_stage("train_source",
                         lambda: stage_train(src_dir, config.model, config.train,
                                             config.train_pairs,
                                             out_dir / "train_source"),
                         "synth_source")
    run_stage("eval_source",
              lambda: stage_eval_frozen(src_ckpt, src_dir, config.train,
                                        config.evaluate, report, "source", figures),
              "train_source", "synth_source")
    run_stage("transfer_target",
              lambda: stage_transfer(src_ckpt, tgt_dir, config.train,
                                     config.evaluate, report, "target", figures),
              "train_source", "synth_target")

    if config.run_baseline:
        tgt_ckpt = run_stage("train_target",
                             lambda: stage_train(tgt_dir, config.model, config.train,
                                                 config.train_pairs,
                                                 out_dir / "train_target"),
                             "synth_target")
        run_stage("eval_target_baseline",
                  lambda: stage_eval_frozen(tgt_ckpt, tgt_dir, config.train,
                                            config.evaluate, report,
                                            "target_baseline", figures),
                  "train_target", "synth_target")
        if (report.stages.get("eval_target_baseline") == "ok"
                and report.stages.get("transfer_target") == "ok"):
            baseline = report.table("target_baseline").mean("frozen", "dice")
            transfer = report.table("target").mean("transfer", "dice")
            report.transfer_gap_dice = baseline - transfer

    report.write(out_dir)
    return report
