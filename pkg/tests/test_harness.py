import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from sarreg.harness.dataset import load_domain
from sarreg.harness.domains import DomainSpec, generate_domain, synth_domain
from sarreg.harness.experiment import (ExperimentConfig, MethodTable,
                                       build_pairs, run_experiment)
from sarreg.metrics import MetricReport
from sarreg.training import TrainConfig

SRC_SPEC = DomainSpec(name="src", family="ellipse-pair", size=32, n_patients=4,
                      images_per_patient=2, seed=5)
RING_SPEC = DomainSpec(name="tgt", family="ring", size=32, n_patients=4,
                       images_per_patient=2, seed=6)


class TestDomains:
    def test_byte_identical_for_same_spec(self, tmp_path):
        synth_domain(SRC_SPEC, tmp_path / "a")
        synth_domain(SRC_SPEC, tmp_path / "b")
        for rel in sorted(p.relative_to(tmp_path / "a")
                          for p in (tmp_path / "a").rglob("*") if p.is_file()):
            assert (tmp_path / "a" / rel).read_bytes() == \
                   (tmp_path / "b" / rel).read_bytes(), rel

    @pytest.mark.parametrize("spec", [SRC_SPEC, RING_SPEC])
    def test_masks_non_empty_and_in_bounds(self, spec):
        for _, visits in generate_domain(spec):
            for img, mask in visits:
                assert mask.area() > 0
                assert img.shape == mask.shape == (spec.size, spec.size)

    def test_patient_counts_match_spec(self, tmp_path):
        manifest = synth_domain(SRC_SPEC, tmp_path / "d")
        assert len(manifest["patients"]) == SRC_SPEC.n_patients
        for p in manifest["patients"]:
            assert len(p["images"]) == SRC_SPEC.images_per_patient

    def test_round_trip_through_disk(self, tmp_path):
        synth_domain(SRC_SPEC, tmp_path / "d")
        cases = load_domain(tmp_path / "d")
        in_memory = generate_domain(SRC_SPEC)
        assert len(cases) == len(in_memory)
        for case, (pid, visits) in zip(cases, in_memory):
            assert case.patient_id == pid
            for img_loaded, (img, mask) in zip(case.images, visits):
                # 16-bit quantization error only
                assert np.abs(img_loaded.pixels - img.pixels).max() < 1.0 / 65000
            for mask_loaded, (_, mask) in zip(case.masks, visits):
                assert np.array_equal(mask_loaded.pixels, mask.pixels)


class TestBuildPairs:
    def test_deterministic_and_sized(self, tmp_path):
        synth_domain(SRC_SPEC, tmp_path / "d")
        cases = load_domain(tmp_path / "d")
        cfg = TrainConfig(spacing=8, max_disp=6.0, extractor_widths=(4,),
                          extractor_pools=(1,))
        p1, ids1 = build_pairs(cases, cfg, 10, seed_base=3)
        p2, ids2 = build_pairs(cases, cfg, 10, seed_base=3)
        assert len(p1) == 10 and ids1 == ids2
        for a, b in zip(p1, p2):
            assert np.array_equal(a.flt.pixels, b.flt.pixels)


class TestMethodTable:
    def _table(self):
        t = MethodTable("demo")
        rep = lambda d: MetricReport(dice=d, hd95=1.0, mad=0.5, nmi=0.8,
                                     ssim=0.9, runtime_s=0.1)
        t.add("bef_reg", "c0", rep(0.5))
        t.add("bef_reg", "c1", rep(0.7))
        t.add("frozen", "c0", rep(0.8))
        t.add("frozen", "c1", rep(0.9))
        return t

    def test_summary_csv_round_trip(self, tmp_path):
        t = self._table()
        t.to_csv(tmp_path / "r.csv")
        parsed = MethodTable.parse_csv(tmp_path / "r.csv")
        assert parsed[("bef_reg", "dice")][0] == pytest.approx(0.6)
        assert parsed[("frozen", "dice")][0] == pytest.approx(0.85)
        header = (tmp_path / "r.csv").read_text().splitlines()[0]
        assert header.startswith("metric,bef_reg_mean,bef_reg_std")

    def test_per_case_rows_written(self, tmp_path):
        t = self._table()
        t.write_per_case(tmp_path)
        lines = (tmp_path / "percase_demo_frozen.csv").read_text().strip().splitlines()
        assert lines[0].startswith("case_id,dice")
        assert len(lines) == 3


@pytest.fixture(scope="module")
def micro_report(tmp_path_factory):
    cfg = ExperimentConfig.from_dict({
        "source_domain": {"name": "s", "family": "ellipse-pair", "size": 32,
                          "n_patients": 5, "images_per_patient": 2, "seed": 1},
        "target_domain": {"name": "t", "family": "ring", "size": 32,
                          "n_patients": 5, "images_per_patient": 2, "seed": 2},
        "model": {"g_width": 8, "g_blocks": 1, "d_base_width": 8,
                  "d_max_width": 32, "d_dense_units": 16},
        "train": {"batch": 2, "max_iters": 4, "pretrain_iters": 2, "seed": 3,
                  "checkpoint_every": 0, "spacing": 8, "max_disp": 5.0,
                  "extractor_widths": [4], "extractor_pools": [1]},
        "evaluate": {"n_pairs": 3, "seed": 4, "finetune": {"max_iters": 3}},
        "train_pairs": 4,
    })
    out = tmp_path_factory.mktemp("exp")
    report = run_experiment(cfg, out)
    return cfg, out, report


class TestRunExperiment:
    def test_all_stages_ok(self, micro_report):
        _, _, report = micro_report
        assert all(v == "ok" for v in report.stages.values()), report.stages

    def test_before_registration_always_present(self, micro_report):
        _, _, report = micro_report
        for name in ("source", "target", "target_baseline"):
            assert "bef_reg" in report.tables[name].methods

    def test_gap_is_baseline_minus_transfer(self, micro_report):
        _, _, report = micro_report
        baseline = report.tables["target_baseline"].mean("frozen", "dice")
        transfer = report.tables["target"].mean("transfer", "dice")
        assert report.transfer_gap_dice == pytest.approx(baseline - transfer)

    def test_report_files_parse_back(self, micro_report):
        _, out, report = micro_report
        for name, table in report.tables.items():
            parsed = MethodTable.parse_csv(out / f"report_{name}.csv")
            for method in table.methods:
                for metric in ("dice", "hd95", "mad", "runtime_s"):
                    assert parsed[(method, metric)][0] == \
                        pytest.approx(table.mean(method, metric))
        meta = json.loads((out / "experiment.json").read_text())
        assert set(meta) == {"stages", "transfer_gap_dice", "transfer_audit"}

    def test_failed_stage_yields_partial_report(self, tmp_path):
        cfg = ExperimentConfig.from_dict({
            "source_domain": {"name": "s", "family": "ellipse-pair", "size": 32,
                              "n_patients": 2, "images_per_patient": 1, "seed": 1},
            "target_domain": {"name": "t", "family": "ring", "size": 32,
                              "n_patients": 5, "images_per_patient": 2, "seed": 2},
            "train": {"batch": 2, "max_iters": 2, "seed": 3,
                      "extractor_widths": [4], "extractor_pools": [1]},
            "train_pairs": 2,
            "evaluate": {"n_pairs": 2},
        })
        # 2 patients cannot satisfy the 0.7/0.1/0.2 split with a test fold
        report = run_experiment(cfg, tmp_path)
        assert any(v.startswith(("failed", "skipped"))
                   for v in report.stages.values())
        assert (tmp_path / "experiment.json").exists()


class TestCLI:
    def test_synth_and_exit_codes(self, tmp_path):
        config = tmp_path / "synth.yaml"
        config.write_text(yaml.safe_dump(
            {"name": "cli_dom", "family": "ring", "size": 32,
             "n_patients": 3, "images_per_patient": 2, "seed": 9}))
        proc = subprocess.run(
            [sys.executable, "-m", "sarreg.harness.cli", "synth-data",
             "--config", str(config), "--out", str(tmp_path / "out")],
            capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert (tmp_path / "out" / "cli_dom" / "manifest.json").exists()

    def test_contract_violation_exits_2(self, tmp_path):
        config = tmp_path / "bad.yaml"
        config.write_text(yaml.safe_dump(
            {"name": "x", "family": "hexagon", "size": 32,
             "n_patients": 3, "seed": 0}))
        proc = subprocess.run(
            [sys.executable, "-m", "sarreg.harness.cli", "synth-data",
             "--config", str(config), "--out", str(tmp_path / "out")],
            capture_output=True, text=True)
        assert proc.returncode == 2

    def test_register_cli(self, tmp_path):
        import torch
        from sarreg.checkpoint import save_checkpoint
        from sarreg.harness.domains import synth_domain as synth
        from sarreg.networks import (DiscriminatorConfig, GeneratorConfig,
                                     ModelParams)
        synth(DomainSpec(name="d", family="ring", size=32, n_patients=2,
                         images_per_patient=1, seed=3), tmp_path / "d")
        params = ModelParams(
            GeneratorConfig(n_res_blocks=1, width=8, field_scale=8.0),
            DiscriminatorConfig(n_conv=4, base_width=8, max_width=32,
                                dense_units=16), seed=0)
        save_checkpoint(params, tmp_path / "ckpt")
        config = tmp_path / "reg.yaml"
        config.write_text(yaml.safe_dump({
            "checkpoint": "ckpt",
            "floating": "d/images/p000_v0.png",
            "reference": "d/images/p001_v0.png",
            "floating_mask": "d/masks/p000_v0.sart",
            "reference_mask": "d/masks/p001_v0.sart",
        }))
        proc = subprocess.run(
            [sys.executable, "-m", "sarreg.harness.cli", "register",
             "--config", str(config), "--out", str(tmp_path / "res")],
            capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert (tmp_path / "res" / "trans.png").exists()
        assert (tmp_path / "res" / "metrics.csv").exists()

    def test_thread_cap_env(self, tmp_path):
        config = tmp_path / "synth.yaml"
        config.write_text(yaml.safe_dump(
            {"name": "thr", "family": "ring", "size": 32,
             "n_patients": 2, "images_per_patient": 1, "seed": 9}))
        proc = subprocess.run(
            [sys.executable, "-c",
             "import os; os.environ['SARREG_THREADS']='1';"
             "from sarreg.harness.cli import main; import torch;"
             f"code = main(['synth-data','--config',r'{config}','--out',"
             f"r'{tmp_path / 'out'}']);"
             "assert torch.get_num_threads() == 1;"
             "raise SystemExit(code)"],
            capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr


MICRO_EXPERIMENT = {
    "source_domain": {"name": "s", "family": "ellipse-pair", "size": 32,
                      "n_patients": 5, "images_per_patient": 2, "seed": 1},
    "target_domain": {"name": "t", "family": "ring", "size": 32,
                      "n_patients": 5, "images_per_patient": 2, "seed": 2},
    "model": {"g_width": 8, "g_blocks": 1, "d_base_width": 8,
              "d_max_width": 32, "d_dense_units": 16},
    "train": {"batch": 2, "max_iters": 3, "pretrain_iters": 2, "seed": 3,
              "checkpoint_every": 0, "spacing": 8, "max_disp": 5.0,
              "extractor_widths": [4], "extractor_pools": [1]},
    "evaluate": {"n_pairs": 2, "seed": 4, "finetune": {"max_iters": 2}},
    "train_pairs": 4,
    "run_baseline": False,
}


class TestCLIPipeline:
    def _run(self, *argv):
        return subprocess.run([sys.executable, "-m", "sarreg.harness.cli", *argv],
                              capture_output=True, text=True)

    def test_train_evaluate_finetune_report(self, tmp_path):
        cfg_path = tmp_path / "exp.yaml"
        cfg_path.write_text(yaml.safe_dump(MICRO_EXPERIMENT))

        proc = self._run("train", "--config", str(cfg_path),
                         "--out", str(tmp_path / "train"))
        assert proc.returncode == 0, proc.stderr
        ckpt = tmp_path / "train" / "checkpoint_final"
        assert (ckpt / "manifest.json").exists()

        eval_cfg = dict(MICRO_EXPERIMENT)
        eval_cfg["domain"] = str(tmp_path / "train" / "data")
        eval_cfg["checkpoint"] = str(ckpt)
        eval_cfg["mode"] = "frozen"
        eval_path = tmp_path / "eval.yaml"
        eval_path.write_text(yaml.safe_dump(eval_cfg))
        proc = self._run("evaluate", "--config", str(eval_path),
                         "--out", str(tmp_path / "eval"))
        assert proc.returncode == 0, proc.stderr
        assert (tmp_path / "eval" / "report_eval.csv").exists()

        ft_cfg = {
            "checkpoint": str(ckpt),
            "floating": str(tmp_path / "train" / "data" / "images" / "p000_v1.png"),
            "reference": str(tmp_path / "train" / "data" / "images" / "p000_v0.png"),
            "finetune": {"max_iters": 2},
        }
        ft_path = tmp_path / "ft.yaml"
        ft_path.write_text(yaml.safe_dump(ft_cfg))
        proc = self._run("finetune", "--config", str(ft_path),
                         "--out", str(tmp_path / "ft"))
        assert proc.returncode == 0, proc.stderr
        assert (tmp_path / "ft" / "loss_trace.csv").exists()

        proc = self._run("report", "--config", str(cfg_path),
                         "--out", str(tmp_path / "report"))
        assert proc.returncode == 0, proc.stderr
        assert (tmp_path / "report" / "report_source.csv").exists()
        assert (tmp_path / "report" / "experiment.json").exists()
