import csv
import json

import pytest

import app
from config import CampaignConfig, Config, load_campaign_config
from services import campaign
from services.campaign import (
    EXIT_CONFIG, EXIT_OK, EXIT_PARTIAL, CampaignPaths, cmd_generate, cmd_report, cmd_stress, cmd_train,
)
from services.errors import ConfigError, NothingToReportError
from services.fno import load_checkpoint
from services.results_journal import RECORD_COLUMNS, ResultsJournal
from services.sampler import PDEFamily, ScenarioKind
from services.stress_harness import (
    RolloutCurve, ScenarioOutcome, SettingResult, StressHarness, build_degradation_record,
)
from services.trainer import TrainReport


def _tiny(root, pdes=("ks",), problems=None):
    return {
        "campaign_dir": str(root),
        "seeds": {"count": 2},
        "datasets": {
            "pdes": list(pdes),
            "n_train": 4,
            "n_test": 2,
            "problems": problems or {"ks": {"size": 32, "length": 32.0, "horizon": 0.5}},
        },
        "training": {"modes": 4, "width": 4, "hidden": 8, "n_layers": 2, "max_epochs": 2, "batch_size": 2},
        "scenarios": {"n_instances": 2, "n_draws": 2},
    }


def _write(path, payload):
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def tiny_cfg(tmp_path):
    return CampaignConfig.model_validate(_tiny(tmp_path / "campaign"))


@pytest.fixture(autouse=True)
def log_dir(tmp_path, monkeypatch):
    monkeypatch.setattr(Config, "STRESSLAB_LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.setattr(Config, "STRESSLAB_SEED", "0")


class TestConfig:
    def test_defaults_follow_the_desk_campaign(self):
        cfg = CampaignConfig()
        assert cfg.seeds.count == 10
        assert cfg.datasets.n_train == 400 and cfg.datasets.n_test == 50
        assert cfg.scenarios.rel_amplitude == 0.02
        assert cfg.model_seeds(offset=0) == list(range(10))

    def test_seed_offset(self, tiny_cfg):
        assert tiny_cfg.model_seeds(offset=5) == [5, 6]

    def test_unreadable_or_invalid(self, tmp_path):
        with pytest.raises(ConfigError):
            load_campaign_config(tmp_path / "missing.json")
        (tmp_path / "bad.json").write_text("{", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_campaign_config(tmp_path / "bad.json")
        with pytest.raises(ConfigError):
            load_campaign_config(_write(tmp_path / "x.json", {"seeds": {"count": 0}}))
        with pytest.raises(ConfigError):
            load_campaign_config(_write(tmp_path / "y.json", {"unknown": 1}))
        with pytest.raises(ConfigError):
            load_campaign_config(_write(tmp_path / "z.json", {"scenarios": {"rel_amplitude": 0.5}}))

    def test_environment_validation(self, monkeypatch):
        monkeypatch.setattr(Config, "STRESSLAB_JOBS", "many")
        with pytest.raises(ConfigError, match="STRESSLAB_JOBS"):
            Config.validate_config()


class TestCommandLine:
    def test_usage_errors(self, tmp_path):
        assert app.main(["bogus", "--config", "x.json"]) == EXIT_CONFIG
        assert app.main(["generate"]) == EXIT_CONFIG

    def test_bad_config_file(self, tmp_path):
        assert app.main(["generate", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG

    def test_unknown_family_or_scenario(self, tmp_path):
        path = _write(tmp_path / "c.json", _tiny(tmp_path / "campaign"))
        assert app.main(["generate", "--config", str(path), "--pde", "heat"]) == EXIT_CONFIG
        assert app.main(["stress", "--config", str(path), "--scenario", "everything"]) == EXIT_CONFIG

    def test_report_before_stress(self, tmp_path):
        path = _write(tmp_path / "c.json", _tiny(tmp_path / "campaign"))
        assert app.main(["report", "--config", str(path)]) == EXIT_PARTIAL

    def test_stress_without_checkpoints(self, tmp_path):
        path = _write(tmp_path / "c.json", _tiny(tmp_path / "campaign"))
        assert app.main(["stress", "--config", str(path), "--deterministic"]) == EXIT_PARTIAL


class TestGenerate:
    def test_datasets_are_reproducible(self, tmp_path):
        a = CampaignConfig.model_validate(_tiny(tmp_path / "a"))
        b = CampaignConfig.model_validate(_tiny(tmp_path / "b"))
        assert cmd_generate(a, deterministic=True) == EXIT_OK
        assert cmd_generate(b, jobs=2) == EXIT_OK
        for seed in (0, 1):
            for split in ("train", "test"):
                pa = CampaignPaths(a.root()).dataset_dir(PDEFamily.KS, seed, split)
                pb = CampaignPaths(b.root()).dataset_dir(PDEFamily.KS, seed, split)
                names = sorted(p.name for p in pa.iterdir())
                assert names == sorted(p.name for p in pb.iterdir())
                for name in names:
                    assert (pa / name).read_bytes() == (pb / name).read_bytes()

    def test_second_run_skips_existing_datasets(self, tiny_cfg):
        cmd_generate(tiny_cfg, deterministic=True)
        manifest = CampaignPaths(tiny_cfg.root()).manifest(PDEFamily.KS, 0, "train")
        stamp = manifest.stat().st_mtime_ns
        cmd_generate(tiny_cfg, deterministic=True)
        assert manifest.stat().st_mtime_ns == stamp
        statuses = [r["status"] for r in ResultsJournal(CampaignPaths(tiny_cfg.root()).journal).tasks("generate")]
        assert statuses == ["done", "done"]


class TestPipeline:
    def test_generate_train_stress_report(self, tiny_cfg):
        paths = CampaignPaths(tiny_cfg.root())
        assert cmd_generate(tiny_cfg, deterministic=True) == EXIT_OK
        assert cmd_train(tiny_cfg, deterministic=True) == EXIT_OK

        for seed in (0, 1):
            _, header = load_checkpoint(paths.checkpoint_stem(PDEFamily.KS, seed))
            assert header.seed == seed and header.pde == "ks"
            assert TrainReport.load(paths.train_report(PDEFamily.KS, seed)).e_base > 0
        stamp = paths.checkpoint_stem(PDEFamily.KS, 0).with_suffix(".bin").stat().st_mtime_ns
        assert cmd_train(tiny_cfg, deterministic=True) == EXIT_OK
        assert paths.checkpoint_stem(PDEFamily.KS, 0).with_suffix(".bin").stat().st_mtime_ns == stamp

        assert cmd_stress(tiny_cfg, deterministic=True) == EXIT_OK
        summary = json.loads(paths.summary_json.read_text(encoding="utf-8"))
        assert [(s["pde"], s["scenario"]) for s in summary] == [("ks", "perturbation"), ("ks", "rollout")]
        assert all(s["n"] == 2 and s["ci_low"] <= s["mean"] <= s["ci_high"] for s in summary)
        with open(paths.records_csv, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == RECORD_COLUMNS
        assert len(rows) == 1 + 2 * 2
        assert paths.outcome(PDEFamily.KS, 1, ScenarioKind.ROLLOUT).exists()

        assert cmd_report(tiny_cfg) == EXIT_OK
        for name in ("heatmap.svg", "heatmap.csv", "bars_ks.svg", "bars_ks.csv", "growth_ks.svg"):
            assert (paths.report_dir / name).exists()

    def test_scenario_filter_narrows_the_heatmap(self, tiny_cfg):
        cmd_generate(tiny_cfg, deterministic=True)
        cmd_train(tiny_cfg, deterministic=True)
        assert cmd_stress(tiny_cfg, deterministic=True, scenario="rollout") == EXIT_OK
        assert cmd_report(tiny_cfg) == EXIT_OK
        paths = CampaignPaths(tiny_cfg.root())
        with open(paths.report_dir / "heatmap.csv", newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        assert [r[:2] for r in rows[1:]] == [["ks", "rollout"]]

    def test_incomplete_heatmap_is_a_partial_report(self, tiny_cfg):
        paths = CampaignPaths(tiny_cfg.root())
        paths.summary_json.parent.mkdir(parents=True)
        cells = [{"pde": pde, "scenario": kind, "mean": 1.2, "std": 0.1, "ci_low": 1.1, "ci_high": 1.3, "n": 2}
                 for pde, kind in [("ks", "rollout"), ("nls", "param_shift")]]
        paths.summary_json.write_text(json.dumps(cells), encoding="utf-8")
        assert cmd_report(tiny_cfg) == EXIT_PARTIAL
        assert (paths.report_dir / "bars_nls.csv").exists()
        assert not (paths.report_dir / "heatmap.svg").exists()

    def test_one_bad_seed_does_not_stop_the_campaign(self, tiny_cfg, monkeypatch):
        paths = CampaignPaths(tiny_cfg.root())
        cmd_generate(tiny_cfg, deterministic=True)
        real_train = campaign.train

        def flaky_train(model_cfg, train_cfg, data, test):
            if train_cfg.seed == 0:
                raise ValueError("mis-shaped batch")
            return real_train(model_cfg, train_cfg, data, test)

        monkeypatch.setattr(campaign, "train", flaky_train)
        assert cmd_train(tiny_cfg, deterministic=True) == EXIT_PARTIAL
        journal = ResultsJournal(paths.journal)
        assert journal.task_status("train", "ks", 0) == "failed"
        assert journal.task_status("train", "ks", 1) == "done"

        real_run = StressHarness.run_scenario

        def flaky_run(harness, scenario, e_base):
            if scenario.kind == ScenarioKind.ROLLOUT:
                raise ValueError("invalid outcome")
            return real_run(harness, scenario, e_base)

        monkeypatch.setattr(StressHarness, "run_scenario", flaky_run)
        assert cmd_stress(tiny_cfg, deterministic=True) == EXIT_PARTIAL
        assert journal.task_status("stress:rollout", "ks", 1) == "failed"
        assert journal.task_status("stress:perturbation", "ks", 1) == "done"

    def test_report_with_a_diverged_rollout(self, tiny_cfg):
        paths = CampaignPaths(tiny_cfg.root())
        paths.summary_json.parent.mkdir(parents=True)
        paths.summary_json.write_text(json.dumps([{"pde": "ks", "scenario": "rollout", "mean": 3.0, "std": 0.0,
                                                   "ci_low": 3.0, "ci_high": 3.0, "n": 2}]), encoding="utf-8")
        for seed, late in ((0, None), (1, 0.4), (2, 0.5)):
            settings = [SettingResult(setting_id=0, setting_value="2", error=0.3, n_instances=2)]
            outcome = ScenarioOutcome(
                record=build_degradation_record(settings, 0.1, pde=PDEFamily.KS, scenario=ScenarioKind.ROLLOUT,
                                                seed=seed),
                artifacts=[],
                curve=RolloutCurve(times=[0.5, 1.0, 1.5], mean_errors=[0.1, 0.3, late], counts=[2, 2, int(bool(late))]))
            path = paths.outcome(PDEFamily.KS, seed, ScenarioKind.ROLLOUT)
            path.parent.mkdir(parents=True)
            path.write_text(outcome.model_dump_json(indent=2), encoding="utf-8")
        assert cmd_report(tiny_cfg) == EXIT_OK
        growth = _rows(paths.report_dir / "growth_ks.csv")
        assert float(growth[3][1]) == pytest.approx(0.45)

    def test_report_needs_a_summary(self, tiny_cfg):
        with pytest.raises(NothingToReportError):
            cmd_report(tiny_cfg)


@pytest.mark.slow
class TestSmokeCampaign:
    def test_every_family_end_to_end(self, tmp_path):
        problems = {
            "nls": {"size": 32},
            "ns": {"size": 16, "solver_dt": 0.05},
            "ks": {"size": 32, "length": 32.0},
            "black_scholes": {"size": 33, "solver_dt": 0.01},
            "poisson": {"size": 17},
        }
        path = _write(tmp_path / "c.json", _tiny(tmp_path / "campaign", [p.value for p in PDEFamily], problems))
        for command in ("generate", "train", "stress", "report"):
            assert app.main([command, "--config", str(path), "--deterministic"]) == EXIT_OK
        summary = json.loads((tmp_path / "campaign" / "results" / "summary.json").read_text(encoding="utf-8"))
        assert len(summary) == 18
