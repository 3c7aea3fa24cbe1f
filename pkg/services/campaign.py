"""
Campaign orchestration: dataset generation, multi-seed training, stress runs
and the figure bundle.

Work units are fanned out to a bounded process pool; only the scheduler
process writes to the results journal and the campaign-level CSV/JSON files.
"""
import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import CampaignConfig
from services.diagnostics import CellSummary, GrowthCurve, error_growth_curve, heatmap_matrix, summarize_cells
from services.errors import CompletenessError, InsufficientSeedsError, NothingToReportError, StressLabError
from services.fno import FNOConfig, save_checkpoint
from services.problems import ProblemSettings, in_channels, out_channels, problem_settings, solve_instance
from services.results_journal import RECORD_COLUMNS, ResultsJournal
from services.sampler import (
    IN_DIST, DatasetManifest, PDEFamily, ScenarioKind, derive_seed, sample_instance, save_instance, write_manifest,
)
from services.stress_harness import ScenarioOutcome, StressHarness, StressScenario, is_applicable
from services.svg_report import emit_report
from services.trainer import TrainConfig, TrainReport, dataset_from_manifest, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3


class CampaignPaths:
    def __init__(self, root: Path):
        self.root = Path(root)

    def dataset_dir(self, pde: PDEFamily, seed: int, split: str) -> Path:
        return self.root / "datasets" / pde.value / f"seed{seed}" / split

    def manifest(self, pde: PDEFamily, seed: int, split: str) -> Path:
        return self.dataset_dir(pde, seed, split) / "manifest.json"

    def checkpoint_stem(self, pde: PDEFamily, seed: int) -> Path:
        return self.root / "checkpoints" / pde.value / f"seed{seed}" / "model"

    def train_report(self, pde: PDEFamily, seed: int) -> Path:
        return self.root / "checkpoints" / pde.value / f"seed{seed}" / "train_report.json"

    def outcome(self, pde: PDEFamily, seed: int, kind: ScenarioKind) -> Path:
        return self.root / "results" / "outcomes" / pde.value / f"seed{seed}" / f"{kind.value}.json"

    @property
    def journal(self) -> Path:
        return self.root / "results" / "journal.db"

    @property
    def records_csv(self) -> Path:
        return self.root / "results" / "records.csv"

    @property
    def summary_json(self) -> Path:
        return self.root / "results" / "summary.json"

    @property
    def report_dir(self) -> Path:
        return self.root / "report"


def _fan_out(fn: Callable[..., Any], jobs_args: Sequence[Tuple], jobs: int, deterministic: bool) -> List[Any]:
    """Run fn over every argument tuple; results come back in submission order."""
    if not jobs_args:
        return []
    if jobs <= 1 or deterministic:
        return [fn(*args) for args in jobs_args]
    results: List[Any] = [None] * len(jobs_args)
    with ProcessPoolExecutor(max_workers=min(jobs, len(jobs_args))) as pool:
        futures = {pool.submit(fn, *args): i for i, args in enumerate(jobs_args)}
        for fut in as_completed(futures):
            results[futures[fut]] = fut.result()
    return results


def _selected(cfg: CampaignConfig, pde: Optional[str]) -> List[PDEFamily]:
    pdes = list(cfg.datasets.pdes)
    if pde is not None:
        pdes = [p for p in pdes if p == PDEFamily(pde)]
    return pdes


def _settings(cfg: CampaignConfig, pde: PDEFamily) -> ProblemSettings:
    return problem_settings(pde, cfg.datasets.problems.get(pde))


# ---------- workers (module level so they pickle) ----------

def _generate_job(pde: PDEFamily, model_seed: int, split: str, n: int,
                  settings: ProblemSettings, directory: Path) -> Path:
    entries = []
    for i in range(n):
        instance = sample_instance(pde, IN_DIST, derive_seed(model_seed, split, i), settings, model_seed)
        entries.append(save_instance(instance, directory, f"{i:05d}", solve_instance(instance, settings)))
    manifest = DatasetManifest(pde=pde, model_seed=model_seed, split=split,
                               settings=settings.model_dump(mode="json"), entries=entries)
    path = directory / "manifest.json"
    write_manifest(path, manifest)
    return path


def _model_config(cfg: CampaignConfig, settings: ProblemSettings) -> FNOConfig:
    grid = settings.grid()
    t = cfg.training
    return FNOConfig(dims=len(grid.sizes), modes=min(t.modes, min(grid.sizes) // 2), width=t.width,
                     n_layers=t.n_layers, hidden=t.hidden, in_channels=in_channels(settings.pde),
                     out_channels=out_channels(settings.pde), complex_output=settings.pde == PDEFamily.NLS,
                     activation=t.activation)


def _train_job(cfg: CampaignConfig, pde: PDEFamily, model_seed: int, paths: CampaignPaths) -> Dict[str, Any]:
    settings = _settings(cfg, pde)
    t = cfg.training
    try:
        data = dataset_from_manifest(paths.manifest(pde, model_seed, "train"), settings)
        test = dataset_from_manifest(paths.manifest(pde, model_seed, "test"), settings)
        train_cfg = TrainConfig(lr=t.lr, batch_size=t.batch_size, max_epochs=t.max_epochs, patience=t.patience,
                                val_fraction=t.val_fraction, n_train=len(data), seed=model_seed,
                                log_every=t.log_every)
        params, report = train(_model_config(cfg, settings), train_cfg, data, test)
    except (StressLabError, OSError, ValueError) as e:
        logger.warning(f"Training {pde.value} seed {model_seed} failed: {e}")
        return {"status": "failed", "detail": str(e)}
    normalization = {"feature": settings.feature.model_dump() if settings.feature else None}
    save_checkpoint(paths.checkpoint_stem(pde, model_seed), params, seed=model_seed, pde=pde.value,
                    grid=settings.grid(), horizon=settings.horizon, normalization=normalization)
    report.save(paths.train_report(pde, model_seed))
    return {"status": "done", "detail": f"E_base={report.e_base:.6e}"}


def _scenario(cfg: CampaignConfig, pde: PDEFamily, kind: ScenarioKind, settings: ProblemSettings) -> StressScenario:
    sc = cfg.scenarios
    scenario = StressScenario.default(pde, kind, settings, n_instances=sc.n_instances, n_draws=sc.n_draws)
    if kind == ScenarioKind.PERTURBATION:
        return scenario.model_copy(update={"settings": (sc.rel_amplitude,)})
    if sc.include_controls and kind == ScenarioKind.PARAM_SHIFT and settings.param_control is not None:
        return scenario.model_copy(update={"settings": (settings.param_control,) + scenario.settings})
    if sc.include_controls and kind == ScenarioKind.BOUNDARY_SHIFT:
        return scenario.model_copy(update={"settings": ("in_dist",) + scenario.settings})
    return scenario


def _stress_job(cfg: CampaignConfig, pde: PDEFamily, model_seed: int, kind: ScenarioKind,
                paths: CampaignPaths, e_base: float) -> Dict[str, Any]:
    settings = _settings(cfg, pde)
    try:
        harness = StressHarness(paths.checkpoint_stem(pde, model_seed), settings, model_seed=model_seed,
                                spectral_bins=cfg.scenarios.spectral_bins)
        outcome = harness.run_scenario(_scenario(cfg, pde, kind, settings), e_base)
    except (StressLabError, OSError, ValueError) as e:
        logger.warning(f"Stress {pde.value}/{kind.value} seed {model_seed} failed: {e}")
        return {"status": "failed", "detail": str(e)}
    return {"status": "done", "outcome": outcome}


# ---------- commands ----------

def cmd_generate(cfg: CampaignConfig, *, jobs: int = 1, deterministic: bool = False,
                 pde: Optional[str] = None) -> int:
    paths = CampaignPaths(cfg.root())
    journal = ResultsJournal(paths.journal)
    units = []
    for family in _selected(cfg, pde):
        settings = _settings(cfg, family)
        for seed in cfg.model_seeds():
            if journal.task_status("generate", family.value, seed) == "done" and \
                    all(paths.manifest(family, seed, s).exists() for s in ("train", "test")):
                logger.info(f"Datasets for {family.value} seed {seed} already present, skipping")
                continue
            units.append((family, seed, settings))

    jobs_args = []
    for family, seed, settings in units:
        for split, n in (("train", cfg.datasets.n_train), ("test", cfg.datasets.n_test)):
            jobs_args.append((family, seed, split, n, settings, paths.dataset_dir(family, seed, split)))
    _fan_out(_generate_job, jobs_args, jobs, deterministic)
    for family, seed, _ in units:
        journal.mark_task("generate", family.value, seed, "done")
    logger.info(f"Generated datasets for {len(units)} (pde, seed) pairs under {paths.root}")
    return EXIT_OK


def cmd_train(cfg: CampaignConfig, *, jobs: int = 1, deterministic: bool = False,
              pde: Optional[str] = None) -> int:
    paths = CampaignPaths(cfg.root())
    journal = ResultsJournal(paths.journal)
    jobs_args = []
    for family in _selected(cfg, pde):
        for seed in cfg.model_seeds():
            if journal.task_status("train", family.value, seed) == "done" and \
                    paths.checkpoint_stem(family, seed).with_suffix(".bin").exists():
                logger.info(f"{family.value} seed {seed} already trained, skipping")
                continue
            jobs_args.append((cfg, family, seed, paths))

    failures = 0
    for args, result in zip(jobs_args, _fan_out(_train_job, jobs_args, jobs, deterministic)):
        _, family, seed, _ = args
        journal.mark_task("train", family.value, seed, result["status"], result["detail"])
        if result["status"] != "done":
            failures += 1
    logger.info(f"Trained {len(jobs_args) - failures} of {len(jobs_args)} models")
    return EXIT_PARTIAL if failures else EXIT_OK


def _write_records_csv(journal: ResultsJournal, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECORD_COLUMNS)
        for row in journal.fetch_records():
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in RECORD_COLUMNS])


def _write_summary(journal: ResultsJournal, path: Path) -> List[CellSummary]:
    summaries = summarize_cells(journal.degradation_records())
    payload = [s.model_dump(mode="json") for s in summaries]
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summaries


def cmd_stress(cfg: CampaignConfig, *, jobs: int = 1, deterministic: bool = False,
               pde: Optional[str] = None, scenario: Optional[str] = None) -> int:
    paths = CampaignPaths(cfg.root())
    journal = ResultsJournal(paths.journal)
    kinds = [k for k in cfg.scenarios.kinds if scenario is None or k == ScenarioKind(scenario)]
    missing: List[str] = []
    jobs_args = []
    for family in _selected(cfg, pde):
        for seed in cfg.model_seeds():
            stem = paths.checkpoint_stem(family, seed)
            report_path = paths.train_report(family, seed)
            if not stem.with_suffix(".bin").exists() or not report_path.exists():
                missing.append(f"{family.value}/seed{seed}")
                continue
            e_base = TrainReport.load(report_path).e_base
            for kind in kinds:
                if not is_applicable(family, kind):
                    continue
                if journal.task_status(f"stress:{kind.value}", family.value, seed) == "done":
                    continue
                jobs_args.append((cfg, family, seed, kind, paths, e_base))
    if missing:
        logger.warning(f"Missing checkpoints, skipped: {', '.join(missing)}")

    failures = 0
    for args, result in zip(jobs_args, _fan_out(_stress_job, jobs_args, jobs, deterministic)):
        _, family, seed, kind, _, _ = args
        task = f"stress:{kind.value}"
        if result["status"] != "done":
            failures += 1
            journal.mark_task(task, family.value, seed, "failed", result["detail"])
            continue
        outcome: ScenarioOutcome = result["outcome"]
        journal.add_record(outcome.record)
        journal.add_instances(family.value, kind.value, seed, outcome.artifacts)
        out_path = paths.outcome(family, seed, kind)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(outcome.model_dump_json(indent=2) + "\n", encoding="utf-8")
        journal.mark_task(task, family.value, seed, "done", f"D={outcome.record.d:.6e}")

    _write_records_csv(journal, paths.records_csv)
    summaries = _write_summary(journal, paths.summary_json)
    logger.info(f"Stress runs: {len(jobs_args) - failures} of {len(jobs_args)} tasks completed; "
                f"{len(summaries)} summary cells")
    return EXIT_PARTIAL if failures or missing else EXIT_OK


def _load_outcomes(paths: CampaignPaths, kind: ScenarioKind) -> Dict[PDEFamily, List[ScenarioOutcome]]:
    found: Dict[PDEFamily, List[ScenarioOutcome]] = {}
    for path in sorted((paths.root / "results" / "outcomes").glob(f"*/seed*/{kind.value}.json")):
        try:
            outcome = ScenarioOutcome.model_validate_json(path.read_text(encoding="utf-8"))
        except ValueError as e:
            logger.warning(f"Skipping unreadable outcome {path}: {e}")
            continue
        found.setdefault(outcome.record.pde, []).append(outcome)
    return found


def _mean_profiles(outcomes: List[ScenarioOutcome]) -> Optional[Tuple[List[float], List[float], Optional[float]]]:
    """Seed-average of the finest-setting error spectrum."""
    profiles = [o.profiles[-1] for o in outcomes if o.profiles and not o.profiles[-1].degenerate]
    if not profiles:
        return None
    edges = profiles[0].bin_edges
    same = [p for p in profiles if p.bin_edges == edges]
    energies = np.mean([p.energies for p in same], axis=0)
    return list(edges), [float(e) for e in energies], outcomes[0].train_nyquist


def cmd_report(cfg: CampaignConfig) -> int:
    paths = CampaignPaths(cfg.root())
    if not paths.summary_json.exists():
        raise NothingToReportError(f"no summary at {paths.summary_json}; run the stress command first")
    summaries = [CellSummary.model_validate(s) for s in json.loads(paths.summary_json.read_text(encoding="utf-8"))]
    if not summaries:
        raise NothingToReportError(f"{paths.summary_json} holds no cells")

    code = EXIT_OK
    try:
        matrix = heatmap_matrix(summaries)
    except CompletenessError as e:
        logger.warning(f"Heatmap not drawn: {e}")
        matrix, code = None, EXIT_PARTIAL

    profiles = {}
    for family, outcomes in _load_outcomes(paths, ScenarioKind.RESOLUTION_SHIFT).items():
        mean = _mean_profiles(outcomes)
        if mean is not None:
            profiles[family.value] = mean

    curves: Dict[str, GrowthCurve] = {}
    for family, outcomes in _load_outcomes(paths, ScenarioKind.ROLLOUT).items():
        try:
            curves[family.value] = error_growth_curve([o.curve for o in outcomes if o.curve is not None])
        except InsufficientSeedsError as e:
            logger.warning(f"No growth curve for {family.value}: {e}")

    emit_report(paths.report_dir, summaries, matrix, profiles, curves, cfg.report.color_scale)
    return code
