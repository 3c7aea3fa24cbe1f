import os
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, PositiveInt, ValidationError, field_validator

from services.errors import ConfigError
from services.sampler import PDEFamily, ScenarioKind

load_dotenv()

_LOG_LEVELS = {'CRITICAL', 'ERROR', 'WARNING', 'INFO', 'DEBUG'}


class Config:
    BASE_DIR = os.path.dirname(os.path.abspath(__file__))

    STRESSLAB_SEED = os.environ.get('STRESSLAB_SEED', '0')
    STRESSLAB_JOBS = os.environ.get('STRESSLAB_JOBS', '1')
    STRESSLAB_LOG_DIR = os.environ.get('STRESSLAB_LOG_DIR', os.path.join(BASE_DIR, 'logs'))
    STRESSLAB_CAMPAIGN_DIR = os.environ.get('STRESSLAB_CAMPAIGN_DIR', os.path.join(BASE_DIR, 'campaign'))
    LOG_LEVEL = os.environ.get('LOG_LEVEL', 'INFO')

    @classmethod
    def seed_offset(cls) -> int:
        return int(cls.STRESSLAB_SEED)

    @classmethod
    def jobs(cls) -> int:
        return max(1, int(cls.STRESSLAB_JOBS))

    @classmethod
    def validate_config(cls):
        bad = []
        for key in ('STRESSLAB_SEED', 'STRESSLAB_JOBS'):
            value = getattr(cls, key)
            try:
                if int(value) < 0:
                    bad.append(f"{key}={value!r} (negative)")
            except (TypeError, ValueError):
                bad.append(f"{key}={value!r} (not an integer)")
        if str(cls.LOG_LEVEL).upper() not in _LOG_LEVELS:
            bad.append(f"LOG_LEVEL={cls.LOG_LEVEL!r} (unknown level)")
        if bad:
            raise ConfigError(f"Invalid environment variables: {', '.join(bad)}")
        return True


# ---------- campaign file ----------

class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')


class SeedsSection(_Section):
    count: PositiveInt = 10
    base: int = 0


class DatasetsSection(_Section):
    pdes: List[PDEFamily] = Field(default_factory=lambda: list(PDEFamily))
    n_train: PositiveInt = 400
    n_test: PositiveInt = 50
    problems: Dict[PDEFamily, Dict[str, Any]] = Field(default_factory=dict)


class TrainingSection(_Section):
    modes: PositiveInt = 16
    width: PositiveInt = 32
    n_layers: PositiveInt = 4
    hidden: PositiveInt = 128
    activation: Literal['gelu', 'identity'] = 'gelu'
    lr: float = 1e-3
    batch_size: PositiveInt = 20
    max_epochs: PositiveInt = 150
    patience: PositiveInt = 20
    val_fraction: float = 0.1
    log_every: PositiveInt = 10


class ScenariosSection(_Section):
    kinds: List[ScenarioKind] = Field(default_factory=lambda: list(ScenarioKind))
    n_instances: PositiveInt = 20
    n_draws: PositiveInt = 5
    rel_amplitude: float = 0.02
    spectral_bins: PositiveInt = 8
    include_controls: bool = False

    @field_validator('rel_amplitude')
    @classmethod
    def _amplitude(cls, v: float) -> float:
        if not 0.0 < v <= 0.1:
            raise ValueError('rel_amplitude must lie in (0, 0.1]')
        return v


class ReportSection(_Section):
    color_scale: Literal['log', 'linear'] = 'log'


class CampaignConfig(_Section):
    campaign_dir: Optional[str] = None
    seeds: SeedsSection = SeedsSection()
    datasets: DatasetsSection = DatasetsSection()
    training: TrainingSection = TrainingSection()
    scenarios: ScenariosSection = ScenariosSection()
    report: ReportSection = ReportSection()

    def model_seeds(self, offset: Optional[int] = None) -> List[int]:
        offset = Config.seed_offset() if offset is None else offset
        return [self.seeds.base + i + offset for i in range(self.seeds.count)]

    def root(self) -> Path:
        return Path(self.campaign_dir or Config.STRESSLAB_CAMPAIGN_DIR)


def load_campaign_config(path: Union[str, Path]) -> CampaignConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding='utf-8'))
    except OSError as e:
        raise ConfigError(f"cannot read campaign config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    try:
        cfg = CampaignConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid campaign config {path}: {e}") from e
    logging.getLogger(__name__).info(
        f"Loaded campaign config {path}: {len(cfg.datasets.pdes)} PDEs, {cfg.seeds.count} seeds")
    return cfg
