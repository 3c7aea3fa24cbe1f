"""
Supervised training of the operator on generated datasets.

Loss is the batch mean of per-sample relative L2 errors (quadrature-weighted),
optimized with Adam under a cosine schedule; the best-validation weights are
restored at the end.
"""
import json
import logging
import math
import time
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, PositiveFloat, PositiveInt, model_validator

from services.errors import ContractError, DegenerateNormError, ScenarioMismatchError, TrainingFailureError
from services.fno import FNOConfig, FNOParams, backward_batch, flatten, forward, forward_batch, init_params, unflatten
from services.grid_core import Field, GridSpec, rel_l2_error
from services.problems import ProblemSettings, encode_input
from services.sampler import load_instance, read_manifest

logger = logging.getLogger(__name__)

DIVERGENCE_LOSS = 1e6


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    lr: PositiveFloat = 1e-3
    batch_size: PositiveInt = 20
    max_epochs: PositiveInt = 150
    patience: PositiveInt = 20
    val_fraction: float = 0.1
    n_train: PositiveInt = 400
    seed: int = 0
    final_lr_fraction: float = 0.1
    log_every: PositiveInt = 10

    @model_validator(mode="after")
    def _check(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if not 0.0 < self.final_lr_fraction <= 1.0:
            raise ValueError("final_lr_fraction must lie in (0, 1]")
        return self


class TrainReport(BaseModel):
    train_losses: List[float]
    val_losses: List[float]
    best_epoch: int
    best_val_loss: float
    wall_time: float
    stopped_early: bool = False
    e_base: Optional[float] = None
    test_errors: List[float] = []

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.model_dump(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TrainReport":
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))


class Dataset(BaseModel):
    """Encoded model inputs and real-channel targets on one grid."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    grid: GridSpec
    inputs: np.ndarray
    targets: np.ndarray
    seeds: List[int]

    @model_validator(mode="after")
    def _check(self):
        if self.inputs.shape[0] != self.targets.shape[0] or self.inputs.shape[0] != len(self.seeds):
            raise ValueError("inputs, targets and seeds disagree on the sample count")
        return self

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def pairs(self) -> List[Tuple[Field, Field]]:
        return [(Field(grid=self.grid, values=x), Field(grid=self.grid, values=y))
                for x, y in zip(self.inputs, self.targets)]


def dataset_from_manifest(path: Union[str, Path], settings: ProblemSettings,
                          require_in_dist: bool = True) -> Dataset:
    path = Path(path)
    manifest = read_manifest(path)
    xs, ys, seeds = [], [], []
    for entry in manifest.entries:
        if require_in_dist and entry.regime.kind is not None:
            raise ScenarioMismatchError(f"{path}: training manifests hold in-distribution instances only")
        instance, target = load_instance(entry, path.parent, manifest.pde)
        if target is None:
            raise ContractError(f"{path}: instance {entry.seed} has no ground-truth target")
        xs.append(encode_input(instance, settings).values)
        ys.append(target.values)
        seeds.append(entry.seed)
    if not xs:
        raise ContractError(f"{path}: manifest lists no instances")
    grid = settings.grid()
    return Dataset(grid=grid, inputs=np.stack(xs), targets=np.stack(ys), seeds=seeds)


class Adam:
    def __init__(self, size: int, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grads
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (grads * grads)
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        return params - (lr / bc1) * self.m / (np.sqrt(self.v / bc2) + self.epsilon)


def cosine_lr(cfg: TrainConfig, epoch: int) -> float:
    """Cosine decay from lr (epoch 1) to final_lr_fraction * lr (last epoch)."""
    progress = (epoch - 1) / max(cfg.max_epochs - 1, 1)
    floor = cfg.final_lr_fraction
    return cfg.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress)))


def relative_l2_loss(pred: np.ndarray, target: np.ndarray, weights: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean per-sample weighted relative L2 error and its gradient w.r.t. pred."""
    axes = tuple(range(1, pred.ndim))
    diff = pred - target
    err = np.sqrt(np.sum(weights * diff * diff, axis=axes))
    ref = np.sqrt(np.sum(weights * target * target, axis=axes))
    if np.any(ref == 0.0):
        raise DegenerateNormError("a training target has zero norm")
    n = pred.shape[0]
    shape = (n,) + (1,) * (pred.ndim - 1)
    safe = np.where(err > 0, err, 1.0)
    grad = np.where((err > 0).reshape(shape), weights * diff / (safe * ref).reshape(shape), 0.0) / n
    return float(np.mean(err / ref)), grad


def _mean_loss(params: FNOParams, data: Dataset, idx: np.ndarray, weights: np.ndarray, batch: int) -> float:
    total = 0.0
    for start in range(0, idx.size, batch):
        rows = idx[start:start + batch]
        out, _ = forward_batch(params, data.inputs[rows])
        loss, _ = relative_l2_loss(out, data.targets[rows], weights)
        total += loss * rows.size
    return total / idx.size


def train(model_cfg: FNOConfig, train_cfg: TrainConfig, data: Dataset,
          test: Optional[Dataset] = None) -> Tuple[FNOParams, TrainReport]:
    if len(data) < 2:
        raise ContractError("training needs at least two samples (one for validation)")
    started = time.perf_counter()
    rng = np.random.default_rng(train_cfg.seed)
    order = rng.permutation(len(data))
    n_val = min(max(1, int(round(train_cfg.val_fraction * len(data)))), len(data) - 1)
    val_idx, train_idx = np.sort(order[:n_val]), order[n_val:]

    weights = data.grid.quadrature_weights()[None, None]
    params = init_params(model_cfg, train_cfg.seed)
    flat = flatten(params)
    adam = Adam(flat.size)
    best_flat, best_val, best_epoch = flat.copy(), math.inf, 0
    train_losses: List[float] = []
    val_losses: List[float] = []
    stale = 0
    logger.info(f"Training {params.count} parameters on {train_idx.size} samples ({n_val} for validation)")

    for epoch in range(1, train_cfg.max_epochs + 1):
        lr = cosine_lr(train_cfg, epoch)
        shuffled = rng.permutation(train_idx)
        running = 0.0
        for start in range(0, shuffled.size, train_cfg.batch_size):
            rows = shuffled[start:start + train_cfg.batch_size]
            current = unflatten(model_cfg, flat)
            out, cache = forward_batch(current, data.inputs[rows])
            loss, g_out = relative_l2_loss(out, data.targets[rows], weights)
            if not math.isfinite(loss) or loss > DIVERGENCE_LOSS:
                raise TrainingFailureError(epoch, loss)
            grads, _ = backward_batch(current, cache, g_out)
            flat = adam.step(flat, flatten(grads), lr)
            running += loss * rows.size

        val_loss = _mean_loss(unflatten(model_cfg, flat), data, val_idx, weights, train_cfg.batch_size)
        if not math.isfinite(val_loss) or val_loss > DIVERGENCE_LOSS:
            raise TrainingFailureError(epoch, val_loss)
        train_losses.append(running / shuffled.size)
        val_losses.append(val_loss)

        if val_loss < best_val:
            best_flat, best_val, best_epoch, stale = flat.copy(), val_loss, epoch, 0
        else:
            stale += 1
        if epoch % train_cfg.log_every == 0 or epoch == 1:
            logger.info(f"epoch {epoch}: train {train_losses[-1]:.4e} val {val_loss:.4e} lr {lr:.2e}")
        if stale >= train_cfg.patience:
            logger.info(f"Early stop at epoch {epoch}; best epoch {best_epoch} (val {best_val:.4e})")
            break

    best = unflatten(model_cfg, best_flat)
    report = TrainReport(train_losses=train_losses, val_losses=val_losses, best_epoch=best_epoch,
                         best_val_loss=best_val, wall_time=time.perf_counter() - started,
                         stopped_early=len(val_losses) < train_cfg.max_epochs)
    if test is not None:
        errors = evaluate(best, test.pairs())
        report = report.model_copy(update={"test_errors": errors, "e_base": float(np.mean(errors))})
        logger.info(f"Baseline test error E_base = {report.e_base:.4e} over {len(errors)} instances")
    return best, report


def evaluate(params: FNOParams, samples: Sequence[Tuple[Field, Field]]) -> List[float]:
    """Relative L2 error of the model on each (input, target) pair."""
    errors = []
    for x, y in samples:
        if x.channels != params.config.in_channels or y.channels != params.config.out_channels:
            raise ContractError("sample channels do not match the model")
        errors.append(rel_l2_error(forward(params, x), y))
    return errors
