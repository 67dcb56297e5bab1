"""Losses, learning-rate schedule and the optimization loop.

The color loss is the batch mean of the squared RGB error of the coarse and
fine renders; the unit-exposure loss pins the tone mapper's value at
log-exposure zero to a known color C0, which is what fixes the per-channel
radiance scale (without it, shifting all log-radiance by k and the mapper by
-k is a free gauge). Total loss = color + lambda_u * unit.
"""

import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor, adam_step, backward
from .errors import InputError, NumericError
from .io import DatasetBundle
from .model import ModelConfig, ToneMapperParams, create_bundle, save_checkpoint, tone_map
from .render import Rays, generate_rays, render_rays, view_pixel_grid
from .util import atomic_write_text

HISTORY_HEADER = "step,lr,loss_total,loss_color_coarse,loss_color_fine,loss_unit"


@dataclass(frozen=True)
class TrainConfig:
    batch_rays: int = 1024
    iterations: int = 20000
    lr_start: float = 5e-4
    lr_end: float = 5e-5
    lambda_u: float = 0.5
    c0: float | list | None = None  # None: dataset-provided value, else 0.5
    seed: int = 0
    n_coarse: int = 32
    n_importance: int = 32
    checkpoint_every: int = 1000
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.batch_rays < 1:
            raise InputError("batch_rays must be >= 1")
        if not (self.lr_start >= self.lr_end > 0):
            raise InputError("need lr_start >= lr_end > 0")
        if self.lambda_u < 0:
            raise InputError("lambda_u must be >= 0")
        if self.iterations < 1:
            raise InputError("iterations must be >= 1")
        if min(self.n_coarse, self.n_importance, self.checkpoint_every) < 1:
            raise InputError("sample counts and checkpoint cadence must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        model = data.pop("model", None)
        known = {f for f in cls.__dataclass_fields__ if f != "model"}
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown train config keys: {sorted(unknown)}")
        return cls(model=ModelConfig(**model) if model else ModelConfig(), **data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    step: int
    lr: float
    coarse: float
    fine: float
    unit: float
    total: float

    def csv_row(self) -> str:
        return f"{self.step},{self.lr!r},{self.total!r},{self.coarse!r},{self.fine!r},{self.unit!r}"


def color_loss(pred_coarse, pred_fine, target):
    """Batch mean of |coarse - target|^2 + |fine - target|^2 over RGB."""
    target = ad.as_tensor(target)
    if target.data.ndim < 1 or target.shape[0] == 0:
        raise InputError("color loss needs a non-empty batch")
    return ad.add(ad.mean_sq_err(pred_coarse, target), ad.mean_sq_err(pred_fine, target))


def unit_exposure_loss(tm: ToneMapperParams, c0):
    """|g(0) - C0|^2 summed over the three channels."""
    c0 = np.broadcast_to(np.asarray(c0, dtype=np.float64), (3,))
    g0 = tone_map(tm, Tensor(np.zeros((1, 3))), 0.0)
    return ad.mean_sq_err(g0, Tensor(c0[None, :]))


def total_loss(color, unit, lambda_u: float):
    """color + lambda_u * unit, on the tape."""
    if lambda_u < 0:
        raise InputError("lambda_u must be >= 0")
    return ad.add(ad.as_tensor(color), ad.mul(Tensor(np.asarray(lambda_u)), unit))


def lr_schedule(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    """Exponential decay from lr_start (step 0) to lr_end (step total_steps)."""
    if total_steps < 1:
        raise InputError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise InputError(f"step {step} outside [0, {total_steps}]")
    return lr_start * (lr_end / lr_start) ** (step / total_steps)


@dataclass
class TrainResult:
    bundle: object
    history: list[LossReport]
    checkpoint_path: str | None
    history_path: str | None


def _resolve_c0(config: TrainConfig, dataset: DatasetBundle) -> np.ndarray:
    if config.c0 is not None:
        return np.broadcast_to(np.asarray(config.c0, dtype=np.float64), (3,)).copy()
    if dataset.c0_gt is not None:
        return np.broadcast_to(np.asarray(dataset.c0_gt, dtype=np.float64), (3,)).copy()
    return np.full(3, 0.5)


def train(
    dataset: DatasetBundle,
    config: TrainConfig,
    out_dir: str | None = None,
    progress=None,
    progress_every: int = 100,
) -> TrainResult:
    """Optimize a fresh model on the dataset's training views.

    Each iteration draws batch_rays (view, pixel) pairs uniformly with
    replacement over all training views, renders coarse+fine LDR predictions
    at each ray's exposure time and takes one Adam step on the total loss.
    Writes periodic checkpoints and a loss-history CSV when out_dir is given;
    a non-finite loss aborts with NumericError, leaving the last periodic
    checkpoint in place.
    """
    train_views = [v for v in dataset.views if v.split == "train"]
    if not train_views:
        raise InputError("dataset has no training views")

    c0 = _resolve_c0(config, dataset)
    bundle = create_bundle(config.model, dataset.bbox_min, dataset.bbox_max, seed=config.seed)
    params = bundle.parameters()
    state = AdamState.for_params(params)
    rng = np.random.default_rng(config.seed)

    # flatten per-view ray geometry and targets once
    origins = np.stack([v.camera.translation for v in train_views])
    all_dirs, all_targets, ln_dts = [], [], []
    for v in train_views:
        rays = generate_rays(v.camera, view_pixel_grid(v.camera), dataset.near, dataset.far)
        all_dirs.append(rays.directions)
        all_targets.append(dataset.load_image(v).reshape(-1, 3))
        ln_dts.append(math.log(v.camera.exposure_time_s))
    dirs = np.stack(all_dirs)  # [views, pixels, 3]
    targets = np.stack(all_targets)
    ln_dts = np.asarray(ln_dts)
    n_pixels = dirs.shape[1]

    ckpt_path = os.path.join(out_dir, "checkpoint.hdrf") if out_dir else None
    hist_path = os.path.join(out_dir, "history.csv") if out_dir else None
    extra = {
        "dataset_meta": dataset.meta,
        "train_config": config.to_dict(),
        "c0": c0.tolist(),
    }

    def write_checkpoint(step):
        if ckpt_path:
            save_checkpoint(ckpt_path, bundle, {**extra, "step": step})

    def write_history(rows):
        if hist_path:
            lines = [HISTORY_HEADER] + [r.csv_row() for r in rows]
            atomic_write_text(hist_path, "\n".join(lines) + "\n")

    history: list[LossReport] = []
    for step in range(config.iterations):
        lr = lr_schedule(step, config.iterations, config.lr_start, config.lr_end)
        v_idx = rng.integers(0, len(train_views), size=config.batch_rays)
        p_idx = rng.integers(0, n_pixels, size=config.batch_rays)
        rays = Rays(origins[v_idx], dirs[v_idx, p_idx], dataset.near, dataset.far)
        target = Tensor(targets[v_idx, p_idx], _validate=False)

        with ad.Tape() as tape:
            res = render_rays(
                bundle, rays, ln_dts[v_idx], rng, mode="ldr",
                n_coarse=config.n_coarse, n_importance=config.n_importance, which="fine",
            )
            mse_c = ad.mean_sq_err(res["coarse"][0], target)
            mse_f = ad.mean_sq_err(res["fine"][0], target)
            color = ad.add(mse_c, mse_f)
            unit = unit_exposure_loss(bundle.tone_mapper, c0)
            loss = total_loss(color, unit, config.lambda_u)

        if not math.isfinite(loss.item()):
            write_history(history)
            raise NumericError(
                f"non-finite loss at step {step}; last-good checkpoint: {ckpt_path or 'none'}"
            )
        backward(tape, loss, params=params)
        adam_step(params, [p.grad for p in params], state, lr)

        report = LossReport(
            step=step, lr=lr, coarse=mse_c.item(), fine=mse_f.item(),
            unit=unit.item(), total=loss.item(),
        )
        history.append(report)
        if progress is not None and (step % progress_every == 0 or step == config.iterations - 1):
            progress(report)
        if (step + 1) % config.checkpoint_every == 0:
            write_checkpoint(step + 1)
            write_history(history)

    write_checkpoint(config.iterations)
    write_history(history)
    return TrainResult(bundle=bundle, history=history, checkpoint_path=ckpt_path, history_path=hist_path)
