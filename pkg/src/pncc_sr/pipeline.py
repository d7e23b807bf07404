"""End-to-end evaluation and the head/input ablation grid."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from .geometry import DepthMap, PointCloud, project_coordinates
from .metrics import EvalReport, aggregate, chamfer, rmse_masked
from .pncc import PnccImage, decode_depth, encode
from .srnet import (
    SrModel,
    TrainConfig,
    assemble_prediction,
    bicubic_baseline,
    init_model,
    param_count,
    super_resolve,
    train,
)
from .synthdata import Sample, build_dataset

log = logging.getLogger(__name__)


def predict(model: SrModel | None, sample: Sample, r: int) -> PnccImage:
    """HR PNCC from the sample's LR depth; ``model=None`` means bicubic.

    The bicubic baseline upsamples depth and re-projects it through the HR
    camera, as a plain depth upsampler would. Its X and Y channels therefore
    do not inherit the sub-pixel shift of the rescaled LR principal point.
    """
    lr = encode(sample.lr_depth, sample.lr_intr, norm=sample.lr.norm)
    if model is None:
        up = bicubic_baseline(lr, sample.hr_intr, r)
        return assemble_prediction("z", up.channels[None, ..., 2], lr.valid, lr.norm, sample.hr_intr, r)
    return super_resolve(model, lr, sample.hr_intr)


def masked_clouds(pred: PnccImage, pred_depth: DepthMap, sample: Sample) -> tuple[PointCloud, PointCloud]:
    """Predicted and ground-truth clouds over pixels valid in both."""
    mask = pred_depth.valid & sample.hr_depth.valid
    pred_pts = pred.norm.unnormalize(pred.channels[mask])
    gt_pts = project_coordinates(sample.hr_depth.data, sample.hr_intr)[mask]
    return PointCloud(pred_pts), PointCloud(gt_pts)


def evaluate_sample(model: SrModel | None, sample: Sample, r: int, timing: bool = False) -> EvalReport:
    t0 = time.perf_counter()
    pred = predict(model, sample, r)
    pred_depth = decode_depth(pred)
    elapsed = time.perf_counter() - t0
    a, b = masked_clouds(pred, pred_depth, sample)
    return EvalReport(
        rmse=rmse_masked(pred_depth, sample.hr_depth),
        chamfer=chamfer(a, b),
        time_total_s=elapsed if timing else None,
        time_per_frame_s=elapsed if timing else None,
        param_count=0 if model is None else param_count(model),
        n_frames=1,
    )


def evaluate(model: SrModel | None, samples, r: int, timing: bool = False, label: str = "aggregate"):
    """Per-frame reports plus one aggregate report (last element)."""
    frames = [replace(evaluate_sample(model, s, r, timing), label=f"frame{i:04d}")
              for i, s in enumerate(samples)]
    return frames + [aggregate(frames, label)]


@dataclass(frozen=True)
class AblationRow:
    head: str
    input: str
    rmse_cm: float
    chamfer: float
    bicubic_rmse_cm: float
    params: int
    final_loss: float

    def to_json(self) -> dict:
        return {
            "head": self.head,
            "input": self.input,
            "rmse_cm": self.rmse_cm,
            "chamfer": self.chamfer,
            "bicubic_rmse_cm": self.bicubic_rmse_cm,
            "params": self.params,
            "final_loss": self.final_loss,
        }


def ablate(r: int, n_train: int, n_eval: int, cfg: TrainConfig, width: int = 128, height: int = 96,
           channels: int = 32, n_layers: int = 6, s: float = 10.0) -> list[AblationRow]:
    """Train and evaluate every {xyz, z} x {pncc, depth} configuration."""
    train_set = build_dataset(n_train, r, cfg.seed, width, height, s)
    eval_set = build_dataset(n_eval, r, cfg.seed + 1, width, height, s)
    base = evaluate(None, eval_set, r)[-1]
    rows = []
    for head in ("xyz", "z"):
        for inp in ("pncc", "depth"):
            c = replace(cfg, head_mode=head, input_mode=inp, r=r)
            model = init_model(head, inp, r, channels, n_layers, seed=cfg.seed)
            model, losses = train(model, train_set, c)
            rep = evaluate(model, eval_set, r)[-1]
            log.info("ablation %s/%s rmse %.4f cm", head, inp, rep.rmse)
            rows.append(AblationRow(head, inp, rep.rmse, rep.chamfer, base.rmse, param_count(model), losses[-1]))
    return rows


def median(values) -> float:
    return float(np.median(np.asarray(list(values), dtype=np.float64)))
