"""Dataset-level evaluation of restored images against ground truth."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .backbone import Backbone
from .data import DatasetPair
from .metrics import EvalReport, per_image_metrics
from .spt import TunedModel
from .train import predict


@dataclass
class ImageScores:
    psnr: list[float]
    ssim: list[float]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))


def score(model: Backbone | TunedModel, pairs: Sequence[DatasetPair]) -> ImageScores:
    if isinstance(model, TunedModel) and any(p.masks is None for p in pairs):
        raise ValueError("model has SPT units but some pairs have no masks")
    task = pairs[0].degradation["task"]
    outputs = [predict(model, p) for p in pairs]
    ps, ss = per_image_metrics(outputs, [p.gt for p in pairs], task)
    return ImageScores(ps, ss)


def evaluate(model: Backbone | TunedModel, pairs: Sequence[DatasetPair], baseline: Backbone | TunedModel | None = None,
             method: str = "tuned", baseline_method: str = "baseline", dataset: str = "synthetic",
             metadata: dict | None = None, with_reference_rows: bool = True) -> EvalReport:
    """Average per-image PSNR/SSIM; when a baseline is given, report both and the delta."""
    if not pairs:
        raise ValueError("empty dataset")
    deg = pairs[0].degradation
    task = deg["task"]
    param = deg["r"] if task == "sr" else deg["sigma"]
    report = EvalReport(metadata=dict(metadata or {}))
    report.metadata.setdefault("border_crop", 0)
    report.metadata.setdefault("psnr_domain", "8-bit quantized, " + ("Y (BT.601)" if task == "sr" else "RGB"))
    s = score(model, pairs)
    if baseline is not None:
        b = s if baseline is model else score(baseline, pairs)
        report.add(baseline_method, task, param, dataset, len(pairs), b.mean_psnr, b.mean_ssim, None)
        report.add(method, task, param, dataset, len(pairs), s.mean_psnr, s.mean_ssim, s.mean_psnr - b.mean_psnr)
    else:
        report.add(method, task, param, dataset, len(pairs), s.mean_psnr, s.mean_ssim, None)
    if with_reference_rows:
        report.add_reported_rows(task)
    return report
