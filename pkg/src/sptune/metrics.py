"""PSNR / SSIM under the usual SR-benchmark conventions and Table-style reports."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# BT.601 studio swing, inputs in [0, 1], output on the 0-255 scale
Y_COEFFS = (65.481, 128.553, 24.966)

CSV_COLUMNS = ("method", "task", "param", "dataset", "n_images", "psnr_db", "ssim", "delta_db", "source")

# Reported numbers, kept for context next to desk-scale measurements.
REPORTED_ROWS = [
    # (method, task, param, dataset, psnr, delta)
    ("ART", "sr", 2, "Average", 35.8269, None),
    ("ART+SPT", "sr", 2, "Average", 35.8724, 0.0454),
    ("ART", "sr", 3, "Average", 31.7925, None),
    ("ART+SPT", "sr", 3, "Average", 31.8607, 0.0682),
    ("ART", "sr", 4, "Urban100", 27.7747, None),
    ("ART+SPT", "sr", 4, "Urban100", 28.1717, 0.3970),
    ("ART", "sr", 4, "Average", 29.4792, None),
    ("ART+SPT", "sr", 4, "Average", 29.7052, 0.2260),
    ("ART", "denoise", 15, "Average", 35.0672, None),
    ("ART+SPT", "denoise", 15, "Average", 35.0717, 0.0044),
    ("ART", "denoise", 25, "Average", 32.7202, None),
    ("ART+SPT", "denoise", 25, "Average", 32.7844, 0.0642),
    ("ART", "denoise", 50, "Average", 29.6609, None),
    ("ART+SPT", "denoise", 50, "Average", 29.6656, 0.0046),
]


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """[3, H, W] RGB in [0, 1] -> [1, H, W] luma on the 0-255 scale (range 16..235)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"rgb_to_y needs [3,H,W], got {img.shape}")
    r, g, b = img
    return (16.0 + Y_COEFFS[0] * r + Y_COEFFS[1] * g + Y_COEFFS[2] * b)[None]


def quantize(img: np.ndarray) -> np.ndarray:
    """[0, 1] floats -> 8-bit levels (returned as float64 in 0..255)."""
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255)


def _prepare(a: np.ndarray, b: np.ndarray, mode: str, quantized: bool) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    a255 = quantize(a) if quantized else np.asarray(a, dtype=np.float64) * 255.0
    b255 = quantize(b) if quantized else np.asarray(b, dtype=np.float64) * 255.0
    if mode == "y":
        return rgb_to_y(a255 / 255.0), rgb_to_y(b255 / 255.0)
    if mode == "rgb":
        return a255, b255
    raise ValueError(f"mode must be 'y' or 'rgb', got {mode!r}")


def psnr(a: np.ndarray, b: np.ndarray, mode: str = "rgb", quantized: bool = True) -> float:
    """PSNR in dB of two [3, H, W] images in [0, 1]; +inf when they are identical.

    ``quantized=False`` skips 8-bit rounding; such values are not comparable to
    benchmark numbers.
    """
    x, y = _prepare(a, b, mode, quantized)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = g.size
    x = sliding_window_view(x, n, axis=0) @ g
    return sliding_window_view(x, n, axis=1) @ g


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 255.0, win: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM of two single-channel [H, W] images over valid Gaussian windows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError("ssim expects a single-channel [H, W] image")
    if min(a.shape) < win:
        raise ValueError(f"image {a.shape} smaller than the {win}x{win} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    g = gaussian_window(win, sigma)
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def image_ssim(a: np.ndarray, b: np.ndarray, mode: str = "rgb", quantized: bool = True) -> float:
    """SSIM on Y (mode 'y') or the mean over R, G, B (mode 'rgb')."""
    x, y = _prepare(a, b, mode, quantized)
    return float(np.mean([ssim(xc, yc) for xc, yc in zip(x, y)]))


def mode_for(task: str) -> str:
    return "y" if task == "sr" else "rgb"


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, method: str, task: str, param, dataset: str, n_images: int, psnr_db: float,
            ssim_val: float | None, delta_db: float | None, source: str = "measured") -> dict:
        row = {"method": method, "task": task, "param": param, "dataset": dataset, "n_images": n_images,
               "psnr_db": psnr_db, "ssim": ssim_val, "delta_db": delta_db, "source": source}
        self.rows.append(row)
        return row

    def add_reported_rows(self, task: str | None = None) -> None:
        for method, t, param, dataset, p, d in REPORTED_ROWS:
            if task is None or t == task:
                self.add(method, t, param, dataset, 0, p, None, d, "paper-reported")

    def measured(self) -> list[dict]:
        return [r for r in self.rows if r["source"] == "measured"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _fmt(r[k]) for k in CSV_COLUMNS})
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = ["| Method | Task | Scale/σ | Dataset | PSNR | Δ | SSIM | Source |",
                 "|---|---|---|---|---|---|---|---|"]
        for r in self.rows:
            label = f"×{r['param']}" if r["task"] == "sr" else f"{r['param']}"
            delta = "-" if r["delta_db"] is None else f"{r['delta_db']:+.4f}"
            ssim_s = "-" if r["ssim"] is None else f"{r['ssim']:.4f}"
            lines.append(f"| {r['method']} | {r['task']} | {label} | {r['dataset']} | {r['psnr_db']:.4f} | "
                         f"{delta} | {ssim_s} | {r['source']} |")
        return "\n".join(lines) + "\n"


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.6f}"
    return v


def per_image_metrics(outputs: Sequence[np.ndarray], targets: Sequence[np.ndarray], task: str
                      ) -> tuple[list[float], list[float]]:
    mode = mode_for(task)
    ps = [psnr(o, t, mode) for o, t in zip(outputs, targets)]
    ss = [image_ssim(o, t, mode) for o, t in zip(outputs, targets)]
    return ps, ss
