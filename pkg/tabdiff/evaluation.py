"""
Evaluation: Fréchet distance between feature Gaussians of two image sets,
band-level structure adherence of generated tables to their conditioning
annotations, and the detector-ready dataset exporter.
"""
import functools
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from tqdm import tqdm

from tabdiff import numerics as nx
from tabdiff.annotations import (ROW, TableAnnotation, extract_structure, load_voc_dir,
                                 save_image_png, write_voc_xml)
from tabdiff.autoencoder import Conv, to_model_range
from tabdiff.errors import AnnotationValidationError, ConfigError, ShapeError

EXTRACTORS = ("embed", "pixels16")
EMBED_SEED = 0x7AB1E
EMBED_WIDTHS = (16, 32, 64)

# -----------------------------------------------------------------------------
# Features

class Embedder(nn.Module):
    """Fixed random conv net: three k3 s2 convs with SiLU, then a global spatial mean."""

    def __init__(self, widths: Sequence[int] = EMBED_WIDTHS, seed: int = EMBED_SEED):
        super().__init__()
        convs, cin = [], 3
        for i, w in enumerate(widths):
            convs.append(Conv(cin, w, 3, 2, 1, seed=nx.derive_seed(seed, f"embed{i}")))
            cin = w
        self.convs = nn.ModuleList(convs)

    def forward(self, x):
        for conv in self.convs:
            x = nx.silu(conv(x))
        return nx.reduce_mean(nx.reshape(x, (x.shape[0], x.shape[1], x.shape[2] * x.shape[3])), axis=2)

@functools.lru_cache(maxsize=None)
def _embedder(dtype: torch.dtype) -> Embedder:
    # keyed by dtype: weights are created in the current default precision
    return Embedder().eval()

def _stack(images) -> np.ndarray:
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images]) if len(images) else np.zeros((0,))
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ShapeError("extract_features", arr.shape, (None, 3, "H", "W"))
    return arr

@torch.no_grad()
def extract_features(images, extractor: str = "embed", batch_size: int = 64) -> np.ndarray:
    """(n, d) float64 features of (3, H, W) images in [0, 1]; d = 64 for "embed", 256 for "pixels16"."""
    if extractor not in EXTRACTORS:
        raise ConfigError(f"unknown feature extractor {extractor!r}; choose from {EXTRACTORS}")
    if len(images) == 0:
        raise ShapeError("extract_features", (0,), (None, 3, "H", "W"), detail="empty image set")
    arr = _stack(images)
    out = []
    for i in range(0, len(arr), batch_size):
        x = torch.from_numpy(arr[i:i + batch_size])
        if extractor == "embed":
            f = _embedder(nx.default_dtype())(to_model_range(x))
        else:
            f = F.adaptive_avg_pool2d(x.mean(dim=1, keepdim=True), (16, 16)).flatten(1)
        out.append(f.double().numpy())
    return np.concatenate(out)

# -----------------------------------------------------------------------------
# Fréchet distance

@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    @property
    def dim(self) -> int:
        return len(self.mu)

def gaussian_stats(features: np.ndarray) -> GaussianStats:
    """Mean and unbiased (n - 1) covariance of the rows of `features`."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ShapeError("gaussian_stats", f.shape, ("n>=2", "d"))
    n, d = f.shape
    if n < d + 1:
        warnings.warn(f"covariance from {n} samples in {d} dims is rank deficient (want n >= {d + 1})")
    mu = f.mean(axis=0)
    sigma = np.atleast_2d(np.cov(f, rowvar=False, ddof=1))
    return GaussianStats(mu, (sigma + sigma.T) / 2, n)

@dataclass
class FrechetResult:
    distance: float
    clamped_eigenvalues: int

def _psd_sqrt(a: np.ndarray) -> tuple[np.ndarray, int]:
    w, v = np.linalg.eigh((a + a.T) / 2)
    clamped = int((w < 0).sum())
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T, clamped

def _trace_sqrt_product(a: np.ndarray, b: np.ndarray) -> tuple[float, int]:
    """Tr((A B)^{1/2}) = Tr((A^{1/2} B A^{1/2})^{1/2}) for PSD A, B."""
    ra, c1 = _psd_sqrt(a)
    m = ra @ b @ ra
    w = np.linalg.eigvalsh((m + m.T) / 2)
    return float(np.sqrt(np.clip(w, 0, None)).sum()), c1 + int((w < 0).sum())

def frechet_distance(a: GaussianStats, b: GaussianStats) -> FrechetResult:
    """
    ‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2}). The trace-sqrt term is
    averaged over both sandwich orders so the result is exactly symmetric;
    negative eigenvalues are clamped to 0 and counted.
    """
    if a.dim != b.dim:
        raise ShapeError("frechet_distance", a.mu.shape, b.mu.shape)
    diff = a.mu - b.mu
    t_ab, c_ab = _trace_sqrt_product(a.sigma, b.sigma)
    t_ba, c_ba = _trace_sqrt_product(b.sigma, a.sigma)
    d2 = float(diff @ diff) + float(np.trace(a.sigma) + np.trace(b.sigma)) - (t_ab + t_ba)
    if d2 < -1e-8:
        warnings.warn(f"frechet distance {d2:.3e} below zero beyond float noise")
    return FrechetResult(max(d2, 0.0), max(c_ab, c_ba))

# -----------------------------------------------------------------------------
# Structure adherence

@dataclass
class AxisScore:
    precision: float
    recall: float
    f1: float

@dataclass
class AdherenceReport:
    rows: list[AxisScore] = field(default_factory=list)
    columns: list[AxisScore] = field(default_factory=list)

    def _mean(self, axis: str, metric: str) -> float:
        scores = getattr(self, axis)
        return float(np.mean([getattr(s, metric) for s in scores])) if scores else 0.0

    @property
    def row_f1(self) -> float:
        return self._mean("rows", "f1")

    @property
    def column_f1(self) -> float:
        return self._mean("columns", "f1")

    @property
    def mean_f1(self) -> float:
        return (self.row_f1 + self.column_f1) / 2

    def sample_f1(self, i: int) -> float:
        return (self.rows[i].f1 + self.columns[i].f1) / 2

    def summary(self) -> dict:
        out = {}
        for axis, key in (("rows", "row"), ("columns", "col")):
            for metric in ("precision", "recall", "f1"):
                out[f"{key}_{metric}"] = self._mean(axis, metric)
        return out

def interval_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0

def match_bands(pred: Sequence[tuple[float, float]], truth: Sequence[tuple[float, float]],
                threshold: float = 0.5) -> AxisScore:
    """Greedy one-to-one matching by descending IoU, pairs below threshold discarded."""
    pairs = sorted(((interval_iou(p, t), i, j) for i, p in enumerate(pred) for j, t in enumerate(truth)),
                   key=lambda x: (-x[0], x[1], x[2]))
    used_p, used_t, matched = set(), set(), 0
    for iou, i, j in pairs:
        if iou < threshold:
            break
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
        matched += 1
    precision = matched / len(pred) if pred else float(not truth)
    recall = matched / len(truth) if truth else float(not pred)
    f1 = 2 * precision * recall / (precision + recall) if precision > 0 and recall > 0 else 0.0
    return AxisScore(precision, recall, f1)

def structure_adherence(images, annotations: Sequence[TableAnnotation], threshold: float = 0.5,
                        tau_dark: float = 0.25) -> AdherenceReport:
    if len(images) != len(annotations):
        raise ShapeError("structure_adherence", (len(images),), (len(annotations),))
    report = AdherenceReport()
    for img, y in zip(images, annotations):
        img = np.asarray(img)
        pred = extract_structure(img, tau_dark=tau_dark)
        H, W = img.shape[1:]
        if (y.image_height, y.image_width) != (H, W):
            y = y.scaled(H, W)
        report.rows.append(match_bands([b.interval("rows") for b in pred.rows],
                                       [b.interval("rows") for b in y.rows], threshold))
        report.columns.append(match_bands([b.interval("columns") for b in pred.columns],
                                          [b.interval("columns") for b in y.columns], threshold))
    return report

# -----------------------------------------------------------------------------
# Export

def _write(path: Path, data: bytes | str):
    try:
        if isinstance(data, str):
            path.write_text(data)
        else:
            path.write_bytes(data)
    except OSError as e:
        raise OSError(e.errno, f"cannot write {path}: {e.strerror}") from e

def yolo_labels(y: TableAnnotation) -> str:
    """One `class cx cy w h` line per box, normalized to [0, 1]; class 0 = row, 1 = column."""
    lines = []
    for label, b in y.labelled():
        cls = 0 if label == ROW else 1
        cx, cy = (b.xmin + b.xmax) / 2 / y.image_width, (b.ymin + b.ymax) / 2 / y.image_height
        w, h = (b.xmax - b.xmin) / y.image_width, (b.ymax - b.ymin) / y.image_height
        lines.append(f"{cls} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}")
    return "\n".join(lines) + ("\n" if lines else "")

def export_detection_dataset(samples: Sequence[tuple[np.ndarray, TableAnnotation]], out_dir: str | Path,
                             names: Sequence[str] | None = None, merge_voc_dir: str | Path | None = None,
                             merge_image_dir: str | Path | None = None, progress: bool = False) -> Path:
    """
    out_dir/images/<name>.png, out_dir/annotations/<name>.xml (VOC),
    out_dir/labels/<name>.txt (YOLO) and one out_dir/index.jsonl line per
    sample. A real VOC dataset can be merged in with source "real".
    """
    out_dir = Path(out_dir)
    names = list(names) if names is not None else [f"synth_{i:06d}" for i in range(len(samples))]
    if len(names) != len(samples) or len(set(names)) != len(names):
        raise ShapeError("export_detection_dataset", (len(samples),), (len(set(names)),), detail="unique names")
    entries = [(img, y, name, "synthetic") for (img, y), name in zip(samples, names)]
    if merge_voc_dir is not None:
        entries += [(img, y, f"real_{stem}", "real") for img, y, stem in load_voc_dir(merge_voc_dir, merge_image_dir)]
    for sub in ("images", "annotations", "labels"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    index = []
    for img, y, name, source in tqdm(entries, desc="export", disable=not progress):
        img = np.asarray(img)
        if img.shape[1:] != (y.image_height, y.image_width):
            raise AnnotationValidationError(f"{name}: image {img.shape[1:]} does not match annotation "
                                            f"{y.image_height}x{y.image_width}")
        image_path = out_dir / "images" / f"{name}.png"
        try:
            save_image_png(img, image_path)
        except OSError as e:
            raise OSError(e.errno, f"cannot write {image_path}: {e.strerror}") from e
        _write(out_dir / "annotations" / f"{name}.xml", write_voc_xml(y, f"{name}.png", "images"))
        _write(out_dir / "labels" / f"{name}.txt", yolo_labels(y))
        index.append(dict(name=name, source=source, image=f"images/{name}.png",
                          annotation=f"annotations/{name}.xml", labels=f"labels/{name}.txt",
                          width=y.image_width, height=y.image_height, rows=len(y.rows), columns=len(y.columns)))
    _write(out_dir / "index.jsonl", "".join(json.dumps(e, sort_keys=True) + "\n" for e in index))
    return out_dir

# -----------------------------------------------------------------------------
# Report

def evaluation_report(extractor: str, n_generated: int, n_reference: int, frechet: FrechetResult | None,
                      adherence: AdherenceReport | None) -> dict:
    report = dict(extractor=extractor, n_generated=n_generated, n_reference=n_reference,
                  frechet=frechet.distance if frechet else None,
                  clamped_eigenvalues=frechet.clamped_eigenvalues if frechet else None)
    if adherence is not None:
        report.update(adherence.summary())
        report["mean_f1"] = adherence.mean_f1
    return report

def write_report(report: dict, path: str | Path):
    _write(Path(path), json.dumps(report, indent=2, sort_keys=True) + "\n")
