"""Heat-map extraction and quantitative lesion-overlap scoring.

Two sources: the attention map M captured from the first attention module
during a forward pass (recording is pure observation and never changes the
logits), and class activation mapping from the GAP/FC head.  Both maps are
channel-reduced, trilinearly upsampled to the input grid, and min-max
normalized into [0, 1]; a flat map normalizes to all-0.5.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError
from .metrics import roc_auc
from .ops import upsample_array
from .tensor import Tensor


@dataclass
class HeatMap:
    values: np.ndarray  # (D, H, W) in [0, 1], aligned to the input grid
    source: str  # "attention" or "cam"
    scan_id: str
    target_class: int | None = None


def _normalize(values):
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.full(values.shape, 0.5)
    return (values - lo) / (hi - lo)


def _to_input_grid(values, input_shape):
    factors = []
    for out_e, in_e in zip(input_shape, values.shape):
        if out_e % in_e != 0:
            raise ShapeError(
                f"map extent {in_e} does not divide input extent {out_e}"
            )
        factors.append(out_e // in_e)
    if factors == [1, 1, 1]:
        return values
    return upsample_array(values, factors, mode="trilinear")


def attention_heatmap(model, volume, reduction="mean") -> HeatMap:
    """Heat map from the first attention module's map M.

    ``volume`` is a data.Volume; voxels are scaled to [0, 1] exactly as the
    trainer feeds them.  Channel reduction is mean (max optional).
    """
    if sum(model.cfg.attention_stacks) == 0:
        raise DataError("model has no attention modules to capture from")
    if reduction not in ("mean", "max"):
        raise ValueError(f"unknown reduction {reduction!r}")
    x = Tensor(volume.voxels[None, None] / 255.0)
    record = {}
    model.forward(x, record=record)
    m = record["attention_maps"][0].data[0]  # (C, d, h, w)
    reduced = m.mean(axis=0) if reduction == "mean" else m.max(axis=0)
    values = _normalize(_to_input_grid(reduced, volume.voxels.shape))
    return HeatMap(values, "attention", volume.scan_id)


def cam_heatmap(model, volume, target_class) -> HeatMap:
    """Class activation map: FC-weighted sum of the pre-GAP feature maps.

    Negative responses are clamped to zero before normalization.
    """
    if not (0 <= target_class < model.cfg.num_classes):
        raise ValueError(f"target class {target_class} out of range")
    x = Tensor(volume.voxels[None, None] / 255.0)
    record = {}
    model.forward(x, record=record)
    feats = record["pre_gap"].data[0]  # (C, d, h, w)
    weights = model.fc.weight.data[target_class]
    heat = np.maximum(np.tensordot(weights, feats, axes=([0], [0])), 0.0)
    values = _normalize(_to_input_grid(heat, volume.voxels.shape))
    return HeatMap(values, "cam", volume.scan_id, target_class=target_class)


def overlap_score(h: HeatMap, lesion_mask):
    """(mean heat inside lesions - mean outside, voxel-level detection AUC)."""
    mask = np.asarray(lesion_mask)
    if mask.shape != h.values.shape:
        raise ShapeError(f"mask shape {mask.shape} != heat map {h.values.shape}")
    inside = mask > 0
    if not inside.any():
        raise DataError("lesion mask is empty")
    diff = float(h.values[inside].mean() - h.values[~inside].mean())
    voxel_auc = roc_auc(h.values.reshape(-1), inside.reshape(-1).astype(np.int64))
    return diff, voxel_auc


def export_heatmap(h: HeatMap, path, fmt="pgm-stack"):
    """Write the map as one 8-bit binary PGM per slice, or as a CSV."""
    path = Path(path)
    if fmt == "pgm-stack":
        path.mkdir(parents=True, exist_ok=True)
        written = []
        quantized = np.round(255.0 * h.values).astype(np.uint8)
        depth, height, width = quantized.shape
        for i in range(depth):
            target = path / f"{h.scan_id}_{h.source}_{i:04d}.pgm"
            with open(target, "wb") as fh:
                fh.write(f"P5\n{width} {height}\n255\n".encode())
                fh.write(quantized[i].tobytes())
            written.append(target)
        return written
    if fmt == "csv":
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["slice", "row", "col", "value"])
            for (s, r, c), v in np.ndenumerate(h.values):
                writer.writerow([s, r, c, repr(float(v))])
        return [path]
    raise ValueError(f"unknown heat-map format {fmt!r}")


def read_heatmap_csv(path):
    """Reload a CSV heat map exactly (testing aid)."""
    entries = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for s, r, c, v in reader:
            entries.append(((int(s), int(r), int(c)), float(v)))
    shape = tuple(max(k[i] for k, _ in entries) + 1 for i in range(3))
    values = np.zeros(shape)
    for k, v in entries:
        values[k] = v
    return values
