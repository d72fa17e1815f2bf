"""Volume ingestion, preprocessing, dataset splitting, and phantom synthesis.

Volumes are (S, H, W) arrays with values in [0, 255] plus an optional
binary lung mask and an optional lesion ground-truth mask.  The on-disk
format is the rank-3 NLT1 tensor container; the dataset index is a
JSON-lines manifest with one record per scan.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DataError, ShapeError
from .tensor import load_array, save_array

LABELS = ("CP", "NCP", "Normal")
LABEL_TO_INDEX = {name: i for i, name in enumerate(LABELS)}


@dataclass
class Volume:
    voxels: np.ndarray  # (S, H, W) in [0, 255]
    label: str
    scan_id: str
    mask: np.ndarray | None = None  # lung mask, strictly {0, 1}
    lesion: np.ndarray | None = None  # ground-truth lesion mask

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float64)
        if self.voxels.ndim != 3:
            raise ShapeError(f"volume must be rank 3, got {self.voxels.shape}")
        if self.label not in LABELS:
            raise DataError(f"unknown label {self.label!r}")
        if self.voxels.min() < 0 or self.voxels.max() > 255:
            raise DataError(f"voxel values outside [0, 255] in scan {self.scan_id}")
        for name in ("mask", "lesion"):
            m = getattr(self, name)
            if m is None:
                continue
            m = np.asarray(m)
            if m.shape != self.voxels.shape:
                raise ShapeError(f"{name} shape {m.shape} != voxels {self.voxels.shape}")
            if not np.isin(m, (0, 1)).all():
                raise DataError(f"{name} is not strictly binary in scan {self.scan_id}")
            setattr(self, name, m.astype(np.float64))

    @property
    def label_index(self):
        return LABEL_TO_INDEX[self.label]


def _slice_indices(s, target):
    return (np.arange(target) * s) // target


def resample_slices(v: Volume, target=64) -> Volume:
    """Force exactly ``target`` slices via interval sampling / duplication.

    Index formula floor(i * S / target) both when thinning (S > target) and
    when duplicating (S < target); S == target is the identity.
    """
    s = v.voxels.shape[0]
    if s == 0:
        raise DataError("cannot resample an empty volume")
    if s == target:
        return v
    idx = _slice_indices(s, target)
    return replace(
        v,
        voxels=v.voxels[idx].copy(),
        mask=None if v.mask is None else v.mask[idx].copy(),
        lesion=None if v.lesion is None else v.lesion[idx].copy(),
    )


def center_crop(v: Volume, size=(160, 160)) -> Volume:
    """Fixed middle crop; no padding and no resampling."""
    ch, cw = size
    s, h, w = v.voxels.shape
    if h < ch or w < cw:
        raise DataError(
            f"scan {v.scan_id}: spatial size {(h, w)} smaller than crop {(ch, cw)}"
        )
    top = (h - ch) // 2
    left = (w - cw) // 2
    window = (slice(None), slice(top, top + ch), slice(left, left + cw))
    return replace(
        v,
        voxels=v.voxels[window].copy(),
        mask=None if v.mask is None else v.mask[window].copy(),
        lesion=None if v.lesion is None else v.lesion[window].copy(),
    )


def apply_mask(v: Volume) -> Volume:
    """Zero out non-lung voxels using the binary lung mask."""
    if v.mask is None:
        raise DataError(f"scan {v.scan_id} has no lung mask")
    return replace(v, voxels=v.voxels * v.mask)


def preprocess(v: Volume, target_slices=64, crop=(160, 160)) -> Volume:
    """mask -> center crop -> slice resample, in that order."""
    if v.mask is not None:
        v = apply_mask(v)
    return resample_slices(center_crop(v, crop), target_slices)


# -- manifest ------------------------------------------------------------


def load_manifest(path, check_files=True):
    path = Path(path)
    records = []
    seen = set()
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: bad JSON: {exc}") from exc
            for key in ("id", "path", "label"):
                if key not in rec:
                    raise DataError(f"{path}:{line_no}: missing {key!r}")
            if rec["label"] not in LABELS:
                raise DataError(f"{path}:{line_no}: unknown label {rec['label']!r}")
            if rec["id"] in seen:
                raise DataError(f"{path}:{line_no}: duplicate scan id {rec['id']!r}")
            seen.add(rec["id"])
            if check_files:
                for key in ("path", "mask_path", "lesion_path"):
                    p = rec.get(key)
                    if p is not None and not (path.parent / p).exists():
                        raise DataError(f"{path}:{line_no}: missing file {p}")
            records.append(rec)
    return records


def save_manifest(records, path):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_volume(record, root) -> Volume:
    root = Path(root)
    voxels = load_array(root / record["path"])
    mask = load_array(root / record["mask_path"]) if record.get("mask_path") else None
    lesion = load_array(root / record["lesion_path"]) if record.get("lesion_path") else None
    return Volume(voxels, record["label"], record["id"], mask=mask, lesion=lesion)


def split(records, ratios=(8, 1, 1), seed=0, stratify=True):
    """Assign train/val/test with largest-remainder rounding per stratum.

    Deterministic per seed; returns new records with a ``split`` field.
    """
    if any(r <= 0 for r in ratios):
        raise ValueError("split ratios must be positive")
    if len(records) < len(ratios):
        raise DataError(f"{len(records)} records cannot fill {len(ratios)} splits")
    names = ("train", "val", "test")
    rng = np.random.default_rng(seed)
    groups = {}
    if stratify:
        for rec in records:
            groups.setdefault(rec["label"], []).append(rec)
    else:
        groups["all"] = list(records)

    out = []
    total_ratio = sum(ratios)
    for key in sorted(groups):
        group = groups[key]
        order = rng.permutation(len(group))
        n = len(group)
        exact = [n * r / total_ratio for r in ratios]
        counts = [int(np.floor(e)) for e in exact]
        remainders = sorted(
            range(len(ratios)), key=lambda i: (exact[i] - counts[i]), reverse=True
        )
        for i in remainders[: n - sum(counts)]:
            counts[i] += 1
        cursor = 0
        for name, count in zip(names, counts):
            for j in order[cursor : cursor + count]:
                out.append({**group[j], "split": name})
            cursor += count
    return out


# -- synthetic phantoms --------------------------------------------------


@dataclass
class PhantomSpec:
    """Class-conditional lesion rules for the synthetic desk-scale dataset."""

    shape: tuple = (16, 32, 32)
    count_per_class: int = 10
    noise_level: float = 4.0
    seed: int = 0
    # (min count, max count) lesions per volume
    cp_lesions: tuple = (2, 3)
    ncp_lesions: tuple = (8, 12)
    cp_radius: tuple = (3.0, 5.0)
    ncp_radius: tuple = (1.5, 2.5)
    cp_intensity: tuple = (90.0, 120.0)
    ncp_intensity: tuple = (45.0, 70.0)
    vessel_count: tuple = (3, 5)
    vessel_intensity: float = 25.0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if len(self.shape) != 3 or min(self.shape) < 4:
            raise DataError(f"phantom shape {self.shape} is infeasible")


def _coordinate_grid(shape):
    return np.meshgrid(*(np.arange(s, dtype=np.float64) for s in shape), indexing="ij")


def _add_ellipsoid(canvas, mask, center, radii, intensity, grid):
    zz, yy, xx = grid
    dist = (
        ((zz - center[0]) / radii[0]) ** 2
        + ((yy - center[1]) / radii[1]) ** 2
        + ((xx - center[2]) / radii[2]) ** 2
    )
    inside = dist <= 1.0
    # soft edge: quadratic falloff to the boundary
    canvas += intensity * np.clip(1.0 - dist, 0.0, 1.0) ** 0.5
    mask |= inside


def _add_vessels(canvas, spec, rng, grid):
    zz, yy, xx = grid
    shape = np.array(spec.shape, dtype=np.float64)
    n = rng.integers(spec.vessel_count[0], spec.vessel_count[1] + 1)
    for _ in range(n):
        start = rng.uniform(0, shape)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        length = rng.uniform(0.4, 1.0) * shape.min()
        for t in np.linspace(0.0, 1.0, 24):
            p = start + t * length * direction
            d2 = (zz - p[0]) ** 2 + (yy - p[1]) ** 2 + (xx - p[2]) ** 2
            canvas += spec.vessel_intensity * np.exp(-d2 / 1.5) / 3.0


def _place_lesions(spec, rng, grid, n_range, r_range, i_range, peripheral):
    shape = np.array(spec.shape, dtype=np.float64)
    canvas = np.zeros(spec.shape)
    mask = np.zeros(spec.shape, dtype=bool)
    center = shape / 2.0
    n = rng.integers(n_range[0], n_range[1] + 1)
    for _ in range(n):
        for attempt in range(100):
            pos = rng.uniform(0.15 * shape, 0.85 * shape)
            if not peripheral:
                break
            # peripheral: outside the central third of the in-plane extent
            offset = np.abs(pos[1:] - center[1:]) / shape[1:]
            if offset.max() > 0.17:
                break
        else:
            raise DataError("infeasible lesion placement after bounded retries")
        r = rng.uniform(*r_range)
        radii = (max(1.0, r * 0.6), r, r)
        intensity = rng.uniform(*i_range)
        _add_ellipsoid(canvas, mask, pos, radii, intensity, grid)
    return canvas, mask


def make_phantom(spec: PhantomSpec, label, scan_id, rng) -> Volume:
    """One synthetic volume of the requested class, with lesion ground truth."""
    grid = _coordinate_grid(spec.shape)
    background = 30.0 + 10.0 * gaussian_filter(rng.normal(size=spec.shape), sigma=2.0)
    _add_vessels(background, spec, rng, grid)
    if label == "CP":
        lesions, mask = _place_lesions(
            spec, rng, grid, spec.cp_lesions, spec.cp_radius, spec.cp_intensity, False
        )
    elif label == "NCP":
        lesions, mask = _place_lesions(
            spec, rng, grid, spec.ncp_lesions, spec.ncp_radius, spec.ncp_intensity, True
        )
    else:
        lesions = np.zeros(spec.shape)
        mask = np.zeros(spec.shape, dtype=bool)
    voxels = background + lesions
    if spec.noise_level > 0:
        voxels = voxels + rng.normal(scale=spec.noise_level, size=spec.shape)
    voxels = np.clip(voxels, 0.0, 255.0)
    return Volume(voxels, label, scan_id, lesion=mask.astype(np.float64))


def generate_phantoms(spec: PhantomSpec):
    """Balanced three-class dataset; identical seed gives identical bytes."""
    rng = np.random.default_rng(spec.seed)
    volumes = []
    for i in range(spec.count_per_class):
        for label in LABELS:
            volumes.append(make_phantom(spec, label, f"{label.lower()}-{i:04d}", rng))
    return volumes


def write_dataset(volumes, out_dir):
    """Write volumes + lesion masks + manifest under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for v in volumes:
        rec = {"id": v.scan_id, "path": f"{v.scan_id}.nlt", "label": v.label}
        save_array(out_dir / rec["path"], v.voxels)
        if v.mask is not None:
            rec["mask_path"] = f"{v.scan_id}.mask.nlt"
            save_array(out_dir / rec["mask_path"], v.mask)
        if v.lesion is not None:
            rec["lesion_path"] = f"{v.scan_id}.lesion.nlt"
            save_array(out_dir / rec["lesion_path"], v.lesion)
        records.append(rec)
    save_manifest(records, out_dir / "manifest.jsonl")
    return records
