"""Dataset generation, loading, splits, synthetic warps, contamination.

The bundled corpus renders digit-like glyphs from seeded stroke skeletons
so the whole test suite runs hermetically; real MNIST idx files can be
ingested instead when available. Images are single-channel, normalized to
[-1, 1], placed on a larger canvas with seeded jitter so coarse
deformation has signal to explain.
"""

from __future__ import annotations

import csv
import gzip
import io
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .fileio import (
    DataError,
    atomic_write_text,
    load_grayscale_png,
    save_grayscale_png,
)
from .numeric.tensor import Tensor


@dataclass
class LabeledImage:
    sample_id: str
    pixels: np.ndarray                  # (1, H, W) in [-1, 1]
    label: int
    anomaly: bool = False
    mask: np.ndarray | None = field(default=None, repr=False)
    provenance: str = "raw"


# ---------------------------------------------------------------------------
# glyph corpus
# ---------------------------------------------------------------------------

def _ellipse(cx, cy, rx, ry, n=14, start=0.0):
    pts = []
    for i in range(n + 1):
        a = start + 2.0 * math.pi * i / n
        pts.append((cx + rx * math.cos(a), cy + ry * math.sin(a)))
    return pts


# unit-box polylines, x to the right, y downward
GLYPH_STROKES = {
    0: [_ellipse(0.5, 0.5, 0.26, 0.38)],
    1: [[(0.36, 0.24), (0.56, 0.10), (0.56, 0.92)]],
    2: [[(0.26, 0.30), (0.32, 0.14), (0.52, 0.08), (0.70, 0.16),
         (0.74, 0.32), (0.66, 0.48), (0.30, 0.76), (0.25, 0.90)],
        [(0.25, 0.90), (0.76, 0.90)]],
    3: [[(0.27, 0.16), (0.50, 0.08), (0.70, 0.20), (0.70, 0.36),
         (0.48, 0.47)],
        [(0.48, 0.47), (0.73, 0.58), (0.74, 0.78), (0.52, 0.92),
         (0.27, 0.84)]],
    4: [[(0.62, 0.08), (0.24, 0.62), (0.80, 0.62)],
        [(0.63, 0.34), (0.63, 0.92)]],
    5: [[(0.72, 0.10), (0.31, 0.10), (0.29, 0.44), (0.55, 0.40),
         (0.74, 0.54), (0.73, 0.78), (0.51, 0.91), (0.27, 0.82)]],
    6: [[(0.66, 0.08), (0.42, 0.24), (0.29, 0.50), (0.30, 0.76),
         (0.50, 0.91), (0.69, 0.79), (0.70, 0.60), (0.51, 0.50),
         (0.33, 0.60)]],
    7: [[(0.25, 0.12), (0.76, 0.12), (0.44, 0.92)],
        [(0.38, 0.52), (0.64, 0.52)]],
    8: [_ellipse(0.5, 0.30, 0.20, 0.20), _ellipse(0.5, 0.70, 0.24, 0.21)],
    9: [_ellipse(0.5, 0.32, 0.21, 0.22), [(0.71, 0.34), (0.67, 0.92)]],
}


def _rasterize_strokes(strokes, size, thickness):
    """Coverage raster of polylines; distance-to-segment with soft edges."""
    ys, xs = np.mgrid[0:size, 0:size]
    px = (xs + 0.5) / size
    py = (ys + 0.5) / size
    points = np.stack([px.ravel(), py.ravel()], axis=1)
    best = np.full(points.shape[0], np.inf)
    for line in strokes:
        for (ax, ay), (bx, by) in zip(line, line[1:]):
            a = np.array([ax, ay])
            b = np.array([bx, by])
            ab = b - a
            denom = float(ab @ ab)
            if denom == 0.0:
                d = np.linalg.norm(points - a, axis=1)
            else:
                t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
                proj = a + t[:, None] * ab
                d = np.linalg.norm(points - proj, axis=1)
            best = np.minimum(best, d)
    radius = thickness / 2.0 / size
    aa = 0.9 / size
    coverage = np.clip(0.5 + (radius - best) / aa, 0.0, 1.0)
    return coverage.reshape(size, size)


def _sample_rng(seed, label, index, salt):
    return np.random.default_rng(
        np.random.SeedSequence([seed, label, index, salt]))


def render_glyph(label, seed, index, size=36, salt=0):
    """One jittered glyph raster in [0, 1] coverage, shape (size, size)."""
    rng = _sample_rng(seed, label, index, salt)
    strokes = GLYPH_STROKES[label]
    angle = math.radians(rng.uniform(-12.0, 12.0))
    scale_x = rng.uniform(0.88, 1.12)
    scale_y = rng.uniform(0.88, 1.12)
    shear = rng.uniform(-0.10, 0.10)
    thickness = rng.uniform(1.5, 2.4) * size / 28.0
    ca, sa = math.cos(angle), math.sin(angle)
    n_points = sum(len(line) for line in strokes)
    point_noise = iter(rng.normal(0.0, 0.02, size=(n_points, 2)))

    def warp_point(x, y):
        nx, ny = next(point_noise)
        x, y = x + nx - 0.5, y + ny - 0.5
        x = x + shear * y
        x, y = x * scale_x, y * scale_y
        x, y = ca * x - sa * y, sa * x + ca * y
        return x + 0.5, y + 0.5

    jittered = [[warp_point(x, y) for x, y in line] for line in strokes]
    return _rasterize_strokes(jittered, size, thickness)


def place_on_canvas(glyph, height, width, jitter, rng):
    """Center a coverage raster on a canvas with integer placement jitter,
    returning [-1, 1] pixels of shape (1, height, width)."""
    size = glyph.shape[0]
    canvas = np.zeros((height, width))
    dy = int(rng.integers(-jitter, jitter + 1)) if jitter else 0
    dx = int(rng.integers(-jitter, jitter + 1)) if jitter else 0
    top = (height - size) // 2 + dy
    left = (width - size) // 2 + dx
    y0, x0 = max(top, 0), max(left, 0)
    y1, x1 = min(top + size, height), min(left + size, width)
    canvas[y0:y1, x0:x1] = glyph[y0 - top:y1 - top, x0 - left:x1 - left]
    return (canvas * 2.0 - 1.0)[None]


def generate_corpus(data_spec, image_spec, seed, classes=None):
    """Seeded glyph corpus: (train+test)_per_class for seen classes and
    test_per_class for the rest; the OOD split consumes it downstream."""
    classes = sorted(GLYPH_STROKES) if classes is None else sorted(classes)
    seen = set(data_spec.seen_classes)
    images = []
    for label in classes:
        count = (data_spec.train_per_class + data_spec.test_per_class
                 if label in seen else data_spec.test_per_class)
        for idx in range(count):
            glyph = render_glyph(label, seed, idx, size=data_spec.glyph_size)
            rng = _sample_rng(seed, label, idx, salt=1)
            pixels = place_on_canvas(glyph, image_spec.height, image_spec.width,
                                     data_spec.placement_jitter, rng)
            images.append(LabeledImage(sample_id=f"c{label}_{idx:05d}",
                                       pixels=pixels, label=label))
    return images


# ---------------------------------------------------------------------------
# MNIST idx ingestion (optional alternative source)
# ---------------------------------------------------------------------------

def read_idx(path):
    """Parse an idx(-gzipped) array file (the classic digit-dataset format)."""
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise DataError(f"{path}: truncated idx header at byte 0")
    zero, dtype_code, ndim = blob[0] << 8 | blob[1], blob[2], blob[3]
    if zero != 0 or dtype_code != 0x08:
        raise DataError(f"{path}: unsupported idx magic at byte 0")
    offset = 4 + 4 * ndim
    if len(blob) < offset:
        raise DataError(f"{path}: truncated idx dimensions at byte 4")
    dims = struct.unpack(f">{ndim}I", blob[4:offset])
    expected = offset + int(np.prod(dims))
    if len(blob) < expected:
        raise DataError(f"{path}: truncated idx payload at byte {len(blob)}")
    return np.frombuffer(blob, dtype=np.uint8, count=int(np.prod(dims)),
                         offset=offset).reshape(dims)


def corpus_from_idx(images_path, labels_path, data_spec, image_spec, seed):
    raw = read_idx(images_path)
    labels = read_idx(labels_path)
    if raw.shape[0] != labels.shape[0]:
        raise DataError(f"{images_path}: {raw.shape[0]} images vs "
                        f"{labels.shape[0]} labels")
    seen = set(data_spec.seen_classes)
    per_class_budget = {
        label: (data_spec.train_per_class + data_spec.test_per_class
                if label in seen else data_spec.test_per_class)
        for label in range(10)}
    taken = {label: 0 for label in range(10)}
    images = []
    for i in range(raw.shape[0]):
        label = int(labels[i])
        if taken[label] >= per_class_budget[label]:
            continue
        idx = taken[label]
        taken[label] += 1
        coverage = raw[i].astype(np.float64) / 255.0
        rng = _sample_rng(seed, label, idx, salt=1)
        pixels = place_on_canvas(coverage, image_spec.height, image_spec.width,
                                 data_spec.placement_jitter, rng)
        images.append(LabeledImage(sample_id=f"m{label}_{idx:05d}",
                                   pixels=pixels, label=label))
        if all(taken[c] >= per_class_budget[c] for c in per_class_budget):
            break
    return images


# ---------------------------------------------------------------------------
# dataset directory layout
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.csv"
MANIFEST_FIELDS = ["id", "path", "label", "anomaly", "provenance", "mask_path"]


def save_dataset(root, images):
    """One subdirectory per class of grayscale PNGs plus a manifest."""
    os.makedirs(root, exist_ok=True)
    rows = []
    for img in images:
        rel = os.path.join(str(img.label), f"{img.sample_id}.png")
        save_grayscale_png(os.path.join(root, rel), img.pixels)
        mask_rel = ""
        if img.mask is not None:
            mask_rel = os.path.join("masks", f"{img.sample_id}.png")
            save_grayscale_png(os.path.join(root, mask_rel),
                               img.mask.astype(np.float64) * 2.0 - 1.0)
        rows.append({"id": img.sample_id, "path": rel, "label": img.label,
                     "anomaly": int(img.anomaly), "provenance": img.provenance,
                     "mask_path": mask_rel})
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=MANIFEST_FIELDS)
    writer.writeheader()
    writer.writerows(rows)
    atomic_write_text(os.path.join(root, MANIFEST_NAME), buf.getvalue())


def load_dataset(root, layout="class-dirs"):
    """Read a dataset directory back; empty directory yields an empty list."""
    if layout != "class-dirs":
        raise DataError(f"unknown dataset layout {layout!r}")
    if not os.path.isdir(root):
        raise DataError(f"dataset directory {root!r} does not exist")
    manifest = os.path.join(root, MANIFEST_NAME)
    if not os.path.exists(manifest):
        if not any(os.scandir(root)):
            return []
        raise DataError(f"{manifest}: manifest missing in nonempty directory")
    images = []
    with open(manifest, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise DataError(f"{manifest}: unexpected header "
                            f"{reader.fieldnames} at byte 0")
        for lineno, row in enumerate(reader, start=2):
            try:
                label = int(row["label"])
                anomaly = bool(int(row["anomaly"]))
            except (TypeError, KeyError, ValueError):
                raise DataError(f"{manifest}: malformed row at line {lineno}")
            pixels = load_grayscale_png(os.path.join(root, row["path"]))
            mask = None
            if row["mask_path"]:
                mask = (load_grayscale_png(
                    os.path.join(root, row["mask_path"]))[0] > 0.0)
            images.append(LabeledImage(sample_id=row["id"], pixels=pixels,
                                       label=label, anomaly=anomaly,
                                       mask=mask,
                                       provenance=row["provenance"]))
    return images


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

def ood_split(dataset, seen_classes, holdout_fraction=0.2, seed=0):
    """Partition into (train, test_seen, test_unseen).

    Training keeps only seen classes; a seeded per-class holdout moves
    the held-out fraction to test_seen. Anomaly flags are recomputed as
    "class not in seen_classes" on every returned sample.
    """
    if not seen_classes:
        raise ValueError("seen_classes must be nonempty")
    labels_present = {img.label for img in dataset}
    unknown = set(seen_classes) - set(GLYPH_STROKES) - labels_present
    if unknown:
        raise ValueError(f"unknown class id(s) {sorted(unknown)}")
    seen = set(seen_classes)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD5]))
    train, test_seen, test_unseen = [], [], []
    by_class = {}
    for img in dataset:
        by_class.setdefault(img.label, []).append(img)
    for label in sorted(by_class):
        group = sorted(by_class[label], key=lambda im: im.sample_id)
        if label not in seen:
            for img in group:
                img.anomaly = True
                test_unseen.append(img)
            continue
        n_hold = math.ceil(holdout_fraction * len(group))
        held = set(rng.choice(len(group), size=n_hold, replace=False).tolist())
        for i, img in enumerate(group):
            img.anomaly = False
            (test_seen if i in held else train).append(img)
    return train, test_seen, test_unseen


@dataclass
class SyntheticWarpSpec:
    """Deterministic warp recipe; magnitude 0 reproduces the input."""

    translate: tuple = (0.0, 0.0)     # content motion in pixels (+x, +y)
    rotate_deg: float = 0.0
    local_amplitude: float = 0.0      # peak local displacement, pixels
    local_scale: int = 16             # control-grid cell size, pixels
    seed: int = 0

    def label(self):
        tx, ty = self.translate
        mag = math.hypot(tx, ty)
        return f"t{mag:g}_r{self.rotate_deg:g}_l{self.local_amplitude:g}"

    def is_identity(self):
        return (self.translate == (0.0, 0.0) and self.rotate_deg == 0.0
                and self.local_amplitude == 0.0)


def _sample_with_offsets(pixels, offsets_px):
    """Resample (1,H,W) pixels with per-pixel (2,H,W) offsets in pixels,
    using the model's own bilinear sampler with border clamping."""
    _, h, w = pixels.shape
    norm = np.empty_like(offsets_px)
    norm[0] = offsets_px[0] * (2.0 / (w - 1))
    norm[1] = offsets_px[1] * (2.0 / (h - 1))
    grid = nm.identity_grid(h, w, dtype=np.float64)[None].copy()
    grid[..., 0] += norm[0]
    grid[..., 1] += norm[1]
    out = nm.grid_sample(Tensor(pixels[None], dtype=np.float64),
                         Tensor(grid, dtype=np.float64))
    return out.data[0]


def synthesize_warp(image: LabeledImage, spec: SyntheticWarpSpec,
                    as_anomaly=False) -> LabeledImage:
    """Translation after rotation after smooth local warp, one stage at a
    time through the bilinear sampler. Deterministic given the seed."""
    h, w = image.pixels.shape[1:]
    limit = min(h, w) / 2.0
    tx, ty = spec.translate
    if abs(tx) >= limit or abs(ty) >= limit or spec.local_amplitude >= limit:
        raise ValueError(f"warp magnitudes {spec} exceed canvas bounds")
    pixels = image.pixels.astype(np.float64)

    if spec.local_amplitude > 0.0:
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x10]))
        cells = max(2, int(np.ceil(h / max(spec.local_scale, 2))) + 1)
        coarse = rng.normal(size=(1, 2, cells, cells))
        up = nm.bilinear_upsample(Tensor(coarse, dtype=np.float64), (h, w)).data[0]
        peak = np.abs(up).max()
        if peak > 0:
            up = up * (spec.local_amplitude / peak)
        pixels = _sample_with_offsets(pixels, up)

    if spec.rotate_deg != 0.0:
        theta = math.radians(spec.rotate_deg)
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        rel_x, rel_y = xs - cx, ys - cy
        # content rotates by +theta: sample at the inverse rotation
        src_x = math.cos(theta) * rel_x + math.sin(theta) * rel_y + cx
        src_y = -math.sin(theta) * rel_x + math.cos(theta) * rel_y + cy
        offsets = np.stack([src_x - xs, src_y - ys])
        pixels = _sample_with_offsets(pixels, offsets)

    if (tx, ty) != (0.0, 0.0):
        offsets = np.zeros((2, h, w))
        offsets[0] = -tx
        offsets[1] = -ty
        pixels = _sample_with_offsets(pixels, offsets)

    mask = None
    if as_anomaly:
        mask = np.abs(pixels - image.pixels)[0] > 0.08
    return LabeledImage(sample_id=f"{image.sample_id}_w{spec.label()}",
                        pixels=pixels, label=image.label,
                        anomaly=image.anomaly or as_anomaly, mask=mask,
                        provenance=f"warped({spec.label()})")


def contaminate(train, anomaly_pool, ratio, seed=0):
    """Replace ceil(ratio * len(train)) samples with pool entries; the
    returned list hides nothing from the caller but training ignores flags."""
    if not 0.0 <= ratio < 0.5:
        raise ValueError(f"contamination ratio must be in [0, 0.5), got {ratio}")
    result = list(train)
    n_replace = math.ceil(ratio * len(train))
    if n_replace == 0:
        return result
    if len(anomaly_pool) < n_replace:
        raise ValueError(f"anomaly pool has {len(anomaly_pool)} samples, "
                         f"need {n_replace}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0]))
    replace_at = rng.choice(len(result), size=n_replace, replace=False)
    picks = rng.choice(len(anomaly_pool), size=n_replace, replace=False)
    for slot, pick in zip(sorted(replace_at.tolist()), picks.tolist()):
        donor = anomaly_pool[pick]
        result[slot] = LabeledImage(sample_id=f"x_{donor.sample_id}",
                                    pixels=donor.pixels, label=donor.label,
                                    anomaly=donor.anomaly, mask=donor.mask,
                                    provenance="contaminant")
    return result


def as_batch(images, dtype=None):
    """Stack LabeledImages into one (B, C, H, W) array."""
    return np.stack([img.pixels for img in images]).astype(
        dtype or nm.default_dtype())
