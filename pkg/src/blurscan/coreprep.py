"""Core extraction from stitched slides: white balance, threshold segmentation,
grid fitting, label assignment, and 5-patch classification stacks.

Box convention: (x0, y0, x1, y1), half-open, in mosaic pixels.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import BalanceError, LabelingError, ParameterError, SegmentationError
from .imaging import Raster, gray_f, quantize_u8, round_half_up, to_gray

STACK_SIDE = 512
STACK_PATCHES = 5

Box = tuple[int, int, int, int]


def box_area(box: Box) -> int:
    return max(0, box[2] - box[0]) * max(0, box[3] - box[1])


def box_center(box: Box) -> tuple[float, float]:
    return (box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0


# ---------------------------------------------------------------------------
# White balance
# ---------------------------------------------------------------------------

WB_BLOCK = 64
WB_VARIANCE_THRESHOLD = 25.0


def find_background_block(mosaic: Raster, block: int = WB_BLOCK,
                          variance_threshold: float = WB_VARIANCE_THRESHOLD
                          ) -> tuple[int, int]:
    """Top-left corner of the brightest low-variance block (tissue-free)."""
    g = gray_f(mosaic.data)
    h, w = g.shape
    if h < block or w < block:
        raise BalanceError(f"mosaic smaller than the {block}x{block} background block")
    best = None
    stride = block // 2
    ys = list(range(0, h - block + 1, stride))
    xs = list(range(0, w - block + 1, stride))
    for y in ys:
        for x in xs:
            sub = g[y : y + block, x : x + block]
            var = float(sub.var())
            if var <= variance_threshold:
                mean = float(sub.mean())
                if best is None or mean > best[0]:
                    best = (mean, y, x)
    if best is None:
        raise BalanceError(
            f"no {block}x{block} block with gray variance <= {variance_threshold}; "
            "override the variance threshold for low-contrast slides"
        )
    return best[1], best[2]


def white_balance(mosaic: Raster, block: int = WB_BLOCK,
                  variance_threshold: float = WB_VARIANCE_THRESHOLD,
                  multiplicative: bool = False) -> Raster:
    """Shift (default) or scale every channel so the background reads white.

    Additive: add 255 - b_c per channel, clamped, where b_c is the mean of the
    brightest low-variance block. The multiplicative variant scales by 255/b_c.
    """
    y, x = find_background_block(mosaic, block, variance_threshold)
    ref = mosaic.data[y : y + block, x : x + block].reshape(-1, 3).mean(axis=0)
    if multiplicative:
        scaled = mosaic.data.astype(np.float64) * (255.0 / np.maximum(ref, 1e-6))
        return Raster(quantize_u8(scaled), mosaic.scale)
    offsets = 255.0 - ref
    shifted = mosaic.data.astype(np.float64) + offsets[None, None, :]
    return Raster(quantize_u8(shifted), mosaic.scale)


# ---------------------------------------------------------------------------
# Segmentation
# ---------------------------------------------------------------------------

def otsu_threshold(gray: np.ndarray) -> int:
    """Otsu's threshold on an 8-bit image (maximum between-class variance)."""
    hist = np.bincount(gray.ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    if total == 0:
        raise ParameterError("empty image")
    w0 = np.cumsum(hist)
    w1 = total - w0
    cum = np.cumsum(hist * np.arange(256))
    mean0 = np.divide(cum, w0, out=np.zeros(256), where=w0 > 0)
    mean1 = np.divide(cum[-1] - cum, w1, out=np.zeros(256), where=w1 > 0)
    between = w0 * w1 * (mean0 - mean1) ** 2
    return int(np.argmax(between))


def segment_cores(balanced: Raster, core_diameter_px: float,
                  min_area_fraction: float = 0.25) -> list[Box]:
    """Bounding boxes of tissue cores in a white-balanced mosaic.

    Grayscale, Otsu threshold (tissue below), box-blur of the binary mask
    (radius core_diameter_px / 20, re-thresholded at 0.5) to fill pinholes,
    border-touching components cleared, small components rejected.
    """
    if core_diameter_px <= 0:
        raise ParameterError("core_diameter_px must be positive")
    g = to_gray(balanced).data
    level = otsu_threshold(g)
    mask = g < level
    radius = int(np.ceil(core_diameter_px / 20.0))
    if radius > 0:
        size = 2 * radius + 1
        smoothed = ndimage.uniform_filter(mask.astype(np.float32), size=size,
                                          mode="constant")
        mask = smoothed >= 0.5
    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if count == 0:
        raise SegmentationError(
            f"no components found after thresholding (Otsu level {level})"
        )
    border = np.unique(np.concatenate([
        labels[0], labels[-1], labels[:, 0], labels[:, -1]
    ]))
    border = set(border.tolist()) - {0}
    min_area = min_area_fraction * np.pi * (core_diameter_px / 2.0) ** 2
    boxes: list[Box] = []
    for i, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None or i in border:
            continue
        area = int((labels[sl] == i).sum())
        if area < min_area:
            continue
        ys, xs = sl
        boxes.append((xs.start, ys.start, xs.stop, ys.stop))
    if not boxes:
        raise SegmentationError(
            f"all components rejected by border clearing or the minimum-area "
            f"filter (Otsu level {level})"
        )
    boxes.sort(key=lambda b: (b[1], b[0]))
    return boxes


# ---------------------------------------------------------------------------
# Grid fitting and labeling
# ---------------------------------------------------------------------------

@dataclass
class GridAssignment:
    """Per-cell box assignment on the grid spanned by the outermost boxes."""

    grid_rows: int
    grid_cols: int
    cells: dict[tuple[int, int], Box]
    conflicts: list[tuple[int, int, Box]]  # (row, col, dropped smaller box)


def fit_grid(boxes: list[Box], grid_rows: int, grid_cols: int) -> GridAssignment:
    """Divide the union rectangle of all boxes into equal cells and assign
    each box to the cell containing its centroid. Conflicts keep the larger box.
    """
    if grid_rows < 1 or grid_cols < 1:
        raise ParameterError("grid dimensions must be >= 1")
    if not boxes:
        raise ParameterError("need at least one box to fit a grid")
    x0 = min(b[0] for b in boxes)
    y0 = min(b[1] for b in boxes)
    x1 = max(b[2] for b in boxes)
    y1 = max(b[3] for b in boxes)
    cell_w = (x1 - x0) / grid_cols
    cell_h = (y1 - y0) / grid_rows
    cells: dict[tuple[int, int], Box] = {}
    conflicts: list[tuple[int, int, Box]] = []
    for box in boxes:
        cx, cy = box_center(box)
        col = int((cx - x0) / cell_w) if cell_w > 0 else 0
        row = int((cy - y0) / cell_h) if cell_h > 0 else 0
        col = min(max(col, 0), grid_cols - 1)
        row = min(max(row, 0), grid_rows - 1)
        key = (row, col)
        if key in cells:
            keep, drop = ((cells[key], box) if box_area(cells[key]) >= box_area(box)
                          else (box, cells[key]))
            cells[key] = keep
            conflicts.append((row, col, drop))
        else:
            cells[key] = box
    return GridAssignment(grid_rows, grid_cols, cells, conflicts)


@dataclass
class LabelMap:
    """Ground-truth scores keyed by (grid row, grid col)."""

    grid_rows: int
    grid_cols: int
    scores: dict[tuple[int, int], int]

    def __post_init__(self):
        for (r, c), s in self.scores.items():
            if s not in (0, 1, 2, 3):
                raise ParameterError(f"score {s!r} at ({r},{c}) not in {{0,1,2,3}}")
            if not (0 <= r < self.grid_rows and 0 <= c < self.grid_cols):
                raise ParameterError(f"entry ({r},{c}) outside the grid")

    @classmethod
    def from_csv(cls, path: str | Path, grid_rows: int | None = None,
                 grid_cols: int | None = None) -> "LabelMap":
        """Load `row,col,score` rows (header required; extra columns ignored,
        so the slide ground-truth layout export loads directly)."""
        scores: dict[tuple[int, int], int] = {}
        with open(path, "r", newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"row", "col", "score"} <= set(
                reader.fieldnames
            ):
                raise ParameterError(
                    f"label map {path} needs a header with row,col,score"
                )
            for rec in reader:
                key = (int(rec["row"]), int(rec["col"]))
                if key in scores:
                    raise ParameterError(f"duplicate label map entry {key}")
                scores[key] = int(rec["score"])
        if not scores:
            raise ParameterError(f"label map {path} is empty")
        rows = grid_rows if grid_rows is not None else max(k[0] for k in scores) + 1
        cols = grid_cols if grid_cols is not None else max(k[1] for k in scores) + 1
        return cls(rows, cols, scores)


@dataclass
class CoreRecord:
    """A segmented, grid-addressed, labeled tissue core."""

    slide_id: str
    grid_row: int
    grid_col: int
    box: Box
    image: Raster
    label: int | None      # HER2 score, None = unknown
    repeat: int

    def __post_init__(self):
        if not (0 <= self.repeat < 3):
            raise ParameterError("repeat index must be 0, 1, or 2")
        if self.label is not None and self.label not in (0, 1, 2, 3):
            raise ParameterError(f"label {self.label!r} not in {{0,1,2,3}}")

    @property
    def core_id(self) -> str:
        return f"{self.slide_id}:r{self.grid_row}c{self.grid_col}"


def assign_labels(mosaic: Raster, assignment: GridAssignment, label_map: LabelMap,
                  slide_id: str, repeat: int) -> tuple[list[CoreRecord], list[str]]:
    """Crop every filled cell and attach its score from the label map.

    Filled cells missing from the map become label-unknown records with a
    warning; map entries without a segmented core are logged as missing.
    """
    if (assignment.grid_rows, assignment.grid_cols) != (
        label_map.grid_rows, label_map.grid_cols
    ):
        raise LabelingError(
            f"grid {assignment.grid_rows}x{assignment.grid_cols} does not match "
            f"label map {label_map.grid_rows}x{label_map.grid_cols}"
        )
    records: list[CoreRecord] = []
    warnings: list[str] = []
    for key in sorted(assignment.cells):
        row, col = key
        box = assignment.cells[key]
        x0, y0, x1, y1 = box
        crop = mosaic.data[y0:y1, x0:x1].copy()
        label = label_map.scores.get(key)
        if label is None:
            warnings.append(f"cell ({row},{col}) has a core but no label map entry")
        records.append(CoreRecord(slide_id, row, col, box, Raster(crop, mosaic.scale),
                                  label, repeat))
    for key in sorted(label_map.scores):
        if key not in assignment.cells:
            warnings.append(f"label map entry {key} has no segmented core")
    return records, warnings


# ---------------------------------------------------------------------------
# Patch stacks
# ---------------------------------------------------------------------------

def bilinear_resize(data: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel centers; identity at equal size."""
    h, w = data.shape[:2]
    if (h, w) == (out_h, out_w):
        return data.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    d = data.astype(np.float64)
    top = d[np.ix_(y0, x0)] * (1 - fx) + d[np.ix_(y0, x1)] * fx
    bot = d[np.ix_(y1, x0)] * (1 - fx) + d[np.ix_(y1, x1)] * fx
    return quantize_u8(top * (1 - fy) + bot * fy)


def replicate_pad_to(data: np.ndarray, min_h: int, min_w: int) -> np.ndarray:
    """Replicate-pad symmetrically so both dimensions reach the minima."""
    h, w = data.shape[:2]
    pad_h = max(0, min_h - h)
    pad_w = max(0, min_w - w)
    if pad_h == 0 and pad_w == 0:
        return data
    return np.pad(
        data,
        ((pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2), (0, 0)),
        mode="edge",
    )


@dataclass
class PatchStack:
    """Classification input: whole-core downsample plus four random crops."""

    patches: np.ndarray            # (5, 512, 512, 3) uint8
    core_id: str
    repeat: int
    crop_seed: int
    label: int | None = None

    def __post_init__(self):
        self.patches = np.ascontiguousarray(self.patches)
        expected = (STACK_PATCHES, STACK_SIDE, STACK_SIDE, 3)
        if self.patches.shape != expected or self.patches.dtype != np.uint8:
            raise ParameterError(
                f"patch stack must be uint8 {expected}, got "
                f"{self.patches.dtype} {self.patches.shape}"
            )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        if path.suffix != ".bin":
            path = path.with_suffix(".bin")
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(self.patches.tobytes())
        sidecar = {
            "core_id": self.core_id, "repeat": self.repeat,
            "crop_seed": self.crop_seed, "label": self.label,
            "patches": STACK_PATCHES, "side": STACK_SIDE,
        }
        with open(path.with_suffix(".json"), "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, indent=1)
            fh.write("\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "PatchStack":
        path = Path(path)
        if path.suffix != ".bin":
            path = path.with_suffix(".bin")
        with open(path.with_suffix(".json"), "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        data = np.fromfile(path, dtype=np.uint8)
        patches = data.reshape(STACK_PATCHES, STACK_SIDE, STACK_SIDE, 3)
        label = meta.get("label")
        return cls(patches, meta["core_id"], int(meta["repeat"]),
                   int(meta["crop_seed"]), None if label is None else int(label))


def build_stack(core: CoreRecord, crop_seed: int) -> PatchStack:
    """Patch 0: whole core resampled to 512x512. Patches 1-4: random 512x512
    crops from the original-resolution core (replicate-padded if too small).
    Deterministic for a fixed seed.
    """
    img = core.image.data
    if img.size == 0:
        raise ParameterError("core image is empty")
    patches = np.empty((STACK_PATCHES, STACK_SIDE, STACK_SIDE, 3), dtype=np.uint8)
    patches[0] = bilinear_resize(img, STACK_SIDE, STACK_SIDE)
    src = replicate_pad_to(img, STACK_SIDE, STACK_SIDE)
    h, w = src.shape[:2]
    rng = np.random.default_rng(crop_seed)
    for i in range(1, STACK_PATCHES):
        y = int(rng.integers(0, h - STACK_SIDE + 1))
        x = int(rng.integers(0, w - STACK_SIDE + 1))
        patches[i] = src[y : y + STACK_SIDE, x : x + STACK_SIDE]
    return PatchStack(patches, core.core_id, core.repeat, crop_seed, core.label)


# ---------------------------------------------------------------------------
# Core record IO: a directory of rasters plus cores.json
# ---------------------------------------------------------------------------

def write_cores(records: list[CoreRecord], path: str | Path) -> Path:
    from .imaging import write_raster

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = []
    for rec in records:
        name = f"core_r{rec.grid_row}c{rec.grid_col}"
        write_raster(rec.image, path / f"{name}.bin")
        index.append({
            "id": rec.core_id, "slide": rec.slide_id,
            "row": rec.grid_row, "col": rec.grid_col,
            "box": list(rec.box), "label": rec.label, "repeat": rec.repeat,
            "file": f"{name}.bin",
        })
    with open(path / "cores.json", "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=1)
        fh.write("\n")
    return path


def read_cores(path: str | Path) -> list[CoreRecord]:
    from .imaging import read_raster

    path = Path(path)
    with open(path / "cores.json", "r", encoding="utf-8") as fh:
        index = json.load(fh)
    records = []
    for entry in index:
        raster = read_raster(path / entry["file"])
        label = entry.get("label")
        records.append(CoreRecord(
            entry["slide"], int(entry["row"]), int(entry["col"]),
            tuple(entry["box"]), raster,
            None if label is None else int(label), int(entry["repeat"]),
        ))
    return records
