"""Synthetic stained-slide generation, serpentine scan planning, frame rendering.

The slide model is deliberately band-limited: stain blobs have soft radial
skirts and the tissue mottle comes from bilinearly upsampled coarse noise.
That keeps the discrete box-blur render within one gray level of sub-exposure
temporal averaging, and gives the stitcher realistic texture to correlate on.

Trajectory convention: per-frame stage positions are the FOV center at
mid-exposure, in slide micrometres. Within a scan line x is affine in frame
index with slope +/- stage_speed / frame_rate; y is constant. Each line is
bracketed by paused frames and followed by jump frames toward the next line.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .classify import brown_mask
from .errors import ParameterError, RenderError
from .imaging import (
    BlurSpec,
    FrameManifest,
    FrameSequence,
    Raster,
    blur_array,
    round_half_up,
)

BACKGROUND_RGB = (245, 243, 240)
TISSUE_PINK = (205, 175, 188)
TISSUE_PINK_DARK = (182, 148, 165)
STAIN_BROWN = (150, 95, 55)

PHASE_PAUSED = 0
PHASE_SCANNING = 1
PHASE_JUMPING = 2
PHASE_NAMES = {PHASE_PAUSED: "paused", PHASE_SCANNING: "scanning", PHASE_JUMPING: "jumping"}
PHASE_CODES = {v: k for k, v in PHASE_NAMES.items()}
DIRECTION_NAMES = {0: "none", 1: "+x", -1: "-x"}
DIRECTION_CODES = {v: k for k, v in DIRECTION_NAMES.items()}


@dataclass(frozen=True)
class ClassAppearance:
    """Stain appearance for one score: denser, clumpier brown as score rises."""

    brown_fraction: float            # target fraction of brown pixels in the core disk
    cluster_count: tuple[int, int]   # inclusive range of blob cluster seeds
    blob_radius_um: tuple[float, float]


DEFAULT_APPEARANCE: dict[int, ClassAppearance] = {
    0: ClassAppearance(0.012, (2, 4), (16.0, 30.0)),
    1: ClassAppearance(0.15, (3, 6), (20.0, 42.0)),
    2: ClassAppearance(0.35, (4, 7), (24.0, 54.0)),
    3: ClassAppearance(0.60, (5, 9), (28.0, 66.0)),
}


@dataclass
class SlideSpec:
    """Layout and appearance of one synthetic TMA slide.

    ``scores`` is a grid_rows x grid_cols nested sequence of HER2 scores in
    {0,1,2,3}, with None marking an empty cell.
    """

    grid_rows: int
    grid_cols: int
    core_diameter_um: float
    core_pitch_um: float
    margin_um: float
    scale: float                      # um per pixel
    scores: Sequence[Sequence[int | None]]
    appearance: dict[int, ClassAppearance] = field(
        default_factory=lambda: dict(DEFAULT_APPEARANCE)
    )
    seed: int = 0
    slide_width_um: float | None = None   # default: margins + grid
    slide_height_um: float | None = None

    def __post_init__(self):
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ParameterError("grid dimensions must be >= 1")
        if not (self.core_pitch_um > self.core_diameter_um > 0):
            raise ParameterError("need core_pitch_um > core_diameter_um > 0")
        if not (self.scale > 0) or self.margin_um < 0:
            raise ParameterError("scale must be > 0 and margin_um >= 0")
        if len(self.scores) != self.grid_rows or any(
            len(r) != self.grid_cols for r in self.scores
        ):
            raise ParameterError("scores must be a grid_rows x grid_cols grid")
        seen = set()
        for row in self.scores:
            for s in row:
                if s is not None:
                    if s not in (0, 1, 2, 3):
                        raise ParameterError(f"score {s!r} not in {{0,1,2,3}}")
                    if s not in self.appearance:
                        raise ParameterError(f"no appearance for score {s}")
                    seen.add(s)
        fracs = [self.appearance[s].brown_fraction for s in sorted(self.appearance)]
        if any(b <= a for a, b in zip(fracs, fracs[1:])):
            raise ParameterError("brown fractions must strictly increase with score")
        if self.slide_width_um is None:
            self.slide_width_um = 2 * self.margin_um + self.grid_cols * self.core_pitch_um
        if self.slide_height_um is None:
            self.slide_height_um = 2 * self.margin_um + self.grid_rows * self.core_pitch_um
        min_w = self.grid_cols * self.core_pitch_um
        min_h = self.grid_rows * self.core_pitch_um
        if self.slide_width_um < min_w or self.slide_height_um < min_h:
            raise ParameterError(
                f"grid {self.grid_rows}x{self.grid_cols} at pitch {self.core_pitch_um} um "
                f"does not fit slide {self.slide_width_um} x {self.slide_height_um} um"
            )


@dataclass(frozen=True)
class CoreSite:
    """Ground-truth placement and label of one core on a slide."""

    row: int
    col: int
    center_x_um: float
    center_y_um: float
    diameter_um: float
    score: int


@dataclass
class SlideTruth:
    """Rendered slide plus its ground-truth layout."""

    image: Raster
    layout: list[CoreSite]
    background_rgb: tuple[int, int, int] = BACKGROUND_RGB

    def write_layout_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["row", "col", "center_x_um", "center_y_um", "diameter_um", "score"])
            for site in self.layout:
                wr.writerow([site.row, site.col, f"{site.center_x_um:.3f}",
                             f"{site.center_y_um:.3f}", f"{site.diameter_um:.3f}", site.score])
        return path


def load_layout_csv(path: str | Path) -> list[CoreSite]:
    sites = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            sites.append(CoreSite(
                row=int(rec["row"]), col=int(rec["col"]),
                center_x_um=float(rec["center_x_um"]),
                center_y_um=float(rec["center_y_um"]),
                diameter_um=float(rec["diameter_um"]),
                score=int(rec["score"]),
            ))
    return sites


def value_noise(shape: tuple[int, int], cell_px: float, rng: np.random.Generator) -> np.ndarray:
    """Band-limited noise in [0,1]: bilinear upsampling of a coarse uniform grid."""
    h, w = shape
    gh = int(np.ceil(h / cell_px)) + 2
    gw = int(np.ceil(w / cell_px)) + 2
    grid = rng.random((gh, gw))
    ys = np.arange(h) / cell_px
    xs = np.arange(w) / cell_px
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    tl = grid[np.ix_(y0, x0)]
    tr = grid[np.ix_(y0, x0 + 1)]
    bl = grid[np.ix_(y0 + 1, x0)]
    br = grid[np.ix_(y0 + 1, x0 + 1)]
    return (tl * (1 - fy) * (1 - fx) + tr * (1 - fy) * fx
            + bl * fy * (1 - fx) + br * fy * fx)


def _soft_disk(shape: tuple[int, int], cy: float, cx: float, radius: float,
               skirt: float) -> np.ndarray:
    """Alpha mask of a disk with a linear skirt: 1 inside, ramp to 0 over skirt px."""
    h, w = shape
    yy = np.arange(h)[:, None] - cy
    xx = np.arange(w)[None, :] - cx
    r = np.sqrt(yy * yy + xx * xx)
    return np.clip((radius - r) / max(skirt, 1e-6), 0.0, 1.0)


def _render_core(patch: np.ndarray, cy: float, cx: float, radius_px: float,
                 app: ClassAppearance, scale: float, rng: np.random.Generator) -> None:
    """Draw one tissue core (in place) centered at (cy, cx) on a float patch."""
    h, w = patch.shape[:2]
    skirt_px = max(11.0 / scale, 2.0)
    disk = _soft_disk((h, w), cy, cx, radius_px, skirt_px)

    # pale-pink base with coarse mottle; gives the stitcher texture to lock onto
    mottle = value_noise((h, w), max(45.0 / scale, 4.0), rng)
    pink = np.empty((h, w, 3), dtype=np.float64)
    for c in range(3):
        pink[..., c] = TISSUE_PINK[c] + (TISSUE_PINK_DARK[c] - TISSUE_PINK[c]) * 0.55 * mottle
    patch += disk[..., None] * (pink - patch)

    target = app.brown_fraction
    if target <= 0:
        return
    n_clusters = int(rng.integers(app.cluster_count[0], app.cluster_count[1] + 1))
    angles = rng.random(n_clusters) * 2 * np.pi
    radii = np.sqrt(rng.random(n_clusters)) * radius_px * 0.72
    centers = np.stack([cy + radii * np.sin(angles), cx + radii * np.cos(angles)], axis=1)
    cluster_sigma = radius_px / 3.2
    disk_area = np.pi * radius_px * radius_px
    brown = np.array(STAIN_BROWN, dtype=np.float64)

    mean_r_px = 0.5 * (app.blob_radius_um[0] + app.blob_radius_um[1]) / scale
    blob_area = np.pi * mean_r_px * mean_r_px
    max_blobs = 6000
    drawn = 0
    frac = 0.0
    while drawn < max_blobs:
        # draw only enough blobs to plausibly close the remaining deficit
        deficit_px = (target - frac) * disk_area
        batch = int(np.clip(0.7 * deficit_px / blob_area, 1, 64))
        for _ in range(batch):
            k = int(rng.integers(0, n_clusters))
            by = centers[k, 0] + rng.normal(0.0, cluster_sigma)
            bx = centers[k, 1] + rng.normal(0.0, cluster_sigma)
            br_um = rng.uniform(app.blob_radius_um[0], app.blob_radius_um[1])
            br_px = br_um / scale
            jitter = rng.uniform(-12, 12, size=3)
            color = np.clip(brown + jitter, 0, 255)
            y0, y1 = max(0, int(by - br_px - skirt_px)), min(h, int(by + br_px + skirt_px) + 1)
            x0, x1 = max(0, int(bx - br_px - skirt_px)), min(w, int(bx + br_px + skirt_px) + 1)
            if y0 >= y1 or x0 >= x1:
                continue
            blob_skirt = max(skirt_px, 0.4 * br_px)
            alpha = _soft_disk((y1 - y0, x1 - x0), by - y0, bx - x0, br_px, blob_skirt)
            alpha *= disk[y0:y1, x0:x1]  # stain stays inside the core
            region = patch[y0:y1, x0:x1]
            region += alpha[..., None] * (color[None, None, :] - region)
        drawn += batch
        frac = brown_mask(np.clip(patch, 0, 255).astype(np.uint8)).sum() / disk_area
        if frac >= target:
            break


def synth_slide(spec: SlideSpec) -> SlideTruth:
    """Render a ground-truth slide: stained cores on a flat near-white background.

    Deterministic for a fixed spec (including seed). Measured brown fraction
    rises with score by construction; empty cells stay pure background.
    """
    rng = np.random.default_rng(spec.seed)
    W = int(round_half_up(spec.slide_width_um / spec.scale))
    H = int(round_half_up(spec.slide_height_um / spec.scale))
    img = np.empty((H, W, 3), dtype=np.float64)
    img[...] = np.array(BACKGROUND_RGB, dtype=np.float64)

    radius_px = spec.core_diameter_um / 2.0 / spec.scale
    layout: list[CoreSite] = []
    x_origin = (spec.slide_width_um - spec.grid_cols * spec.core_pitch_um) / 2.0
    y_origin = (spec.slide_height_um - spec.grid_rows * spec.core_pitch_um) / 2.0
    for r in range(spec.grid_rows):
        for c in range(spec.grid_cols):
            score = spec.scores[r][c]
            cx_um = x_origin + (c + 0.5) * spec.core_pitch_um
            cy_um = y_origin + (r + 0.5) * spec.core_pitch_um
            if score is None:
                continue
            app = spec.appearance[score]
            cx_px, cy_px = cx_um / spec.scale, cy_um / spec.scale
            half = int(np.ceil(radius_px + 10.0 / spec.scale)) + 2
            y0, y1 = int(cy_px) - half, int(cy_px) + half + 1
            x0, x1 = int(cx_px) - half, int(cx_px) + half + 1
            if y0 < 0 or x0 < 0 or y1 > H or x1 > W:
                raise ParameterError(
                    f"core ({r},{c}) does not fit inside the slide image"
                )
            patch = img[y0:y1, x0:x1]
            _render_core(patch, cy_px - y0, cx_px - x0, radius_px, app, spec.scale, rng)
            layout.append(CoreSite(r, c, cx_um, cy_um, spec.core_diameter_um, score))
    raster = Raster(np.clip(round_half_up(img), 0, 255).astype(np.uint8), spec.scale)
    return SlideTruth(raster, layout)


# ---------------------------------------------------------------------------
# Scan planning
# ---------------------------------------------------------------------------

@dataclass
class ScanConfig:
    """Stage and camera parameters of one continuous serpentine scan."""

    stage_speed: float        # um/s
    frame_rate: float         # Hz
    exposure: float           # s
    fov_width_um: float
    fov_height_um: float
    row_pitch_um: float | None = None   # default 0.85 * fov height (15% row overlap)
    pause_s: float = 0.5
    jump_frames: int = 3
    line_count: int | None = None       # default: cover the slide height
    start_direction: int = +1
    phase_frac: float = 0.0             # fractional-step scan start offset in [0, 1)

    def __post_init__(self):
        if not (self.stage_speed > 0):
            raise ParameterError("stage_speed must be positive")
        if not (self.frame_rate > 0):
            raise ParameterError("frame_rate must be positive")
        if not (0 <= self.exposure <= 1.0 / self.frame_rate):
            raise ParameterError("exposure must satisfy 0 <= exposure <= frame period")
        if self.fov_width_um <= 0 or self.fov_height_um <= 0:
            raise ParameterError("FOV dimensions must be positive")
        if self.row_pitch_um is None:
            self.row_pitch_um = 0.85 * self.fov_height_um
        if not (0.8 * self.fov_height_um <= self.row_pitch_um <= self.fov_height_um):
            raise ParameterError(
                "row_pitch_um must keep row overlap between 0 and 20% of FOV height"
            )
        if self.pause_s < 0 or self.jump_frames < 0:
            raise ParameterError("pause_s and jump_frames must be nonnegative")
        if self.start_direction not in (+1, -1):
            raise ParameterError("start_direction must be +1 or -1")
        if not (0 <= self.phase_frac < 1):
            raise ParameterError("phase_frac must be in [0, 1)")

    @property
    def step_um(self) -> float:
        """Stage displacement per scanning frame."""
        return self.stage_speed / self.frame_rate

    @property
    def pause_frames(self) -> int:
        return int(round_half_up(self.pause_s * self.frame_rate))

    @property
    def acquisition_rate_mm2_s(self) -> float:
        """Raw acquisition throughput: FOV area times frame rate."""
        return self.fov_width_um * self.fov_height_um * self.frame_rate / 1e6

    def blur_spec(self, direction: int) -> BlurSpec:
        return BlurSpec(self.stage_speed, self.exposure, direction)


@dataclass
class StageTrajectory:
    """Per-frame stage positions (FOV center at mid-exposure) with phase tags."""

    x_um: np.ndarray       # float64
    y_um: np.ndarray       # float64
    phase: np.ndarray      # int8: PHASE_* codes
    direction: np.ndarray  # int8: +1 / -1 / 0

    def __post_init__(self):
        n = len(self.x_um)
        if not (len(self.y_um) == len(self.phase) == len(self.direction) == n):
            raise ParameterError("trajectory arrays must have equal length")

    def __len__(self) -> int:
        return len(self.x_um)

    @property
    def moving(self) -> np.ndarray:
        """Ground-truth motion per frame (scanning or jumping)."""
        return self.phase != PHASE_PAUSED

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["frame", "x_um", "y_um", "phase", "direction"])
            for i in range(len(self)):
                wr.writerow([i, repr(float(self.x_um[i])), repr(float(self.y_um[i])),
                             PHASE_NAMES[int(self.phase[i])],
                             DIRECTION_NAMES[int(self.direction[i])]])
        return path

    @classmethod
    def read_csv(cls, path: str | Path) -> "StageTrajectory":
        xs, ys, ph, dr = [], [], [], []
        with open(path, "r", newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                xs.append(float(rec["x_um"]))
                ys.append(float(rec["y_um"]))
                ph.append(PHASE_CODES[rec["phase"]])
                dr.append(DIRECTION_CODES[rec["direction"]])
        return cls(np.array(xs), np.array(ys),
                   np.array(ph, dtype=np.int8), np.array(dr, dtype=np.int8))


def plan_trajectory(config: ScanConfig, extent_um: tuple[float, float]) -> StageTrajectory:
    """Plan a serpentine scan over a slide of the given (width, height) in um.

    Each scan line is: pause, scan, pause, jump. Scanning frames advance by
    stage_speed / frame_rate um; jump frames interpolate y toward the next
    line (the final line's jump frames hold position).
    """
    width_um, height_um = extent_um
    step = config.step_um
    sweep = config.stage_speed * config.exposure
    x_lo = config.fov_width_um / 2 + sweep / 2
    x_hi = width_um - config.fov_width_um / 2 - sweep / 2
    usable = x_hi - x_lo - config.phase_frac * step
    if usable < step:
        raise ParameterError(
            f"slide width {width_um} um gives a zero-length scan line "
            f"(usable span {usable:.1f} um < step {step:.1f} um)"
        )
    n_scan = int(usable // step) + 1
    x_start = x_lo + config.phase_frac * step

    if config.line_count is None:
        line_count = int((height_um - config.fov_height_um) // config.row_pitch_um) + 1
    else:
        line_count = config.line_count
    if line_count < 1:
        raise ParameterError("line_count must be >= 1")
    y_last = config.fov_height_um / 2 + (line_count - 1) * config.row_pitch_um
    if y_last + config.fov_height_um / 2 > height_um:
        raise ParameterError(
            f"{line_count} lines at pitch {config.row_pitch_um} um exceed "
            f"slide height {height_um} um"
        )

    n_pause = config.pause_frames
    xs, ys, phases, dirs = [], [], [], []
    direction = config.start_direction
    for line in range(line_count):
        y = config.fov_height_um / 2 + line * config.row_pitch_um
        if direction == +1:
            line_x = x_start + step * np.arange(n_scan)
        else:
            line_x = x_start + step * (n_scan - 1) - step * np.arange(n_scan)
        for _ in range(n_pause):
            xs.append(line_x[0]); ys.append(y)
            phases.append(PHASE_PAUSED); dirs.append(0)
        for x in line_x:
            xs.append(x); ys.append(y)
            phases.append(PHASE_SCANNING); dirs.append(direction)
        for _ in range(n_pause):
            xs.append(line_x[-1]); ys.append(y)
            phases.append(PHASE_PAUSED); dirs.append(0)
        y_next = y + config.row_pitch_um if line + 1 < line_count else y
        for j in range(config.jump_frames):
            frac = (j + 1) / (config.jump_frames + 1)
            xs.append(line_x[-1]); ys.append(y + (y_next - y) * frac)
            phases.append(PHASE_JUMPING); dirs.append(0)
        direction = -direction
    return StageTrajectory(
        np.array(xs), np.array(ys),
        np.array(phases, dtype=np.int8), np.array(dirs, dtype=np.int8),
    )


# ---------------------------------------------------------------------------
# Frame rendering
# ---------------------------------------------------------------------------

def _crop_origin(x_um: float, y_um: float, direction: int, config: ScanConfig,
                 scale: float, fw: int, fh: int) -> tuple[int, int]:
    """Integer crop origin (col, row) for a frame's exposure-start FOV."""
    sweep_um = config.stage_speed * config.exposure if direction != 0 else 0.0
    x_start_um = x_um - direction * sweep_um / 2.0
    col = int(round_half_up((x_start_um - config.fov_width_um / 2.0) / scale))
    row = int(round_half_up((y_um - config.fov_height_um / 2.0) / scale))
    return col, row


def render_frames(truth: SlideTruth, traj: StageTrajectory, config: ScanConfig,
                  frame_width_px: int, frame_height_px: int) -> FrameSequence:
    """Render the motion-blurred frame sequence a continuous scan would capture.

    Scanning frames are crops of the per-line pre-blurred slide band (box of
    stage_speed * exposure um in the line's direction, per the forward model);
    paused and jumping frames are plain crops. Frames are generated lazily.
    """
    slide = truth.image.data
    scale = truth.image.scale
    fw, fh = frame_width_px, frame_height_px
    H, W = slide.shape[:2]
    w_px = config.blur_spec(+1).width_px(scale)

    manifest = FrameManifest(
        frame_count=len(traj),
        width=fw,
        height=fh,
        frame_period_s=1.0 / config.frame_rate,
        exposure_s=config.exposure,
        scale_um_per_px=scale,
    )

    def frames() -> Iterator[np.ndarray]:
        band_key = None   # (row0, direction) of the cached pre-blurred band
        band = None
        prev: tuple[int, int, int] | None = None
        prev_frame = None
        for i in range(len(traj)):
            direction = int(traj.direction[i])
            col, row = _crop_origin(
                float(traj.x_um[i]), float(traj.y_um[i]), direction, config, scale, fw, fh
            )
            if not (0 <= col <= W - fw and 0 <= row <= H - fh):
                raise RenderError(
                    f"frame {i}: crop origin ({col},{row}) outside slide "
                    f"{W}x{H} for {fw}x{fh} frame"
                )
            key = (col, row, direction)
            if key == prev:
                yield prev_frame
                continue
            if direction == 0 or w_px <= 1:
                frame = slide[row : row + fh, col : col + fw].copy()
            else:
                if band_key != (row, direction):
                    band = blur_array(slide[row : row + fh], w_px, direction)
                    band_key = (row, direction)
                frame = band[:, col : col + fw].copy()
            prev, prev_frame = key, frame
            yield frame

    return FrameSequence(manifest, frames())
