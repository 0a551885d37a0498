"""Scan-structure recovery and mosaic composition from an unlabeled video.

Three stages, all blind to the trajectory that produced the frames:

1. Pearson correlation of consecutive grayscale frames (central 80% window)
   classifies frames as moving or static. Featureless regions defeat this:
   a moving camera over blank slide correlates like a paused one.
2. A square wave (period, duty, phase) fitted to the motion labels by
   exhaustive residue-histogram search plus hill climbing repairs those
   errors and yields the start and end of each scan line.
3. Frames are placed by dead reckoning from the known stage step (optionally
   refined by bounded 1-D cross-correlation) and feather-blended per line,
   with a sequential row-feather pass between lines.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import maximum_filter1d

from .errors import ComposeError, FitError, ParameterError, StructuralError
from .imaging import FrameManifest, Raster, gray_f, quantize_u8, round_half_up

RAW_CORRELATION = "raw-correlation"
SQUARE_WAVE_REFINED = "square-wave-refined"

DEFAULT_WINDOW = 5
DEFAULT_THETA_STATIC = 0.985
DUPLICATE_CORR = 1.0 - 1e-9  # correlation of a frame with an identical neighbor
DIRECTION_LABELS = {1: "+x", -1: "-x"}


@dataclass
class CorrelationSeries:
    """Per-consecutive-pair Pearson correlation of grayscale frames."""

    values: np.ndarray  # length frame_count - stride, each in [-1, 1]
    stride: int = 1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or len(self.values) < 1:
            raise ParameterError("correlation series must be a nonempty 1-D array")
        if np.any(np.abs(self.values) > 1 + 1e-9):
            raise ParameterError("correlation values must lie in [-1, 1]")

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class MotionLabels:
    """Per-frame moving/static labels with provenance."""

    moving: np.ndarray  # bool, length frame_count
    provenance: str = RAW_CORRELATION

    def __post_init__(self):
        self.moving = np.asarray(self.moving, dtype=bool)
        if self.moving.ndim != 1:
            raise ParameterError("labels must be a 1-D bool array")

    def __len__(self) -> int:
        return len(self.moving)


@dataclass(frozen=True)
class SquareWaveModel:
    """Periodic moving/static pattern: moving for duty*period frames per period."""

    period: int
    duty: float
    phase: int
    line_count: int

    def __post_init__(self):
        if self.period < 2:
            raise ParameterError("period must be >= 2")
        if not (0 < self.duty < 1):
            raise ParameterError("duty must lie strictly between 0 and 1")

    @property
    def moving_frames_per_period(self) -> int:
        return int(round_half_up(self.duty * self.period))

    def predict(self, n: int) -> np.ndarray:
        k = self.moving_frames_per_period
        return ((np.arange(n) - self.phase) % self.period) < k


@dataclass(frozen=True)
class ScanLineSegment:
    """One scan line recovered from the labels: frames [first, last] inclusive."""

    line_index: int
    first: int
    last: int
    direction: int  # +1 or -1
    row_index: int

    def __post_init__(self):
        if self.last < self.first:
            raise ParameterError("segment must contain at least one frame")
        if self.direction not in (+1, -1):
            raise ParameterError("direction must be +1 or -1")

    def __len__(self) -> int:
        return self.last - self.first + 1


@dataclass
class StitchedSlide:
    """Composed mosaic with per-frame placements and fit provenance."""

    mosaic: Raster
    placements: list[tuple[int, int, int]]  # (frame index, x px, y px)
    model: SquareWaveModel | None = None
    provenance: dict = field(default_factory=dict)


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation; 1.0 if both inputs are constant, 0.0 if only one is."""
    a = a.ravel().astype(np.float64)
    b = b.ravel().astype(np.float64)
    da = a - a.mean()
    db = b - b.mean()
    va = float(da @ da)
    vb = float(db @ db)
    if va == 0.0 and vb == 0.0:
        return 1.0
    if va == 0.0 or vb == 0.0:
        return 0.0
    return float(np.clip((da @ db) / np.sqrt(va * vb), -1.0, 1.0))


def _central_window(gray: np.ndarray) -> np.ndarray:
    h, w = gray.shape
    return gray[h // 10 : h - h // 10, w // 10 : w - w // 10]


def correlation_series(frames: Iterable[np.ndarray], stride: int = 1) -> CorrelationSeries:
    """Correlation of grayscale frames i and i+stride over the central 80% window."""
    if stride < 1:
        raise ParameterError("stride must be >= 1")
    values: list[float] = []
    recent: list[np.ndarray] = []
    n = 0
    for frame in frames:
        g = _central_window(gray_f(frame))
        if len(recent) == stride:
            values.append(pearson(recent[0], g))
            recent.pop(0)
        recent.append(g)
        n += 1
    if n < stride + 1:
        raise ParameterError(f"need at least {stride + 1} frames, got {n}")
    return CorrelationSeries(np.array(values), stride=stride)


def classify_motion(series: CorrelationSeries, window: int = DEFAULT_WINDOW,
                    theta_static: float = DEFAULT_THETA_STATIC) -> MotionLabels:
    """Label a frame static when the windowed mean correlation around it >= theta."""
    v = series.values
    if not (1 <= window <= len(v)):
        raise ParameterError(f"window must lie in [1, {len(v)}], got {window}")
    n = len(v) + series.stride
    csum = np.concatenate([[0.0], np.cumsum(v)])
    half = window // 2
    lo = np.clip(np.arange(n) - half, 0, len(v))
    hi = np.clip(np.arange(n) - half + window, 1, len(v))
    lo = np.minimum(lo, hi - 1)
    score = (csum[hi] - csum[lo]) / (hi - lo)
    return MotionLabels(score < theta_static, provenance=RAW_CORRELATION)


def _moving_runs(moving: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of True as (first, last) inclusive."""
    runs = []
    idx = np.flatnonzero(moving)
    if idx.size == 0:
        return runs
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate([[idx[0]], idx[breaks + 1]])
    ends = np.concatenate([idx[breaks], [idx[-1]]])
    return list(zip(starts.tolist(), ends.tolist()))


def _duplicate_static(series: CorrelationSeries, f: int) -> bool:
    """True when frame f is an exact duplicate of a neighbor (a paused frame)."""
    v = series.values
    left = v[f - 1] if f - 1 >= 0 else 1.0
    right = v[f] if f < len(v) else 1.0
    return max(left, right) >= DUPLICATE_CORR


def snap_to_pauses(labels: MotionLabels, series: CorrelationSeries,
                   min_run: int = 5) -> MotionLabels:
    """Sharpen windowed motion labels against the exact pause signature.

    The windowed average smears every moving run into its bracketing pauses,
    and vertical jumps show up as short moving runs of their own. Paused
    frames are exact duplicates of a neighbor (correlation ~ 1.0), which
    genuinely scanning or jumping frames never are: each run is trimmed to
    its duplicate-free extent, then runs shorter than min_run (sub-scan-line,
    i.e. jumps) are dropped. The result is fit-ready: one moving run per
    scan line.
    """
    out = np.zeros(len(labels), dtype=bool)
    for a, b in _moving_runs(labels.moving):
        while a < b and _duplicate_static(series, a):
            a += 1
        while b > a and _duplicate_static(series, b):
            b -= 1
        if b - a + 1 >= min_run and not _duplicate_static(series, a):
            out[a : b + 1] = True
    return MotionLabels(out, provenance=labels.provenance)


def _hamming_scan(moving: np.ndarray, period: int, k_lo: int, k_hi: int):
    """Best (hamming, k, phase) for one period over window widths [k_lo, k_hi].

    With residue-class counts c_all/c_mov, a predicted-moving window W of
    width k starting at phase costs hamming = total_moving +
    sum_{r in W}(c_all[r] - 2*c_mov[r]); the best circular window of bounded
    width is found with a trailing sliding maximum over prefix sums.
    """
    n = len(moving)
    k_lo = max(1, k_lo)
    k_hi = min(period - 1, k_hi)
    if k_hi < k_lo:
        return (n + 1, 1, 0)
    residues = np.arange(n) % period
    c_all = np.bincount(residues, minlength=period).astype(np.int64)
    c_mov = np.bincount(residues[moving], minlength=period).astype(np.int64)
    total_moving = int(moving.sum())
    d = c_all - 2 * c_mov
    P = np.concatenate([[0], np.cumsum(np.concatenate([d, d]))]).astype(np.float64)
    # window sum (phase, k) = P[phase + k] - P[phase]; minimize over
    # phase in [0, period), k in [k_lo, k_hi]: for each end j = phase + k,
    # maximize P[phase] over phase in [j - k_hi, j - k_lo].
    size = k_hi - k_lo + 1
    # trailing max of P over [j - k_hi, j - k_lo]: filter window ends at index
    m = maximum_filter1d(P, size=size, mode="nearest", origin=-((size - 1) // 2))
    ends = np.arange(k_lo, min(period + k_hi, len(P)))
    scores = P[ends] - m[ends - k_lo]
    j = int(ends[np.argmin(scores)])
    lo = max(0, j - k_hi)
    hi = j - k_lo
    phase = int(lo + np.argmax(P[lo : hi + 1]))
    k = j - phase
    ham = total_moving + int(P[j] - P[phase])
    return (ham, k, phase % period)


def fit_square_wave(labels: MotionLabels,
                    period_range: tuple[int, int] | None = None,
                    duty_range: tuple[float, float] | None = None,
                    ) -> tuple[SquareWaveModel, MotionLabels]:
    """Fit (period, duty, phase) minimizing Hamming distance to the labels.

    Exhaustive over the period range (default: every period from 4 frames to
    the label length) with the optimal bounded-width circular window found in
    O(period) per candidate, then +-1 hill climbing. Returns the model and
    its predicted labels as the refined labels.
    """
    moving = labels.moving
    n = len(moving)
    n_moving = int(moving.sum())
    if n_moving == 0 or n_moving == n:
        raise FitError(
            "labels are all one class; square-wave fit is undefined, use raw labels"
        )
    if period_range is None:
        period_range = (4, n)
    if duty_range is None:
        duty_range = (0.0, 1.0)

    best = None
    for period in range(max(2, period_range[0]), min(n, max(2, period_range[1])) + 1):
        k_lo = max(1, int(np.floor(duty_range[0] * period)))
        k_hi = min(period - 1, int(np.ceil(duty_range[1] * period)))
        ham, k, phase = _hamming_scan(moving, period, k_lo, k_hi)
        if best is None or ham < best[0]:
            best = (ham, period, k, phase)

    if best is None:
        raise FitError("empty square-wave search space")

    # hill climb on (period, k, phase)
    ham, period, k, phase = best
    improved = True
    while improved:
        improved = False
        for dp in (-1, 0, 1):
            p2 = period + dp
            if p2 < 2:
                continue
            for dk in (-1, 0, 1):
                k2 = k + dk
                if not (1 <= k2 <= p2 - 1):
                    continue
                h2, k2b, ph2 = _hamming_scan(moving, p2, k2, k2)
                if h2 < ham:
                    ham, period, k, phase = h2, p2, k2b, ph2
                    improved = True

    predicted = ((np.arange(n) - phase) % period) < k
    line_count = len(_moving_runs(predicted))
    model = SquareWaveModel(period=period, duty=k / period, phase=phase,
                            line_count=line_count)
    return model, MotionLabels(predicted, provenance=SQUARE_WAVE_REFINED)


def hamming_distance(a: MotionLabels, b: MotionLabels) -> int:
    if len(a) != len(b):
        raise ParameterError("label lengths differ")
    return int((a.moving != b.moving).sum())


def extract_segments(labels: MotionLabels, model: SquareWaveModel | None,
                     start_direction: int = +1, jump_frames: int = 3,
                     series: CorrelationSeries | None = None,
                     theta_static: float = DEFAULT_THETA_STATIC,
                     max_trim: int = DEFAULT_WINDOW + 1) -> list[ScanLineSegment]:
    """One segment per maximal moving run attributable to a scan line.

    Runs shorter than jump_frames + 2 are treated as vertical jumps and
    dropped. Directions alternate from the start direction; the y-row index
    increments per kept segment.

    The windowed labels smear each moving run into the bracketing pauses by
    up to half a window. When the correlation series is supplied, run edges
    are trimmed (at most max_trim frames per side): a paused frame is an
    exact duplicate of a neighbor (correlation ~ 1.0), which a scanning
    frame never is.
    """
    if start_direction not in (+1, -1):
        raise ParameterError("start_direction must be +1 or -1")
    runs = _moving_runs(labels.moving)
    kept = [[a, b] for a, b in runs if (b - a + 1) >= jump_frames + 2]
    if series is not None:
        v = series.values
        nv = len(v)

        def frame_static(f: int) -> bool:
            left = v[f - 1] if f - 1 >= 0 else 1.0
            right = v[f] if f < nv else 1.0
            return max(left, right) >= DUPLICATE_CORR

        for run in kept:
            for _ in range(max_trim):
                if run[0] < run[1] and frame_static(run[0]):
                    run[0] += 1
                else:
                    break
            for _ in range(max_trim):
                if run[1] > run[0] and frame_static(run[1]):
                    run[1] -= 1
                else:
                    break
    if model is not None and len(kept) != model.line_count:
        raise StructuralError(
            f"found {len(kept)} scan-line runs but the model predicts "
            f"{model.line_count}; run lengths: {[b - a + 1 for a, b in runs]}"
        )
    segments = []
    direction = start_direction
    for i, (a, b) in enumerate(kept):
        segments.append(ScanLineSegment(line_index=i, first=a, last=b,
                                        direction=direction, row_index=i))
        direction = -direction
    return segments


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------

def _feather_profile(length: int, overlap: float) -> np.ndarray:
    """Positive weight profile ramping linearly over the overlap at both ends."""
    ov = max(1.0, overlap)
    x = np.arange(length, dtype=np.float32) + 0.5
    return np.minimum(1.0, np.minimum(x / ov, (length - x) / ov)).clip(1e-4, 1.0)


def _column_profile(frame: np.ndarray) -> np.ndarray:
    return _central_window(gray_f(frame)).mean(axis=0)


def _refine_shift(prev_profile: np.ndarray, cur_profile: np.ndarray,
                  nominal: int, bound: int, direction: int) -> int:
    """Shift (px) between consecutive frames by 1-D profile correlation peak."""
    best_s, best_r = nominal, -2.0
    fw = len(prev_profile)
    for s in range(max(1, nominal - bound), min(fw - 8, nominal + bound) + 1):
        if direction == +1:
            r = pearson(prev_profile[s:], cur_profile[: fw - s])
        else:
            r = pearson(prev_profile[: fw - s], cur_profile[s:])
        if r > best_r:
            best_r, best_s = r, s
    return best_s


def compose(manifest: FrameManifest, frames: Iterable[np.ndarray],
            segments: Sequence[ScanLineSegment], step_um: float,
            row_pitch_um: float, refine: bool = False,
            model: SquareWaveModel | None = None) -> StitchedSlide:
    """Compose the whole-slide mosaic from the scan-line segments.

    Dead reckoning: frame k of a segment sits at x = x0 +/- k * step_px
    (sign by direction), rows at row_index * row_pitch_px. With refine on,
    each consecutive-frame offset is replaced by the 1-D cross-correlation
    peak within +-10% of the dead-reckoning step. Overlaps feather linearly;
    rows are feathered in a final sequential pass.
    """
    if not segments:
        raise ParameterError("no segments to compose")
    scale = manifest.scale_um_per_px
    fw, fh = manifest.width, manifest.height
    step_px = step_um / scale
    overlap_px = fw - step_px
    if overlap_px <= 0:
        speed = step_um / manifest.frame_period_s
        min_rate = speed / (fw * scale)
        raise ComposeError(
            f"consecutive frames do not overlap (step {step_px:.1f} px >= "
            f"frame width {fw} px); need a frame rate of at least "
            f"{min_rate:.2f} Hz at this stage speed"
        )
    row_pitch_px = row_pitch_um / scale
    if not (0 < row_pitch_px <= fh):
        raise ParameterError("row pitch must be positive and at most the frame height")

    bound = max(1, int(round_half_up(0.1 * step_px)))
    nominal = int(round_half_up(step_px))
    max_len = max(len(s) for s in segments)
    span_px = (max_len - 1) * step_px + fw
    width = int(round_half_up(span_px))
    height = int(round_half_up((len(segments) - 1) * row_pitch_px)) + fh

    canvas = np.zeros((height, width, 3), dtype=np.uint8)
    wx = _feather_profile(fw, overlap_px)[None, :, None].astype(np.float32)
    placements: list[tuple[int, int, int]] = []

    pending: np.ndarray | None = None   # normalized strip of the previous row
    pending_y = 0

    def finalize(strip: np.ndarray, y: int, upto: int):
        canvas[y : y + upto] = quantize_u8(strip[:upto])

    frame_iter = iter(frames)
    frame_index = -1
    current = None

    def next_frame():
        nonlocal frame_index, current
        frame_index += 1
        current = next(frame_iter)

    ordered = sorted(segments, key=lambda s: s.first)
    for seg in ordered:
        acc = np.zeros((fh, width, 3), dtype=np.float32)
        wsum = np.zeros((1, width, 1), dtype=np.float32)
        y_row = int(round_half_up(seg.row_index * row_pitch_px))

        # advance the stream to the segment start
        while frame_index < seg.first - 1:
            next_frame()

        prev_profile = None
        x_f = 0.0 if seg.direction == +1 else span_px - fw
        for k in range(len(seg)):
            next_frame()
            frame = current
            if refine and prev_profile is not None:
                profile = _column_profile(frame)
                shift = _refine_shift(prev_profile, profile, nominal, bound,
                                      seg.direction)
                x_f += seg.direction * shift
                prev_profile = profile
            else:
                if refine:
                    prev_profile = _column_profile(frame)
                x_f = (k * step_px if seg.direction == +1
                       else span_px - fw - k * step_px)
            xi = int(round_half_up(x_f))
            xi = max(0, min(width - fw, xi))
            placements.append((seg.first + k, xi, y_row))
            acc[:, xi : xi + fw] += wx * frame.astype(np.float32)
            wsum[:, xi : xi + fw] += wx

        covered = wsum > 1e-8
        strip = np.where(covered, acc / np.maximum(wsum, 1e-8), 0.0)

        if pending is None:
            pending, pending_y = strip, y_row
            continue
        ov = pending_y + fh - y_row
        if ov > 0:
            alpha = ((np.arange(ov, dtype=np.float32) + 1) / (ov + 1))[:, None, None]
            strip[:ov] = (1 - alpha) * pending[fh - ov :] + alpha * strip[:ov]
            finalize(pending, pending_y, fh - ov)
        else:
            finalize(pending, pending_y, fh)
        pending, pending_y = strip, y_row

    finalize(pending, pending_y, fh)

    provenance = {"refine": bool(refine), "step_um": step_um,
                  "row_pitch_um": row_pitch_um}
    mosaic = Raster(canvas, scale)
    return StitchedSlide(mosaic, placements, model=model, provenance=provenance)


def stitch_scan(manifest: FrameManifest, frames, step_um: float, row_pitch_um: float,
                window: int = DEFAULT_WINDOW,
                theta_static: float = DEFAULT_THETA_STATIC,
                refine: bool = False, start_direction: int = +1,
                jump_frames: int = 3,
                period_range: tuple[int, int] | None = None,
                duty_range: tuple[float, float] | None = None) -> StitchedSlide:
    """Full blind stitch: correlation, motion labels, square-wave repair,
    segment extraction, composition.

    ``frames`` must be re-iterable (e.g. a SequenceReader or a list): the
    correlation pass and the composition pass each stream it once.
    """
    series = correlation_series(frames)
    raw = classify_motion(series, window=window, theta_static=theta_static)
    snapped = snap_to_pauses(raw, series, min_run=jump_frames + 2)
    model, refined = fit_square_wave(snapped, period_range=period_range,
                                     duty_range=duty_range)
    segments = extract_segments(refined, model, start_direction=start_direction,
                                jump_frames=jump_frames, series=series,
                                theta_static=theta_static, max_trim=window + 1)
    slide = compose(manifest, frames, segments, step_um=step_um,
                    row_pitch_um=row_pitch_um, refine=refine, model=model)
    slide.provenance.update({
        "window": window,
        "theta_static": theta_static,
        "start_direction": start_direction,
        "model": {"period": model.period, "duty": model.duty,
                  "phase": model.phase, "line_count": model.line_count},
        "hamming_raw_vs_refined": hamming_distance(raw, refined),
        "segments": [
            {"line": s.line_index, "first": s.first, "last": s.last,
             "direction": DIRECTION_LABELS[s.direction], "row": s.row_index}
            for s in segments
        ],
    })
    return slide
