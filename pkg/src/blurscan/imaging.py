"""Core raster types, the motion-blur forward operator, and frame containers.

Conventions used throughout the pipeline:

- Images are 8-bit RGB numpy arrays of shape (height, width, 3), row-major,
  channel-interleaved, with a physical scale in micrometres per pixel.
- Motion blur along the scan axis is a normalized box (moving average) of
  ``width_px`` taps. For direction ``+x`` the box trails toward +x: output
  pixel x averages input columns [x, x + w). Direction ``-x`` is the exact
  mirror. Image borders are replicate-extended.
- All float-to-8-bit quantization is round-half-up.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import FormatError, ParameterError

GRAY_WEIGHTS = (0.299, 0.587, 0.114)  # Rec.601 luma


def round_half_up(x):
    """Round scalar or array half-up (0.5 -> 1), unlike numpy's bankers rounding."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def quantize_u8(x: np.ndarray) -> np.ndarray:
    """Quantize a float array to uint8 with round-half-up and clamping."""
    return np.clip(round_half_up(x), 0, 255).astype(np.uint8)


@dataclass
class Raster:
    """8-bit RGB image with a physical scale (um per pixel)."""

    data: np.ndarray  # (h, w, 3) uint8
    scale: float      # um per pixel

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data)
        if self.data.dtype != np.uint8:
            raise ParameterError(f"Raster data must be uint8, got {self.data.dtype}")
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ParameterError(f"Raster data must have shape (h, w, 3), got {self.data.shape}")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ParameterError("Raster must be at least 1x1")
        if not (self.scale > 0):
            raise ParameterError(f"Raster scale must be positive, got {self.scale}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class GrayRaster:
    """Single-channel 8-bit image with a physical scale."""

    data: np.ndarray  # (h, w) uint8
    scale: float

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data)
        if self.data.dtype != np.uint8:
            raise ParameterError(f"GrayRaster data must be uint8, got {self.data.dtype}")
        if self.data.ndim != 2:
            raise ParameterError(f"GrayRaster data must have shape (h, w), got {self.data.shape}")
        if not (self.scale > 0):
            raise ParameterError(f"GrayRaster scale must be positive, got {self.scale}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class BlurSpec:
    """Scan-axis motion blur: stage speed (um/s), exposure (s), direction +/-x.

    The blur distance is stage_speed * exposure um; in pixels it is that
    distance divided by the image scale, rounded half-up. A width of 0 or 1
    pixel makes the blur operator the identity.
    """

    stage_speed: float   # um/s, >= 0
    exposure: float      # s, >= 0
    direction: int = +1  # +1 for +x, -1 for -x

    def __post_init__(self):
        if self.stage_speed < 0:
            raise ParameterError("stage_speed must be nonnegative")
        if self.exposure < 0:
            raise ParameterError("exposure must be nonnegative")
        if self.direction not in (+1, -1):
            raise ParameterError("direction must be +1 or -1")

    @property
    def width_um(self) -> float:
        return self.stage_speed * self.exposure

    def width_px(self, scale: float) -> int:
        if not (scale > 0):
            raise ParameterError(f"scale must be positive, got {scale}")
        return int(round_half_up(self.width_um / scale))


def effective_scale(sensor_pixel_um: float, magnification: float) -> float:
    """Object-plane sampling in um/px for a sensor pixel pitch and magnification."""
    if not (sensor_pixel_um > 0):
        raise ParameterError(f"sensor_pixel_um must be positive, got {sensor_pixel_um}")
    if not (magnification > 0):
        raise ParameterError(f"magnification must be positive, got {magnification}")
    return sensor_pixel_um / magnification


def blur_width(spec: BlurSpec, scale: float) -> tuple[float, int]:
    """Blur distance for a spec at a given scale, as (um, px)."""
    return spec.width_um, spec.width_px(scale)


def _box_blur_u8(data: np.ndarray, w: int) -> np.ndarray:
    """Trailing box toward +x: out[x] = mean(data[x : x + w]), replicate edge.

    Exact integer arithmetic: int64 prefix sums, round-half-up division.
    """
    h, width = data.shape[0], data.shape[1]
    padded = np.concatenate(
        [data, np.repeat(data[:, -1:], w - 1, axis=1)], axis=1
    ).astype(np.int64)
    csum = np.cumsum(padded, axis=1)
    zero = np.zeros((h, 1) + data.shape[2:], dtype=np.int64)
    csum = np.concatenate([zero, csum], axis=1)
    sums = csum[:, w : w + width] - csum[:, :width]
    return ((2 * sums + w) // (2 * w)).astype(np.uint8)


def blur_array(data: np.ndarray, width_px: int, direction: int = +1) -> np.ndarray:
    """Box-blur a (h, w) or (h, w, c) uint8 array along x. See blur_raster."""
    if width_px <= 1:
        return data.copy()
    if direction == +1:
        return _box_blur_u8(data, width_px)
    return _box_blur_u8(data[:, ::-1], width_px)[:, ::-1]


def blur_raster(img: Raster, spec: BlurSpec) -> Raster:
    """Apply scan-axis motion blur: per-channel moving average along x.

    Equals the mean of width_px replicate-edge shifted copies of the input
    (shift direction per spec), quantized round-half-up. Output dimensions
    equal input dimensions.
    """
    w = spec.width_px(img.scale)
    return Raster(blur_array(img.data, w, spec.direction), img.scale)


def gray_f(data: np.ndarray) -> np.ndarray:
    """Rec.601 luminance as float64, no quantization (for correlation math)."""
    r, g, b = GRAY_WEIGHTS
    d = data.astype(np.float64)
    return r * d[..., 0] + g * d[..., 1] + b * d[..., 2]


def to_gray(img: Raster) -> GrayRaster:
    """Rec.601 luminance, rounded half-up to 8 bit."""
    return GrayRaster(quantize_u8(gray_f(img.data)), img.scale)


# ---------------------------------------------------------------------------
# Frame-sequence container: a directory with manifest.json + frames.bin
# (concatenated raw RGB8 frames, row-major, interleaved, no padding).
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"
FRAMES_NAME = "frames.bin"


@dataclass
class FrameManifest:
    """Camera/sequence constants for a frame container."""

    frame_count: int
    width: int
    height: int
    frame_period_s: float   # reciprocal of frame rate
    exposure_s: float
    scale_um_per_px: float
    trajectory: str | None = None  # optional ground-truth trajectory file name

    def __post_init__(self):
        if self.frame_count < 1:
            raise ParameterError(f"frame_count must be >= 1, got {self.frame_count}")
        if self.width < 1 or self.height < 1:
            raise ParameterError("frame dimensions must be >= 1")
        if not (self.frame_period_s > 0):
            raise ParameterError("frame_period_s must be positive")
        if not (0 <= self.exposure_s <= self.frame_period_s):
            raise ParameterError("exposure_s must satisfy 0 <= exposure <= frame_period")
        if not (self.scale_um_per_px > 0):
            raise ParameterError("scale_um_per_px must be positive")

    @property
    def frame_rate(self) -> float:
        return 1.0 / self.frame_period_s

    @property
    def frame_bytes(self) -> int:
        return self.width * self.height * 3

    def to_dict(self) -> dict:
        d = {
            "frame_count": self.frame_count,
            "width": self.width,
            "height": self.height,
            "frame_period_s": self.frame_period_s,
            "exposure_s": self.exposure_s,
            "scale_um_per_px": self.scale_um_per_px,
        }
        if self.trajectory is not None:
            d["trajectory"] = self.trajectory
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FrameManifest":
        required = ["frame_count", "width", "height", "frame_period_s",
                    "exposure_s", "scale_um_per_px"]
        missing = [k for k in required if k not in d]
        if missing:
            raise FormatError(f"manifest missing fields {missing}", byte_offset=0)
        try:
            return cls(
                frame_count=int(d["frame_count"]),
                width=int(d["width"]),
                height=int(d["height"]),
                frame_period_s=float(d["frame_period_s"]),
                exposure_s=float(d["exposure_s"]),
                scale_um_per_px=float(d["scale_um_per_px"]),
                trajectory=d.get("trajectory"),
            )
        except (TypeError, ValueError) as exc:
            raise FormatError(f"manifest field invalid: {exc}", byte_offset=0)


@dataclass
class FrameSequence:
    """A manifest plus its frames (any iterable of (h, w, 3) uint8 arrays)."""

    manifest: FrameManifest
    frames: Iterable[np.ndarray]


def write_sequence(manifest: FrameManifest, frames: Iterable[np.ndarray], path: str | Path) -> Path:
    """Write a frame sequence container. Streams frames; validates count/shape."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    expected_shape = (manifest.height, manifest.width, 3)
    n = 0
    with open(path / FRAMES_NAME, "wb") as fh:
        for frame in frames:
            frame = np.ascontiguousarray(frame)
            if frame.dtype != np.uint8 or frame.shape != expected_shape:
                raise FormatError(
                    f"frame {n} has dtype/shape {frame.dtype}/{frame.shape}, "
                    f"expected uint8/{expected_shape}",
                    byte_offset=n * manifest.frame_bytes,
                )
            fh.write(frame.tobytes())
            n += 1
    if n != manifest.frame_count:
        (path / FRAMES_NAME).unlink()
        raise FormatError(
            f"wrote {n} frames but manifest declares {manifest.frame_count}",
            byte_offset=n * manifest.frame_bytes,
        )
    with open(path / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest.to_dict(), fh, indent=1)
        fh.write("\n")
    return path


class SequenceReader:
    """Lazy reader over a frame container; iterable and random-access."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        mpath = self.path / MANIFEST_NAME
        if not mpath.is_file():
            raise FormatError(f"no {MANIFEST_NAME} in {self.path}", byte_offset=0)
        try:
            with open(mpath, "r", encoding="utf-8") as fh:
                self.manifest = FrameManifest.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise FormatError(f"malformed manifest JSON: {exc}", byte_offset=exc.pos)
        self._fpath = self.path / FRAMES_NAME
        expected = self.manifest.frame_count * self.manifest.frame_bytes
        actual = self._fpath.stat().st_size if self._fpath.is_file() else 0
        if actual != expected:
            raise FormatError(
                f"frames.bin holds {actual} bytes but manifest implies {expected} "
                f"({self.manifest.frame_count} frames of {self.manifest.frame_bytes} bytes)",
                byte_offset=min(actual, expected),
            )

    def __len__(self) -> int:
        return self.manifest.frame_count

    def _shape(self):
        return (self.manifest.height, self.manifest.width, 3)

    def __iter__(self) -> Iterator[np.ndarray]:
        nbytes = self.manifest.frame_bytes
        with open(self._fpath, "rb") as fh:
            for i in range(self.manifest.frame_count):
                buf = fh.read(nbytes)
                if len(buf) != nbytes:
                    raise FormatError(
                        f"frame {i} truncated", byte_offset=i * nbytes + len(buf)
                    )
                yield np.frombuffer(buf, dtype=np.uint8).reshape(self._shape())

    def frame(self, i: int) -> np.ndarray:
        if not (0 <= i < self.manifest.frame_count):
            raise ParameterError(f"frame index {i} out of range")
        nbytes = self.manifest.frame_bytes
        with open(self._fpath, "rb") as fh:
            fh.seek(i * nbytes)
            buf = fh.read(nbytes)
        if len(buf) != nbytes:
            raise FormatError(f"frame {i} truncated", byte_offset=i * nbytes + len(buf))
        return np.frombuffer(buf, dtype=np.uint8).reshape(self._shape())


def read_sequence(path: str | Path) -> tuple[FrameManifest, SequenceReader]:
    """Open a frame container; returns (manifest, lazy frame stream)."""
    reader = SequenceReader(path)
    return reader.manifest, reader


# ---------------------------------------------------------------------------
# Single-raster container: <name>.bin + <name>.json sidecar.
# ---------------------------------------------------------------------------

def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def write_raster(raster: Raster, path: str | Path) -> Path:
    """Write raw RGB8 bytes plus a JSON sidecar with dimensions and scale."""
    path = Path(path)
    if path.suffix != ".bin":
        path = path.with_suffix(".bin")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(raster.data).tobytes())
    header = {"width": raster.width, "height": raster.height,
              "scale_um_per_px": raster.scale}
    with open(_sidecar(path), "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=1)
        fh.write("\n")
    return path


def read_raster(path: str | Path) -> Raster:
    path = Path(path)
    if path.suffix != ".bin":
        path = path.with_suffix(".bin")
    try:
        with open(_sidecar(path), "r", encoding="utf-8") as fh:
            header = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"no sidecar header for {path}", byte_offset=0)
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed raster header: {exc}", byte_offset=exc.pos)
    for key in ("width", "height", "scale_um_per_px"):
        if key not in header:
            raise FormatError(f"raster header missing {key!r}", byte_offset=0)
    w, h = int(header["width"]), int(header["height"])
    expected = w * h * 3
    actual = path.stat().st_size if path.is_file() else 0
    if actual != expected:
        raise FormatError(
            f"{path.name} holds {actual} bytes, header implies {expected}",
            byte_offset=min(actual, expected),
        )
    data = np.fromfile(path, dtype=np.uint8).reshape(h, w, 3)
    return Raster(data, float(header["scale_um_per_px"]))
