"""Pipeline configuration: one INI-style file, fully validated up front.

Unknown sections or keys are rejected so a typo cannot silently fall back to
a default. Every stage reads its parameters from here; the CLI can override
seed and output directory.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ParameterError
from .stitcher import DEFAULT_THETA_STATIC, DEFAULT_WINDOW
from .synthscan import ScanConfig

_DIRECTIONS = {"+x": +1, "-x": -1}


def _bool(value: str, key: str) -> bool:
    v = value.strip().lower()
    if v in ("on", "true", "yes", "1"):
        return True
    if v in ("off", "false", "no", "0"):
        return False
    raise ParameterError(f"{key}: expected on/off, got {value!r}")


@dataclass
class SlideSection:
    grid_rows: int = 4
    grid_cols: int = 4
    core_diameter_um: float = 220.0
    core_pitch_um: float = 280.0
    margin_um: float = 440.0
    scale_um_per_px: float = 1.0
    scores: str = "balanced"         # balanced | random | explicit "0,1;2,3" (x = empty)
    slide_width_um: float | None = None
    slide_height_um: float | None = None


@dataclass
class ScanSection:
    stage_speed_um_s: float = 5000.0
    frame_rate_hz: float = 30.0
    exposure_s: float = 0.0078
    frame_width_px: int = 640
    frame_height_px: int = 480
    pause_s: float = 0.5
    jump_frames: int = 3
    line_count: int | None = None    # None = cover the slide
    row_pitch_um: float | None = None
    start_direction: int = +1

    def scan_config(self, scale: float, phase_frac: float = 0.0) -> ScanConfig:
        return ScanConfig(
            stage_speed=self.stage_speed_um_s,
            frame_rate=self.frame_rate_hz,
            exposure=self.exposure_s,
            fov_width_um=self.frame_width_px * scale,
            fov_height_um=self.frame_height_px * scale,
            row_pitch_um=self.row_pitch_um,
            pause_s=self.pause_s,
            jump_frames=self.jump_frames,
            line_count=self.line_count,
            start_direction=self.start_direction,
            phase_frac=phase_frac,
        )


@dataclass
class StitchSection:
    window: int = DEFAULT_WINDOW
    theta_static: float = DEFAULT_THETA_STATIC
    refine: bool = False


@dataclass
class CorePrepSection:
    wb_block: int = 64
    wb_variance_threshold: float = 25.0
    wb_multiplicative: bool = False
    min_area_fraction: float = 0.25


@dataclass
class ClassifySection:
    model: str = "baseline"          # baseline | import
    import_path: str | None = None   # prediction CSV when model = import
    class_count: int = 4
    epochs: int = 2000
    learning_rate: float = 2.0


@dataclass
class TriageSection:
    theta_step: float = 0.01
    target_indeterminate: float = 0.15
    normalize_weighted: bool = True

    def grid(self) -> list[float]:
        n = int(round(1.0 / self.theta_step))
        return [round(i * self.theta_step, 10) for i in range(n + 1)]


@dataclass
class RunSection:
    seed: int = 0
    out: str = "out"
    train_slides: int = 6
    test_slides: int = 4


@dataclass
class PipelineConfig:
    run: RunSection = field(default_factory=RunSection)
    slide: SlideSection = field(default_factory=SlideSection)
    scan: ScanSection = field(default_factory=ScanSection)
    stitch: StitchSection = field(default_factory=StitchSection)
    coreprep: CorePrepSection = field(default_factory=CorePrepSection)
    classify: ClassifySection = field(default_factory=ClassifySection)
    triage: TriageSection = field(default_factory=TriageSection)

    def validate(self):
        if self.classify.model not in ("baseline", "import"):
            raise ParameterError(
                f"classify.model must be baseline or import, got {self.classify.model!r}"
            )
        if self.classify.model == "import":
            if not self.classify.import_path:
                raise ParameterError("classify.model = import needs import_path")
            if not Path(self.classify.import_path).is_file():
                raise ParameterError(
                    f"classify.import_path {self.classify.import_path!r} does not exist"
                )
        if self.classify.class_count not in (2, 4):
            raise ParameterError("classify.class_count must be 2 or 4")
        if self.run.train_slides < 1 or self.run.test_slides < 1:
            raise ParameterError("need at least one train and one test slide")
        if not (0 < self.triage.theta_step <= 0.5):
            raise ParameterError("triage.theta_step must lie in (0, 0.5]")
        # instantiating the scan config runs its own invariants
        self.scan.scan_config(self.slide.scale_um_per_px)


_PARSERS = {
    ("run", "seed"): int,
    ("run", "out"): str,
    ("run", "train_slides"): int,
    ("run", "test_slides"): int,
    ("slide", "grid_rows"): int,
    ("slide", "grid_cols"): int,
    ("slide", "core_diameter_um"): float,
    ("slide", "core_pitch_um"): float,
    ("slide", "margin_um"): float,
    ("slide", "scale_um_per_px"): float,
    ("slide", "scores"): str,
    ("slide", "slide_width_um"): float,
    ("slide", "slide_height_um"): float,
    ("scan", "stage_speed_um_s"): float,
    ("scan", "frame_rate_hz"): float,
    ("scan", "exposure_s"): float,
    ("scan", "frame_width_px"): int,
    ("scan", "frame_height_px"): int,
    ("scan", "pause_s"): float,
    ("scan", "jump_frames"): int,
    ("scan", "line_count"): int,
    ("scan", "row_pitch_um"): float,
    ("scan", "start_direction"): str,
    ("stitch", "window"): int,
    ("stitch", "theta_static"): float,
    ("stitch", "refine"): "bool",
    ("coreprep", "wb_block"): int,
    ("coreprep", "wb_variance_threshold"): float,
    ("coreprep", "wb_multiplicative"): "bool",
    ("coreprep", "min_area_fraction"): float,
    ("classify", "model"): str,
    ("classify", "import_path"): str,
    ("classify", "class_count"): int,
    ("classify", "epochs"): int,
    ("classify", "learning_rate"): float,
    ("triage", "theta_step"): float,
    ("triage", "target_indeterminate"): float,
    ("triage", "normalize_weighted"): "bool",
}

_SECTION_FIELDS = {
    "run": RunSection, "slide": SlideSection, "scan": ScanSection,
    "stitch": StitchSection, "coreprep": CorePrepSection,
    "classify": ClassifySection, "triage": TriageSection,
}


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ParameterError(f"config file {path} does not exist")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ParameterError(f"config parse error: {exc}")

    cfg = PipelineConfig()
    for section in parser.sections():
        if section not in _SECTION_FIELDS:
            raise ParameterError(f"unknown config section [{section}]")
        target = getattr(cfg, section)
        for key, raw in parser.items(section):
            spec = _PARSERS.get((section, key))
            if spec is None:
                raise ParameterError(f"unknown config key {section}.{key}")
            if spec == "bool":
                value = _bool(raw, f"{section}.{key}")
            elif (section, key) == ("scan", "start_direction"):
                if raw.strip() not in _DIRECTIONS:
                    raise ParameterError(
                        f"scan.start_direction must be +x or -x, got {raw!r}"
                    )
                value = _DIRECTIONS[raw.strip()]
            else:
                try:
                    value = spec(raw)
                except ValueError:
                    raise ParameterError(
                        f"config value {section}.{key} = {raw!r} is not a valid "
                        f"{spec.__name__}"
                    )
            setattr(target, key, value)
    cfg.validate()
    return cfg


def default_config_text() -> str:
    """A demo configuration file (also the documented schema)."""
    return """\
# blurscan pipeline configuration (key = value within named sections;
# unknown keys are rejected)

[run]
seed = 0
out = out
train_slides = 4
test_slides = 3

[slide]
grid_rows = 2
grid_cols = 2
core_diameter_um = 420
core_pitch_um = 560
margin_um = 350
scale_um_per_px = 2.0
# balanced | random | explicit grid like "0,1;2,3" (x = empty cell)
scores = balanced

[scan]
stage_speed_um_s = 5000
frame_rate_hz = 30
exposure_s = 0.0078
frame_width_px = 320
frame_height_px = 240
pause_s = 0.2
jump_frames = 3
start_direction = +x

[stitch]
window = 5
theta_static = 0.985
refine = off

[coreprep]
wb_block = 64
wb_variance_threshold = 25.0
wb_multiplicative = off
min_area_fraction = 0.25

[classify]
model = baseline
class_count = 4
epochs = 2000
learning_rate = 2.0

[triage]
theta_step = 0.01
target_indeterminate = 0.15
normalize_weighted = on
"""
