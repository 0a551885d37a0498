"""Minimal deterministic SVG emitter for the report plots.

Hand-rolled on purpose: the outputs are small, diffable golden files with no
plotting-library dependency. Only the three chart shapes the pipeline needs.
"""

from __future__ import annotations

import numpy as np

WIDTH, HEIGHT = 640, 420
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 64, 64, 40, 48

ACCURACY_COLOR = "#1f6fb2"
INDET_COLOR = "#d07030"
GUIDE_COLOR = "#888888"


def _fmt(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".")


class _Svg:
    def __init__(self, width: int = WIDTH, height: int = HEIGHT):
        self.width = width
        self.height = height
        self.parts: list[str] = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}" '
            f'font-family="sans-serif" font-size="12">',
            f'<rect width="{width}" height="{height}" fill="white"/>',
        ]

    def line(self, x1, y1, x2, y2, stroke="black", width=1.0, dash=None):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(
            f'<line x1="{x1:.1f}" y1="{y1:.1f}" x2="{x2:.1f}" y2="{y2:.1f}" '
            f'stroke="{stroke}" stroke-width="{width}"{d}/>'
        )

    def polyline(self, pts, stroke, width=1.5, dash=None):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        coords = " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)
        self.parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{stroke}" '
            f'stroke-width="{width}"{d}/>'
        )

    def rect(self, x, y, w, h, fill, stroke="none"):
        self.parts.append(
            f'<rect x="{x:.1f}" y="{y:.1f}" width="{w:.1f}" height="{h:.1f}" '
            f'fill="{fill}" stroke="{stroke}"/>'
        )

    def text(self, x, y, s, anchor="middle", fill="black", size=12, rotate=None):
        r = (f' transform="rotate({rotate} {x:.1f} {y:.1f})"' if rotate is not None
             else "")
        self.parts.append(
            f'<text x="{x:.1f}" y="{y:.1f}" text-anchor="{anchor}" '
            f'fill="{fill}" font-size="{size}"{r}>{s}</text>'
        )

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _axes(svg: _Svg, title: str, xlabel: str, ylabel: str,
          ylabel_right: str | None = None):
    x0, x1 = MARGIN_L, svg.width - MARGIN_R
    y0, y1 = svg.height - MARGIN_B, MARGIN_T
    svg.line(x0, y0, x1, y0)
    svg.line(x0, y0, x0, y1)
    if ylabel_right:
        svg.line(x1, y0, x1, y1)
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        px = x0 + frac * (x1 - x0)
        py = y0 + frac * (y1 - y0)
        svg.line(px, y0, px, y0 + 4)
        svg.text(px, y0 + 18, _fmt(frac))
        svg.line(x0 - 4, py, x0, py)
        svg.text(x0 - 8, py + 4, _fmt(frac), anchor="end")
        if ylabel_right:
            svg.line(x1, py, x1 + 4, py)
            svg.text(x1 + 8, py + 4, _fmt(frac), anchor="start")
    svg.text((x0 + x1) / 2, svg.height - 12, xlabel)
    svg.text(16, (y0 + y1) / 2, ylabel, rotate=-90)
    if ylabel_right:
        svg.text(svg.width - 12, (y0 + y1) / 2, ylabel_right, rotate=90)
    svg.text(svg.width / 2, 22, title, size=14)
    return x0, x1, y0, y1


def _to_px(x0, x1, y0, y1, xs, ys):
    return [
        (x0 + x * (x1 - x0), y0 + y * (y1 - y0))
        for x, y in zip(xs, ys)
    ]


def sweep_svg(thresholds, accuracies, indeterminate_fractions,
              theta_at_target: float | None, target_rate: float,
              title: str) -> str:
    """Dual-axis accuracy / indeterminate curves with the target guide line."""
    svg = _Svg()
    x0, x1, y0, y1 = _axes(svg, title, "confidence threshold",
                           "accuracy (determinate)", "indeterminate fraction")
    acc_pts = [
        (x0 + t * (x1 - x0), y0 + a * (y1 - y0))
        for t, a in zip(thresholds, accuracies) if a is not None
    ]
    ind_pts = [
        (x0 + t * (x1 - x0), y0 + f * (y1 - y0))
        for t, f in zip(thresholds, indeterminate_fractions)
    ]
    if theta_at_target is not None:
        gx = x0 + theta_at_target * (x1 - x0)
        svg.line(gx, y0, gx, y1, stroke=GUIDE_COLOR, width=1.0, dash="6,4")
        svg.text(gx, y1 - 6, f"{int(round(target_rate * 100))}% indeterminate",
                 fill=GUIDE_COLOR, size=10)
    svg.polyline(acc_pts, ACCURACY_COLOR)
    svg.polyline(ind_pts, INDET_COLOR, dash="4,3")
    svg.text(x0 + 8, y1 + 14, "accuracy", anchor="start", fill=ACCURACY_COLOR, size=11)
    svg.text(x0 + 8, y1 + 28, "indeterminate", anchor="start", fill=INDET_COLOR,
             size=11)
    return svg.render()


def confusion_svg(counts: np.ndarray, class_labels: list[str], accuracy: float,
                  title: str) -> str:
    counts = np.asarray(counts)
    k = counts.shape[0]
    svg = _Svg(WIDTH, HEIGHT)
    grid = min(WIDTH - MARGIN_L - MARGIN_R, HEIGHT - MARGIN_T - MARGIN_B - 20)
    cell = grid / k
    gx, gy = MARGIN_L, MARGIN_T + 10
    peak = max(1, int(counts.max()))
    for r in range(k):
        for c in range(k):
            v = int(counts[r, c])
            shade = 255 - int(195 * v / peak)
            fill = f"rgb({shade},{shade},255)" if r == c else (
                f"rgb(255,{shade},{shade})" if v else "rgb(255,255,255)")
            svg.rect(gx + c * cell, gy + r * cell, cell, cell, fill, stroke="#999")
            svg.text(gx + (c + 0.5) * cell, gy + (r + 0.5) * cell + 4, str(v))
    for i, lab in enumerate(class_labels):
        svg.text(gx + (i + 0.5) * cell, gy + grid + 16, lab)
        svg.text(gx - 8, gy + (i + 0.5) * cell + 4, lab, anchor="end")
    svg.text(gx + grid / 2, gy + grid + 34, "prediction", size=11)
    svg.text(gx - 40, gy + grid / 2, "truth", rotate=-90, size=11)
    svg.text(WIDTH / 2, 22, title, size=14)
    svg.text(WIDTH / 2, HEIGHT - 10, f"accuracy {accuracy * 100:.1f}%", size=12)
    return svg.render()


def roc_svg(fpr, tpr, auc: float, title: str) -> str:
    svg = _Svg()
    x0, x1, y0, y1 = _axes(svg, title, "false positive rate", "true positive rate")
    svg.line(x0, y0, x1, y1, stroke="#bbbbbb", width=1.0, dash="4,4")
    pts = _to_px(x0, x1, y0, y1, fpr, tpr)
    svg.polyline(pts, ACCURACY_COLOR)
    svg.text(x1 - 8, y0 - 10, f"AUC = {auc:.3f}", anchor="end",
             fill=ACCURACY_COLOR)
    return svg.render()
