"""
Hand-emitted SVG figures and the CSV behind each of them.

Every number drawn (cell value, bar height, whisker end, curve point) is also
written to the figure's CSV.
"""
import csv
import html
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from services.diagnostics import CellSummary, GrowthCurve, HeatmapMatrix
from services.errors import NothingToReportError

logger = logging.getLogger(__name__)

FONT = 'font-family="Verdana, sans-serif"'


class SVG:
    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self.svg = (f'<?xml version="1.0" encoding="UTF-8"?>\n'
                    f'<svg version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}" '
                    f'xmlns="http://www.w3.org/2000/svg">\n'
                    f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>\n')

    def filled_rectangle(self, x1, y1, x2, y2, fill, extra=""):
        self.svg += (f'<rect x="{x1:.1f}" y="{y1:.1f}" width="{x2 - x1:.1f}" height="{y2 - y1:.1f}" '
                     f'fill="{fill}" {extra}/>\n')

    def line(self, x1, y1, x2, y2, stroke="black", width=1.0, extra=""):
        self.svg += (f'<line x1="{x1:.1f}" y1="{y1:.1f}" x2="{x2:.1f}" y2="{y2:.1f}" '
                     f'stroke="{stroke}" stroke-width="{width}" {extra}/>\n')

    def polyline(self, points: Sequence[Tuple[float, float]], stroke="black", width=1.5):
        pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in points)
        self.svg += f'<polyline points="{pts}" fill="none" stroke="{stroke}" stroke-width="{width}"/>\n'

    def polygon(self, points: Sequence[Tuple[float, float]], fill, extra=""):
        pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in points)
        self.svg += f'<polygon points="{pts}" fill="{fill}" {extra}/>\n'

    def text(self, x, y, string, size=11, anchor="start", extra=""):
        self.svg += (f'<text x="{x:.1f}" y="{y:.1f}" font-size="{size}" text-anchor="{anchor}" {FONT} {extra}>'
                     f'{html.escape(str(string))}</text>\n')

    def get_svg(self) -> str:
        return f"{self.svg}</svg>\n"


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[object]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
    return path


def _heat_color(t: float) -> str:
    """t in [0, 1] from pale yellow to dark red."""
    t = min(max(t, 0.0), 1.0)
    r = int(round(255 - 80 * t))
    g = int(round(245 - 215 * t))
    b = int(round(200 - 170 * t))
    return f"#{r:02x}{g:02x}{b:02x}"


def _scale(values: Sequence[float], color_scale: str):
    finite = [v for v in values if v is not None and math.isfinite(v) and (color_scale == "linear" or v > 0)]
    if not finite:
        return lambda v: 0.0
    tf = (lambda v: math.log10(v)) if color_scale == "log" else (lambda v: v)
    lo, hi = tf(min(finite)), tf(max(finite))
    span = hi - lo or 1.0
    return lambda v: (tf(v) - lo) / span


def heatmap_svg(matrix: HeatmapMatrix, color_scale: str = "log") -> str:
    cell_w, cell_h, left, top = 110, 40, 120, 60
    svg = SVG(left + cell_w * len(matrix.cols) + 20, top + cell_h * len(matrix.rows) + 30)
    svg.text(left, 24, f"Mean degradation factor D ({color_scale} color scale)", size=13)
    cells = [matrix.cell(p, k) for p in matrix.rows for k in matrix.cols]
    norm = _scale(cells, color_scale)
    for j, kind in enumerate(matrix.cols):
        svg.text(left + cell_w * (j + 0.5), top - 8, kind.value, size=10, anchor="middle")
    for i, pde in enumerate(matrix.rows):
        y = top + cell_h * i
        svg.text(left - 8, y + cell_h / 2 + 4, pde.value, anchor="end")
        for j, kind in enumerate(matrix.cols):
            x = left + cell_w * j
            value = matrix.cell(pde, kind)
            if value is None:
                svg.filled_rectangle(x, y, x + cell_w, y + cell_h, "white", 'stroke="#cccccc"')
                continue
            svg.filled_rectangle(x, y, x + cell_w, y + cell_h, _heat_color(norm(value)), 'stroke="white"')
            svg.text(x + cell_w / 2, y + cell_h / 2 + 4, f"{value:.3f}", anchor="middle")
    return svg.get_svg()


def bar_chart_svg(pde: str, summaries: Sequence[CellSummary]) -> str:
    bar_w, gap, left, top, plot_h = 60, 30, 60, 40, 240
    svg = SVG(left + (bar_w + gap) * len(summaries) + gap, top + plot_h + 70)
    svg.text(left, 24, f"Degradation factors for {pde} (95% CI)", size=13)
    y_max = max(max(s.ci_high, s.mean) for s in summaries) * 1.1 or 1.0

    def y_of(v: float) -> float:
        return top + plot_h * (1.0 - max(v, 0.0) / y_max)

    svg.line(left, top, left, top + plot_h)
    svg.line(left, top + plot_h, left + (bar_w + gap) * len(summaries) + gap, top + plot_h)
    svg.text(left - 6, top + 4, f"{y_max:.2f}", size=9, anchor="end")
    svg.text(left - 6, top + plot_h, "0", size=9, anchor="end")
    if y_max > 1.0:
        svg.line(left, y_of(1.0), left + (bar_w + gap) * len(summaries) + gap, y_of(1.0), "#999999", 1.0,
                 'stroke-dasharray="4,3"')
    for i, s in enumerate(summaries):
        x = left + gap + (bar_w + gap) * i
        svg.filled_rectangle(x, y_of(s.mean), x + bar_w, top + plot_h, "#4a78b5")
        cx = x + bar_w / 2
        svg.line(cx, y_of(s.ci_low), cx, y_of(s.ci_high), "black", 1.5)
        svg.line(cx - 8, y_of(s.ci_low), cx + 8, y_of(s.ci_low), "black", 1.5)
        svg.line(cx - 8, y_of(s.ci_high), cx + 8, y_of(s.ci_high), "black", 1.5)
        svg.text(cx, top + plot_h + 16, s.scenario.value, size=9, anchor="middle")
        svg.text(cx, top + plot_h + 30, f"{s.mean:.3f}", size=9, anchor="middle")
    return svg.get_svg()


def spectral_svg(pde: str, edges: Sequence[float], energies: Sequence[float], train_nyquist: Optional[float]) -> str:
    bar_w, left, top, plot_h = 40, 60, 40, 200
    n = len(energies)
    svg = SVG(left + bar_w * n + 40, top + plot_h + 60)
    svg.text(left, 24, f"Error energy by wavenumber, {pde}", size=13)
    y_max = max(energies) * 1.1 if energies and max(energies) > 0 else 1.0
    for i, e in enumerate(energies):
        x = left + bar_w * i
        y = top + plot_h * (1.0 - e / y_max)
        svg.filled_rectangle(x + 2, y, x + bar_w - 2, top + plot_h, "#b5574a")
        svg.text(x + bar_w / 2, top + plot_h + 14, f"{edges[i]:g}", size=8, anchor="middle")
    svg.line(left, top + plot_h, left + bar_w * n, top + plot_h)
    if train_nyquist is not None and edges[-1] > edges[0]:
        x = left + bar_w * n * (train_nyquist - edges[0]) / (edges[-1] - edges[0])
        svg.line(x, top, x, top + plot_h, "#333333", 1.0, 'stroke-dasharray="5,3"')
        svg.text(x + 4, top + 12, "training Nyquist", size=9)
    return svg.get_svg()


def growth_svg(pde: str, curve: GrowthCurve) -> str:
    left, top, plot_w, plot_h = 60, 40, 320, 200
    svg = SVG(left + plot_w + 40, top + plot_h + 50)
    svg.text(left, 24, f"Rollout error growth, {pde}", size=13)
    t_max = max(curve.times) or 1.0
    y_max = max(s.ci_high for s in curve.stats) * 1.1 or 1.0

    def xy(t: float, v: float) -> Tuple[float, float]:
        return left + plot_w * t / t_max, top + plot_h * (1.0 - max(v, 0.0) / y_max)

    band = [xy(t, s.ci_high) for t, s in zip(curve.times, curve.stats)]
    band += [xy(t, s.ci_low) for t, s in reversed(list(zip(curve.times, curve.stats)))]
    svg.polygon(band, "#4a78b5", 'fill-opacity="0.25"')
    svg.polyline([xy(t, s.mean) for t, s in zip(curve.times, curve.stats)], "#1f3f6e", 2.0)
    svg.line(left, top, left, top + plot_h)
    svg.line(left, top + plot_h, left + plot_w, top + plot_h)
    svg.text(left + plot_w, top + plot_h + 16, f"t = {t_max:g}", size=9, anchor="end")
    svg.text(left - 6, top + 4, f"{y_max:.3g}", size=9, anchor="end")
    return svg.get_svg()


def emit_report(out_dir: Path, summaries: Sequence[CellSummary], matrix: Optional[HeatmapMatrix],
                profiles: Dict[str, Tuple[List[float], List[float], Optional[float]]],
                curves: Dict[str, GrowthCurve], color_scale: str = "log") -> List[Path]:
    """Write every figure with its CSV; returns the written paths."""
    if not summaries:
        raise NothingToReportError("no summary cells to report")
    out_dir.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []

    if matrix is not None:
        (out_dir / "heatmap.svg").write_text(heatmap_svg(matrix, color_scale), encoding="utf-8")
        rows = [(p.value, k.value, matrix.cell(p, k)) for p in matrix.rows for k in matrix.cols]
        written += [out_dir / "heatmap.svg", write_csv(out_dir / "heatmap.csv", ["pde", "scenario", "mean"], rows)]

    by_pde: Dict[str, List[CellSummary]] = {}
    for s in summaries:
        by_pde.setdefault(s.pde.value, []).append(s)
    for pde, cells in sorted(by_pde.items()):
        path = out_dir / f"bars_{pde}.svg"
        path.write_text(bar_chart_svg(pde, cells), encoding="utf-8")
        rows = [(s.scenario.value, s.mean, s.std, s.ci_low, s.ci_high, s.n) for s in cells]
        written += [path, write_csv(out_dir / f"bars_{pde}.csv",
                                    ["scenario", "mean", "std", "ci_low", "ci_high", "n"], rows)]

    for pde, (edges, energies, nyquist) in sorted(profiles.items()):
        path = out_dir / f"spectral_{pde}.svg"
        path.write_text(spectral_svg(pde, edges, energies, nyquist), encoding="utf-8")
        rows = [(edges[i], edges[i + 1], energies[i]) for i in range(len(energies))]
        written += [path, write_csv(out_dir / f"spectral_{pde}.csv", ["k_low", "k_high", "energy"], rows)]

    for pde, curve in sorted(curves.items()):
        path = out_dir / f"growth_{pde}.svg"
        path.write_text(growth_svg(pde, curve), encoding="utf-8")
        rows = [(t, s.mean, s.ci_low, s.ci_high, s.n) for t, s in zip(curve.times, curve.stats)]
        written += [path, write_csv(out_dir / f"growth_{pde}.csv", ["time", "mean", "ci_low", "ci_high", "n"], rows)]

    logger.info(f"Report written to {out_dir} ({len(written)} files)")
    return written
