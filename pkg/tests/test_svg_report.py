import csv
import xml.etree.ElementTree as ET

import pytest

from services.diagnostics import CellSummary, error_growth_curve, heatmap_matrix, summary_from_moments
from services.errors import NothingToReportError
from services.sampler import PDEFamily, ScenarioKind
from services.stress_harness import RolloutCurve
from services.svg_report import SVG, bar_chart_svg, emit_report, heatmap_svg, write_csv


def _cell(pde, kind, mean, std=0.2, n=10):
    s = summary_from_moments(mean, std, n)
    return CellSummary(pde=pde, scenario=kind, **s.model_dump())


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def ks_cells():
    return [_cell(PDEFamily.KS, ScenarioKind.ROLLOUT, 1.607, 0.385, 200),
            _cell(PDEFamily.KS, ScenarioKind.PERTURBATION, 0.961, 0.095, 200)]


class TestSVG:
    def test_text_is_escaped(self):
        svg = SVG(100, 50)
        svg.text(10, 10, "a < b & c")
        root = ET.fromstring(svg.get_svg().encode("utf-8"))
        assert "a < b & c" in "".join(root.itertext())

    def test_heatmap_parses(self, ks_cells):
        root = ET.fromstring(heatmap_svg(heatmap_matrix(ks_cells)).encode("utf-8"))
        assert root.tag.endswith("svg")

    def test_bar_chart_has_one_bar_per_cell(self, ks_cells):
        root = ET.fromstring(bar_chart_svg("ks", ks_cells).encode("utf-8"))
        rects = [e for e in root.iter() if e.tag.endswith("rect")]
        assert len(rects) == 1 + len(ks_cells)


class TestCSV:
    def test_floats_round_trip_and_blanks(self, tmp_path):
        path = write_csv(tmp_path / "out" / "t.csv", ["a", "b"], [(0.1 + 0.2, None), (3, "x")])
        rows = _rows(path)
        assert rows[0] == ["a", "b"]
        assert float(rows[1][0]) == 0.1 + 0.2
        assert rows[1][1] == ""
        assert rows[2] == ["3", "x"]


class TestEmitReport:
    def test_one_cell_whiskers_equal_the_interval(self, tmp_path):
        cell = _cell(PDEFamily.NS, ScenarioKind.ROLLOUT, 3.524, 0.930, 200)
        emit_report(tmp_path, [cell], None, {}, {})
        rows = _rows(tmp_path / "bars_ns.csv")
        assert rows[0] == ["scenario", "mean", "std", "ci_low", "ci_high", "n"]
        assert float(rows[1][3]) == cell.ci_low
        assert float(rows[1][4]) == cell.ci_high
        assert not (tmp_path / "heatmap.svg").exists()

    def test_full_bundle(self, tmp_path, ks_cells):
        curves = [RolloutCurve(times=[1.0, 2.0], mean_errors=[0.1, 0.3], counts=[2, 2]),
                  RolloutCurve(times=[1.0, 2.0], mean_errors=[0.2, 0.5], counts=[2, 2])]
        written = emit_report(tmp_path, ks_cells, heatmap_matrix(ks_cells),
                              {"ks": ([0.0, 4.0, 8.0], [0.25, 0.75], 4.0)},
                              {"ks": error_growth_curve(curves)}, "linear")
        names = sorted(p.name for p in written)
        assert names == ["bars_ks.csv", "bars_ks.svg", "growth_ks.csv", "growth_ks.svg", "heatmap.csv",
                         "heatmap.svg", "spectral_ks.csv", "spectral_ks.svg"]
        for path in written:
            if path.suffix == ".svg":
                ET.fromstring(path.read_bytes())
        assert _rows(tmp_path / "spectral_ks.csv")[2] == ["4.0", "8.0", "0.75"]
        growth = _rows(tmp_path / "growth_ks.csv")
        assert float(growth[2][1]) == pytest.approx(0.4)
        assert "training Nyquist" in (tmp_path / "spectral_ks.svg").read_text()

    def test_masked_heatmap_cells_are_blank(self, tmp_path):
        cells = [_cell(p, k, 1.5) for p, k in [(PDEFamily.KS, ScenarioKind.ROLLOUT),
                                               (PDEFamily.KS, ScenarioKind.PERTURBATION),
                                               (PDEFamily.NLS, ScenarioKind.ROLLOUT),
                                               (PDEFamily.NLS, ScenarioKind.PERTURBATION),
                                               (PDEFamily.NLS, ScenarioKind.PARAM_SHIFT)]]
        emit_report(tmp_path, cells, heatmap_matrix(cells), {}, {})
        rows = {(r[0], r[1]): r[2] for r in _rows(tmp_path / "heatmap.csv")[1:]}
        assert rows[("ks", "param_shift")] == ""
        assert float(rows[("nls", "param_shift")]) == 1.5

    def test_nothing_to_report(self, tmp_path):
        with pytest.raises(NothingToReportError):
            emit_report(tmp_path, [], None, {}, {})
