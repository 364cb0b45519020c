"""SVG chart emission from the metrics CSV."""

import re
import xml.etree.ElementTree as ET

import pytest

from satfedsim.harness import METRICS_HEADER
from satfedsim.plots import axis_limits, emit_plots

ROW = "{r},1.5,{acc},{loss},3.25,41.0,{up},{down},3,1"


def write_metrics(path, rows):
    lines = [METRICS_HEADER]
    for i, (acc, loss, up, down) in enumerate(rows, start=1):
        lines.append(ROW.format(r=i, acc=acc, loss=loss, up=up, down=down))
    path.write_text("\n".join(lines) + "\n")
    return str(path)


@pytest.fixture()
def two_row_csv(tmp_path):
    return write_metrics(tmp_path / "metrics.csv",
                         [(0.5, 1.25, 1000, 2000), (0.625, 1.0, 1100, 2100)])


class TestAxisLimits:
    def test_five_percent_margin(self):
        lo, hi = axis_limits(0.0, 10.0)
        assert lo == pytest.approx(-0.5)
        assert hi == pytest.approx(10.5)

    def test_flat_series_padded(self):
        lo, hi = axis_limits(3.0, 3.0)
        assert lo < 3.0 < hi


class TestEmitPlots:
    def test_two_rows_single_segment_per_series(self, two_row_csv, tmp_path):
        files = emit_plots(two_row_csv, str(tmp_path / "charts"))
        assert len(files) == 4
        for path in files:
            text = open(path).read()
            groups = re.findall(r'<g id="series-[^"]*">.*?</g>', text, re.S)
            assert groups
            for group in groups:
                d = re.search(r'<path d="([^"]*)"', group).group(1)
                assert d.count("L") == 1  # two points, one segment

    def test_output_is_wellformed_xml(self, two_row_csv, tmp_path):
        for path in emit_plots(two_row_csv, str(tmp_path / "charts")):
            ET.parse(path)  # raises on malformed XML

    def test_axis_extents_match_data_extents(self, tmp_path):
        rows = [(0.2, 2.0, 900, 1800), (0.5, 1.5, 950, 1900),
                (0.8, 1.0, 1000, 2000)]
        csv_path = write_metrics(tmp_path / "m.csv", rows)
        files = emit_plots(csv_path, str(tmp_path / "charts"))
        acc_svg = open(files[0]).read()
        desc = re.search(r"<dc:description>(.*?)</dc:description>",
                         acc_svg, re.S).group(1)
        got = re.match(r"xlim=(\S+),(\S+) ylim=(\S+),(\S+)", desc)
        xlo, xhi, ylo, yhi = (float(g) for g in got.groups())
        # oracle: recompute the 5% margins from the raw data by hand
        assert xlo == pytest.approx(1 - 0.05 * 2) and xhi == pytest.approx(3 + 0.05 * 2)
        assert ylo == pytest.approx(0.2 - 0.05 * 0.6)
        assert yhi == pytest.approx(0.8 + 0.05 * 0.6)

    def test_empty_csv_warns_and_writes_nothing(self, tmp_path, capsys):
        path = tmp_path / "empty.csv"
        path.write_text(METRICS_HEADER + "\n")
        files = emit_plots(str(path), str(tmp_path / "charts"))
        assert files == []
        assert "no data rows" in capsys.readouterr().err

    def test_byte_identical_re_renders(self, two_row_csv, tmp_path):
        first = emit_plots(two_row_csv, str(tmp_path / "a"))
        second = emit_plots(two_row_csv, str(tmp_path / "b"))
        for f1, f2 in zip(first, second):
            assert open(f1, "rb").read() == open(f2, "rb").read()
