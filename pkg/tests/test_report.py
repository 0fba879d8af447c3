import json

import pytest

from robustfusion.harness import ResultRow
from robustfusion.report import degradation_table, display_name, emit_report, rank_marks, summarize, with_deltas


def row(variant, corruption, severity, m, seed=0, delta=None, error=None):
    if error:
        return ResultRow(variant, corruption, severity, seed, None, None, None, None, None, None, 0.1, error=error)
    return ResultRow(variant, corruption, severity, seed, m, m * 0.9, 0.2, 0.1, 0.3, delta, 0.1)


def published_layer_rows():
    # layer removal block of the first method, mAP in [0, 1]
    return [
        row("bevfusion", "none", "none", 0.5401),
        row("bevfusion", "layer_removal", "16 layers", 0.4752),
        row("bevfusion", "layer_removal", "4 layers", 0.4210),
        row("bevfusion", "layer_removal", "1 layers", 0.1523),
    ]


def sweep_rows():
    rows = []
    for v, base in (("conv", 0.6), ("conv_se", 0.62), ("conv_ed_se+aug", 0.61)):
        for seed in (0, 1, 2):
            b = base + 0.01 * seed
            rows.append(row(v, "none", "none", b, seed, 0.0))
            for sev, drop in (("10cm", 0.01), ("100cm", 0.05), ("1°", 0.02)):
                rows.append(row(v, "misalignment", sev, b - drop, seed))
            for sev, drop in (("16 layers", 0.1), ("4 layers", 0.3)):
                rows.append(row(v, "layer_removal", sev, b - drop, seed))
            rows.append(row(v, "point_reduction", "50%", b - 0.02, seed))
    return with_deltas(rows)


def test_published_layer_deltas():
    h, body = degradation_table(summarize(with_deltas(published_layer_rows())))
    assert h[-1] == "ΔmAP"
    assert [r[-1] for r in body] == ["", "-12.0%", "-22.1%", "-71.8%"]
    assert [r[2] for r in body] == ["32", "16", "4", "1"]
    assert body[0][3] == "54.01"


def test_baseline_delta_zero():
    rows = with_deltas(published_layer_rows())
    assert rows[0].delta_map == 0.0
    assert rows[1].delta_map == pytest.approx(100 * (0.4752 - 0.5401) / 0.5401)


def test_no_valid_baseline():
    rows = with_deltas([row("a", "none", "none", 0.0), row("a", "layer_removal", "16 layers", 0.0)])
    assert [r.delta_map for r in rows] == [None, None]


def test_median_over_seeds():
    cells = summarize(sweep_rows())
    c = next(c for c in cells if c.variant == "conv" and c.severity == "100cm")
    assert c.map == pytest.approx(0.56) and c.seeds == [0, 1, 2]


def test_byte_deterministic(tmp_path):
    a = emit_report(sweep_rows(), tmp_path / "a")
    b = emit_report(sweep_rows(), tmp_path / "b")
    assert sorted(a.files) == sorted(b.files)
    for name in a.files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_expected_files_and_markers(tmp_path):
    rep = emit_report(sweep_rows(), tmp_path)
    for name in ("table_misalignment.txt", "table_misalignment.csv", "table_lidar.txt", "summary.json",
                 "plot_misalignment_map.svg", "plot_layer_removal_nds.svg"):
        assert name in rep.files
    text = (tmp_path / "table_misalignment.txt").read_text()
    # conv_se is best everywhere, the augmented variant second
    assert "**63.00**" in text and "_62.00_" in text
    assert display_name("conv_ed_se+aug") in text
    assert (tmp_path / "plot_misalignment_map.svg").read_text().lstrip().startswith("<?xml")
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["row_count"] == len(sweep_rows()) and summary["deviations"]["nds_label"].startswith("NDS-3")


def test_axis_limits_cover_data(tmp_path):
    rows = sweep_rows()
    rep = emit_report(rows, tmp_path)
    for kind in ("misalignment", "layer_removal", "point_reduction"):
        lo, hi = rep.axis_limits[f"plot_{kind}_map.svg"]
        # plotted points are per-cell medians
        vals = [c.map * 100 for c in summarize(rows) if c.corruption in (kind, "none")]
        assert lo < min(vals) and hi > max(vals)
        assert rep.plot_series[f"plot_{kind}_map.svg"] == 3


def test_single_row(tmp_path):
    rep = emit_report([row("conv", "none", "none", 0.5, delta=0.0)], tmp_path)
    h, *body = [l for l in (tmp_path / "table_misalignment.csv").read_text().splitlines()]
    assert h.split(",") == ["Fusion step", "Metric", "None"] and len(body) == 2
    assert set(rep.plot_series.values()) == {1}


def test_failures_listed(tmp_path):
    rows = [row("conv", "none", "none", 0.5, delta=0.0), row("conv", "misalignment", "100cm", 0, error="boom")]
    emit_report(rows, tmp_path)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["failures"][0]["error"] == "boom"


def test_empty_rows(tmp_path):
    with pytest.raises(ValueError):
        emit_report([], tmp_path)


def test_rank_marks():
    assert rank_marks([0.3, 0.5, None, 0.5, 0.4]) == ["", "best", "", "best", "second"]
