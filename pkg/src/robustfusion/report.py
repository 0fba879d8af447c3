"""Tables, plots and a machine-readable summary from sweep result rows.

Everything written here is a pure function of the rows, so identical rows
give byte-identical files.
"""

from __future__ import annotations

import dataclasses
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .fusion import TABLE_NAMES
from .harness import AUGMENTED_SUFFIX, ResultRow
from .metrics import delta_map

KIND_TITLES = {
    "layer_removal": "LiDAR layer removal",
    "point_reduction": "LiDAR point reduction",
    "misalignment": "Camera-LiDAR misalignment",
    "none": "Uncorrupted",
}
KIND_ORDER = ("layer_removal", "point_reduction", "misalignment")
DEVIATION_FLAGS = {
    "nds_label": "NDS-3: translation, scale and orientation errors only",
    "recall_precision_clipping": "none",
    "kitti_difficulty": "not applicable to synthetic scenes",
    "aggregation": "median over seeds",
}


def display_name(variant: str) -> str:
    base, aug = (variant[: -len(AUGMENTED_SUFFIX)], True) if variant.endswith(AUGMENTED_SUFFIX) else (variant, False)
    name = TABLE_NAMES.get(base, base)
    return name + (" (augmented)" if aug else "")


def _median(values):
    vals = [v for v in values if v is not None]
    return statistics.median(vals) if vals else None


def with_deltas(rows: Sequence[ResultRow]) -> list[ResultRow]:
    """Recompute ΔmAP of every row against its (variant, seed) uncorrupted row."""
    base = {(r.variant, r.seed): r.map for r in rows if r.corruption == "none" and r.ok}
    out = []
    for r in rows:
        b = base.get((r.variant, r.seed))
        d = None
        if r.ok and r.map is not None and b:
            d = 0.0 if r.corruption == "none" else delta_map(b, r.map)
        out.append(dataclasses.replace(r, delta_map=d))
    return out


@dataclass
class CellSummary:
    variant: str
    corruption: str
    severity: str
    seeds: list[int]
    map: float | None
    nds: float | None
    ate: float | None
    ase: float | None
    aoe: float | None
    delta_map: float | None
    failures: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def summarize(rows: Sequence[ResultRow]) -> list[CellSummary]:
    """Median over seeds of every (variant, corruption, severity) cell, first-seen order."""
    groups: dict[tuple, list[ResultRow]] = {}
    for r in rows:
        groups.setdefault((r.variant, r.corruption, r.severity), []).append(r)
    out = []
    for (v, c, s), rs in groups.items():
        ok = [r for r in rs if r.ok]
        out.append(
            CellSummary(
                v, c, s, sorted(r.seed for r in ok),
                *(_median(getattr(r, f) for r in ok) for f in ("map", "nds", "ate", "ase", "aoe", "delta_map")),
                failures=len(rs) - len(ok),
            )
        )
    return out


def _fmt(v: float | None, scale: float = 100.0, digits: int = 2) -> str:
    return "n/a" if v is None else f"{v * scale:.{digits}f}"


def _fmt_delta(v: float | None) -> str:
    return "" if v is None else f"{v:+.1f}%"


def rank_marks(values: Sequence[float | None]) -> list[str]:
    """'best' / 'second' / '' per entry, highest value best; ties share a rank."""
    distinct = sorted({v for v in values if v is not None}, reverse=True)
    marks = []
    for v in values:
        if v is None or not distinct:
            marks.append("")
        elif v == distinct[0]:
            marks.append("best")
        elif len(distinct) > 1 and v == distinct[1]:
            marks.append("second")
        else:
            marks.append("")
    return marks


def _mark(text: str, mark: str) -> str:
    return f"**{text}**" if mark == "best" else f"_{text}_" if mark == "second" else text


def _render(header: Sequence[str], body: Sequence[Sequence[str]]) -> str:
    widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
    line = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
    sep = "  ".join("-" * w for w in widths)
    return "\n".join([line(header), sep, *map(line, body)]) + "\n"


def _csv(header, body) -> str:
    q = lambda s: '"' + s.replace('"', '""') + '"' if any(ch in s for ch in ',"\n') else s
    return "\n".join(",".join(q(c) for c in row) for row in [header, *body]) + "\n"


def _variants(cells: Sequence[CellSummary]) -> list[str]:
    seen: dict[str, None] = {}
    for c in cells:
        seen.setdefault(c.variant, None)
    return list(seen)


def _columns(cells: Sequence[CellSummary], kinds: Sequence[str]) -> list[tuple[str, str]]:
    cols: dict[tuple[str, str], None] = {}
    for c in cells:
        if c.corruption == "none" or c.corruption in kinds:
            cols.setdefault((c.corruption, c.severity), None)
    return sorted(cols, key=lambda k: k[0] != "none")


def severity_table(cells: Sequence[CellSummary], kinds: Sequence[str] = ("misalignment",)) -> tuple[list[str], list[list[str]]]:
    """Variants x metric rows, severities as columns, best and second-best marked per column."""
    lookup = {(c.variant, c.corruption, c.severity): c for c in cells}
    variants = _variants(cells)
    cols = _columns(cells, kinds)
    header = ["Fusion step", "Metric"] + ["None" if k == "none" else s for k, s in cols]

    def value(v, col, metric):
        c = lookup.get((v, *col))
        return getattr(c, metric) if c else None

    marks = {
        (metric, col): rank_marks([value(v, col, metric) for v in variants]) if len(variants) > 1 else [""] * len(variants)
        for metric in ("map", "nds")
        for col in cols
    }
    body = []
    for vi, v in enumerate(variants):
        for metric, label in (("map", "mAP"), ("nds", "NDS-3")):
            row = [display_name(v), label]
            row += [_mark(_fmt(value(v, col, metric)), marks[metric, col][vi]) for col in cols]
            body.append(row)
    return header, body


def degradation_table(cells: Sequence[CellSummary], source_layers: int = 32) -> tuple[list[str], list[list[str]]]:
    """One block per variant and LiDAR defect: baseline then each severity with mAP, NDS and ΔmAP."""
    header = ["Method", "Defect", "Level", "mAP", "NDS-3", "ΔmAP"]
    lookup = {(c.variant, c.corruption, c.severity): c for c in cells}
    body = []
    for v in _variants(cells):
        base = lookup.get((v, "none", "none"))
        for kind, title, base_label in (
            ("layer_removal", "Layer removal", str(source_layers)),
            ("point_reduction", "Points reduction", "100%"),
        ):
            sev = [c for c in cells if c.variant == v and c.corruption == kind]
            if not sev:
                continue
            block = [(base_label, base, "")] if base else []
            block += [(c.severity.replace(" layers", ""), c, _fmt_delta(c.delta_map)) for c in sev]
            for i, (level, c, delta) in enumerate(block):
                body.append([display_name(v) if i == 0 else "", title if i == 0 else "", level,
                             _fmt(c.map), _fmt(c.nds), delta])
    return header, body


@dataclass
class Report:
    files: dict[str, Path] = field(default_factory=dict)
    axis_limits: dict[str, tuple[float, float]] = field(default_factory=dict)
    plot_series: dict[str, int] = field(default_factory=dict)


def _plot(path: Path, cells: Sequence[CellSummary], kind: str, metric: str = "map") -> tuple[tuple[float, float], int]:
    import matplotlib

    matplotlib.rcParams["svg.hashsalt"] = "robustfusion"
    matplotlib.rcParams["svg.fonttype"] = "none"
    from matplotlib.figure import Figure

    cols = _columns(cells, (kind,))
    labels = ["none" if k == "none" else s for k, s in cols]
    lookup = {(c.variant, c.corruption, c.severity): c for c in cells}
    fig = Figure(figsize=(6.0, 4.0))
    ax = fig.add_subplot(1, 1, 1)
    ys_all = []
    n_series = 0
    for v in _variants(cells):
        xs, ys = [], []
        for i, col in enumerate(cols):
            c = lookup.get((v, *col))
            val = getattr(c, metric) if c else None
            if val is not None:
                xs.append(i)
                ys.append(val * 100.0)
        if ys:
            ax.plot(xs, ys, marker="o", label=display_name(v))
            ys_all += ys
            n_series += 1
    if ys_all:
        lo, hi = min(ys_all), max(ys_all)
        pad = max(1.0, 0.05 * (hi - lo))
        limits = (lo - pad, hi + pad)
    else:
        limits = (0.0, 1.0)
    ax.set_ylim(*limits)
    ax.set_xlim(-0.3, max(0, len(cols) - 1) + 0.3)
    ax.set_xticks(range(len(cols)))
    ax.set_xticklabels(labels)
    ax.set_xlabel("severity")
    ax.set_ylabel("mAP (%)" if metric == "map" else "NDS-3 (%)")
    ax.set_title(KIND_TITLES.get(kind, kind))
    ax.grid(True, alpha=0.3)
    if n_series:
        ax.legend(fontsize=7)
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches=None)
    return limits, n_series


def emit_report(rows: Sequence[ResultRow], out_dir: str | Path, source_layers: int = 32) -> Report:
    """Write text and CSV tables, SVG line charts and a JSON summary into ``out_dir``."""
    if not rows:
        raise ValueError("emit_report needs at least one result row")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = summarize(rows)
    rep = Report()

    kinds_present = [k for k in KIND_ORDER if any(c.corruption == k for c in cells)]
    misalign_kinds = ("misalignment",) if "misalignment" in kinds_present or not kinds_present else ()
    h, b = severity_table(cells, misalign_kinds)
    rep.files["table_misalignment.txt"] = out / "table_misalignment.txt"
    rep.files["table_misalignment.csv"] = out / "table_misalignment.csv"
    (out / "table_misalignment.txt").write_text(_render(h, b))
    (out / "table_misalignment.csv").write_text(_csv(h, b))

    h, b = degradation_table(cells, source_layers)
    if b:
        (out / "table_lidar.txt").write_text(_render(h, b))
        (out / "table_lidar.csv").write_text(_csv(h, b))
        rep.files["table_lidar.txt"] = out / "table_lidar.txt"
        rep.files["table_lidar.csv"] = out / "table_lidar.csv"

    for kind in kinds_present or ["none"]:
        for metric in ("map", "nds"):
            name = f"plot_{kind}_{metric}.svg"
            limits, n = _plot(out / name, cells, kind, metric)
            rep.files[name] = out / name
            rep.axis_limits[name] = limits
            rep.plot_series[name] = n

    summary = {
        "cells": [c.to_dict() for c in cells],
        "deviations": DEVIATION_FLAGS,
        "row_count": len(rows),
        "failures": [
            {"variant": r.variant, "corruption": r.corruption, "severity": r.severity, "seed": r.seed, "error": r.error}
            for r in rows if not r.ok
        ],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    rep.files["summary.json"] = out / "summary.json"
    return rep
