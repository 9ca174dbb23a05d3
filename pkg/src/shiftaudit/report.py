"""Tidy CSV/JSON tables and static SVG figures.

Everything written here is a pure function of its inputs: floats are
emitted as shortest round-trip decimals, rows keep caller order and SVG
geometry uses fixed sizes and fixed-precision coordinates, so identical
results give identical bytes.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .errors import SchemaError

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")
FONT = 'font-family="DejaVu Sans, Arial, sans-serif"'


def fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        return repr(value)
    if isinstance(value, (np.integer,)):
        return str(int(value))
    if value is None:
        return ""
    return str(value)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def write_json(path, doc) -> Path:
    path = Path(path)
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def read_tidy(path, required: Sequence[str]) -> list[dict]:
    """Rows of a tidy CSV; :class:`SchemaError` if it is empty or lacks columns."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            rows = list(reader)
    except (OSError, UnicodeDecodeError, csv.Error) as exc:
        raise SchemaError(f"{path}: cannot read CSV ({exc})") from None
    missing = [c for c in required if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    return rows


def _float(raw: str, path, col: str) -> float:
    try:
        return float(raw)
    except (TypeError, ValueError):
        raise SchemaError(f"{path}: non-numeric {col} value {raw!r}") from None


def _n(x: float) -> str:
    return f"{x:.2f}"


def _svg(width: int, height: int, body: list[str], title: str) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">')
    parts = [head, f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
             f'<text x="{_n(width / 2)}" y="20" text-anchor="middle" font-size="14" {FONT}>'
             f'{escape(title)}</text>']
    return "\n".join(parts + body + ["</svg>"]) + "\n"


def _meta(note: str) -> list[str]:
    return [f"<desc>{escape(note)}</desc>"] if note else []


# --------------------------------------------------------------------------- figures


def bars_svg(features: Sequence[str], groups: Mapping[str, Sequence[float]],
             title: str = "", note: str = "") -> str:
    """Grouped horizontal bars: one row per feature, one bar per group."""
    if not groups or not features:
        raise ValueError("nothing to plot")
    labels = list(groups)
    p, g = len(features), len(labels)
    bar_h, gap, left, top, plot_w = 8, 6, 150, 40, 420
    row_h = g * bar_h + gap
    height = top + p * row_h + 30 + 16 * g
    width = left + plot_w + 60
    vmax = max((float(v) for vals in groups.values() for v in vals if np.isfinite(v)), default=0.0)
    scale = plot_w / vmax if vmax > 0 else 0.0
    body = _meta(note)
    for i, name in enumerate(features):
        y0 = top + i * row_h
        body.append(f'<text x="{left - 6}" y="{_n(y0 + g * bar_h / 2 + 4)}" text-anchor="end" '
                    f'font-size="10" {FONT}>{escape(name)}</text>')
        for k, lab in enumerate(labels):
            v = float(groups[lab][i])
            w = max(v, 0.0) * scale if np.isfinite(v) else 0.0
            body.append(f'<rect class="bar" x="{left}" y="{_n(y0 + k * bar_h)}" width="{_n(w)}" '
                        f'height="{bar_h - 1}" fill="{PALETTE[k % len(PALETTE)]}">'
                        f'<title>{escape(lab)} {escape(name)} {v:.4f}</title></rect>')
    body.append(f'<line x1="{left}" y1="{top - 4}" x2="{left}" y2="{top + p * row_h}" stroke="#000000"/>')
    ly = top + p * row_h + 16
    for k, lab in enumerate(labels):
        y = ly + 16 * k
        body.append(f'<rect x="{left}" y="{y - 9}" width="10" height="10" '
                    f'fill="{PALETTE[k % len(PALETTE)]}"/>')
        body.append(f'<text x="{left + 16}" y="{y}" font-size="10" {FONT}>{escape(lab)}</text>')
    return _svg(width, height, body, title)


def _heat_color(r: float) -> str:
    # blue (-1) through white (0) to red (+1)
    if not np.isfinite(r):
        return "#cccccc"
    r = max(-1.0, min(1.0, r))
    if r >= 0:
        c = (255, round(255 * (1 - r)), round(255 * (1 - r)))
    else:
        c = (round(255 * (1 + r)), round(255 * (1 + r)), 255)
    return "#{:02x}{:02x}{:02x}".format(*c)


def heatmap_svg(labels: Sequence[str], matrix, title: str = "", note: str = "") -> str:
    """Annotated square heatmap of a correlation matrix."""
    m = np.asarray(matrix, dtype=np.float64)
    d = len(labels)
    if m.shape != (d, d) or d == 0:
        raise ValueError("matrix shape does not match labels")
    cell, left, top = 56, 130, 40
    width = left + d * cell + 20
    height = top + d * cell + 110
    body = _meta(note)
    for i in range(d):
        for j in range(d):
            x, y = left + j * cell, top + i * cell
            r = m[i, j]
            body.append(f'<rect class="cell" x="{x}" y="{y}" width="{cell}" height="{cell}" '
                        f'fill="{_heat_color(r)}" stroke="#ffffff"/>')
            txt = "nan" if not np.isfinite(r) else f"{r:.2f}"
            body.append(f'<text class="value" x="{_n(x + cell / 2)}" y="{_n(y + cell / 2 + 4)}" '
                        f'text-anchor="middle" font-size="11" {FONT}>{txt}</text>')
    for i, lab in enumerate(labels):
        body.append(f'<text x="{left - 6}" y="{_n(top + i * cell + cell / 2 + 4)}" '
                    f'text-anchor="end" font-size="10" {FONT}>{escape(lab)}</text>')
        x = left + i * cell + cell / 2
        y = top + d * cell + 8
        body.append(f'<text x="{_n(x)}" y="{y}" text-anchor="end" font-size="10" '
                    f'transform="rotate(-45 {_n(x)} {y})" {FONT}>{escape(lab)}</text>')
    return _svg(width, height, body, title)


def _quartiles(v: np.ndarray) -> tuple[float, float, float]:
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return float(q1), float(med), float(q3)


def box_svg(groups: Mapping[str, Sequence[float]], title: str = "", note: str = "",
            lo: float = -1.0, hi: float = 1.0) -> str:
    """Vertical box plots (1.5 IQR whiskers) with every point overlaid."""
    if not groups:
        raise ValueError("nothing to plot")
    labels = list(groups)
    k = len(labels)
    slot, left, top, plot_h = 80, 50, 40, 300
    width = left + k * slot + 20
    height = top + plot_h + 90

    def ypos(v: float) -> float:
        return top + (hi - v) / (hi - lo) * plot_h

    body = _meta(note)
    for t in np.linspace(lo, hi, 5):
        body.append(f'<line x1="{left}" y1="{_n(ypos(t))}" x2="{left + k * slot}" y2="{_n(ypos(t))}" '
                    f'stroke="#dddddd"/>')
        body.append(f'<text x="{left - 4}" y="{_n(ypos(t) + 3)}" text-anchor="end" font-size="9" '
                    f'{FONT}>{t:.1f}</text>')
    for i, lab in enumerate(labels):
        vals = np.asarray([v for v in groups[lab] if np.isfinite(v)], dtype=np.float64)
        cx = left + i * slot + slot / 2
        color = PALETTE[i % len(PALETTE)]
        if len(vals):
            q1, med, q3 = _quartiles(vals)
            iqr = q3 - q1
            w_lo = float(vals[vals >= q1 - 1.5 * iqr].min())
            w_hi = float(vals[vals <= q3 + 1.5 * iqr].max())
            body.append(f'<line x1="{_n(cx)}" y1="{_n(ypos(w_hi))}" x2="{_n(cx)}" y2="{_n(ypos(w_lo))}" '
                        f'stroke="#000000"/>')
            body.append(f'<rect class="box" x="{_n(cx - 18)}" y="{_n(ypos(q3))}" width="36" '
                        f'height="{_n(max(ypos(q1) - ypos(q3), 0.5))}" fill="{color}" '
                        f'fill-opacity="0.5" stroke="#000000"/>')
            body.append(f'<line x1="{_n(cx - 18)}" y1="{_n(ypos(med))}" x2="{_n(cx + 18)}" '
                        f'y2="{_n(ypos(med))}" stroke="#000000" stroke-width="2"/>')
            for v in vals:
                body.append(f'<circle cx="{_n(cx)}" cy="{_n(ypos(float(v)))}" r="2" fill="#000000"/>')
        y = top + plot_h + 14
        body.append(f'<text x="{_n(cx)}" y="{y}" text-anchor="end" font-size="10" '
                    f'transform="rotate(-30 {_n(cx)} {y})" {FONT}>{escape(lab)}</text>')
    return _svg(width, height, body, title)


# --------------------------------------------------------------------------- CSV -> SVG


def _pick(rows: list[dict], filters: Mapping[str, str | None], path) -> list[dict]:
    for col, want in filters.items():
        if want is not None and rows and col in rows[0]:
            rows = [r for r in rows if r[col] == want]
    for col in ("model", "method"):
        if rows and col in rows[0] and len({r[col] for r in rows}) > 1:
            raise SchemaError(f"{path}: several values in column {col!r}; select one")
    if not rows:
        raise SchemaError(f"{path}: no rows match the selection")
    return rows


def render_csv(path, kind: str, model: str | None = None, method: str | None = None,
               title: str | None = None) -> str:
    """SVG text for a tidy audit CSV (``bars``, ``heatmap`` or ``box``)."""
    sel = {"model": model, "method": method}
    if kind == "bars":
        rows = read_tidy(path, ["domain", "feature", "normalized"])
        if "seed" in rows[0] and any(r["seed"] == "mean" for r in rows):
            rows = [r for r in rows if r["seed"] == "mean"]
        rows = _pick(rows, sel, path)
        features = list(dict.fromkeys(r["feature"] for r in rows))
        groups: dict[str, dict[str, float]] = {}
        for r in rows:
            groups.setdefault(r["domain"], {})[r["feature"]] = _float(r["normalized"], path, "normalized")
        for dom, vals in groups.items():
            if set(vals) != set(features):
                raise SchemaError(f"{path}: domain {dom!r} lacks some features")
        return bars_svg(features, {d: [v[f] for f in features] for d, v in groups.items()},
                        title or "normalized importance")
    if kind == "heatmap":
        rows = _pick(read_tidy(path, ["domain_a", "domain_b", "rho"]), sel, path)
        labels = list(dict.fromkeys([r["domain_a"] for r in rows] + [r["domain_b"] for r in rows]))
        idx = {lab: i for i, lab in enumerate(labels)}
        m = np.full((len(labels), len(labels)), np.nan)
        np.fill_diagonal(m, 1.0)
        for r in rows:
            v = _float(r["rho"], path, "rho")
            m[idx[r["domain_a"]], idx[r["domain_b"]]] = v
            m[idx[r["domain_b"]], idx[r["domain_a"]]] = v
        return heatmap_svg(labels, m, title or "cross-domain rank agreement")
    if kind == "box":
        rows = read_tidy(path, ["domain", "rho"])
        for col, want in (("model", model), ("method", method)):
            if want is not None and col in rows[0]:
                rows = [r for r in rows if r[col] == want]
        if not rows:
            raise SchemaError(f"{path}: no rows match the selection")
        groups2: dict[str, list[float]] = {}
        for r in rows:
            key = f"{r['model']} {r['domain']}" if "model" in r else r["domain"]
            groups2.setdefault(key, []).append(_float(r["rho"], path, "rho"))
        return box_svg(groups2, title or "seed-wise rank agreement")
    raise SchemaError(f"unknown figure kind {kind!r}")
