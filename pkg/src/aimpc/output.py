"""Result files: trajectory CSV, metrics JSON and SVG line charts.

Files are written to a temporary sibling and renamed into place, so a reader
never sees a half-written artifact.
"""

import csv
import io
import json
import math
import os
import tempfile

import numpy as np

CSV_COLUMNS = ("t", "s_ego", "v_ego", "a_ego", "l_ego", "rl_ego", "ua_ego", "ul_ego",
               "s_nv", "v_nv", "a_nv", "u_nv", "alpha_s", "alpha_v", "alpha_a",
               "mu", "beta", "obj", "nodes")

METRIC_KEYS = ("merge_outcome", "merge_time_s", "hindrance_pct", "rms_jerk",
               "min_same_lane_gap_m", "mean_solve_ms", "max_solve_ms", "final_alpha")


def fmt(x):
    """Six significant digits, plain decimal point."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    out = f"{x:.6g}"
    return "0" if out == "-0" else out


def atomic_write(path, text):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def log_rows(log):
    """The log as an ``(steps + 1, 19)`` array in CSV column order."""
    rows = []
    for r in log.records:
        alpha = r.alpha if r.alpha is not None else np.full(3, np.nan)
        rows.append([r.t, *r.ego, r.u_a, r.u_l, *r.nv, r.u_nv, *alpha,
                     r.mu, r.beta, r.objective, r.nodes])
    return np.array(rows, dtype=float)


def trajectory_csv(log):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in log_rows(log):
        w.writerow([fmt(x) for x in row])
    return buf.getvalue()


def read_trajectory_csv(path):
    """Parse a trajectory CSV back into ``(columns, array)``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_COLUMNS:
            raise ValueError(f"unexpected header {header}")
        data = np.array([[float(x) for x in row] for row in reader], dtype=float)
    return header, data.reshape(-1, len(CSV_COLUMNS))


def _json_number(x):
    x = float(x)
    return x if math.isfinite(x) else None


def metrics_dict(metrics, timing=False):
    """Metrics in the fixed key order; solve times only with ``timing``.

    Wall-clock times differ between runs, so leaving them out keeps the file
    byte-identical for identical inputs.
    """
    return {
        "merge_outcome": metrics.merge_outcome,
        "merge_time_s": _json_number(metrics.merge_time),
        "hindrance_pct": _json_number(metrics.hindrance_pct),
        "rms_jerk": _json_number(metrics.rms_jerk_ego),
        "min_same_lane_gap_m": _json_number(metrics.min_same_lane_gap),
        "mean_solve_ms": _json_number(metrics.mean_solve_ms) if timing else None,
        "max_solve_ms": _json_number(metrics.max_solve_ms) if timing else None,
        "final_alpha": [_json_number(a) for a in metrics.final_alpha],
    }


def dumps(obj):
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


# --- SVG -------------------------------------------------------------------

_COLORS = ("#1f4e9c", "#c0392b", "#2e8b57", "#8e44ad")
_W, _H = 640, 360
_PAD = dict(left=64, right=120, top=36, bottom=48)


def _ticks(lo, hi, n=5):
    if hi - lo <= 0:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


def line_chart(x, series, title, xlabel, ylabel):
    """Static SVG line chart; NaN samples break the line."""
    x = np.asarray(x, dtype=float)
    ys = [np.asarray(y, dtype=float) for y in series.values()]
    finite = np.concatenate([y[np.isfinite(y)] for y in ys] + [np.zeros(0)])
    y_lo, y_hi = (finite.min(), finite.max()) if finite.size else (0.0, 1.0)
    if y_hi - y_lo < 1e-9:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    x_lo, x_hi = (float(x.min()), float(x.max())) if x.size else (0.0, 1.0)
    if x_hi <= x_lo:
        x_hi = x_lo + 1.0
    pw = _W - _PAD["left"] - _PAD["right"]
    ph = _H - _PAD["top"] - _PAD["bottom"]

    def px(v):
        return _PAD["left"] + (v - x_lo) / (x_hi - x_lo) * pw

    def py(v):
        return _PAD["top"] + (1 - (v - y_lo) / (y_hi - y_lo)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
           f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">',
           f'<rect width="{_W}" height="{_H}" fill="white"/>',
           f'<text x="{_W / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
           f'<rect x="{_PAD["left"]}" y="{_PAD["top"]}" width="{pw}" height="{ph}" '
           'fill="none" stroke="#444"/>']
    for v in _ticks(x_lo, x_hi):
        out.append(f'<line x1="{px(v):.1f}" y1="{_PAD["top"] + ph}" x2="{px(v):.1f}" '
                   f'y2="{_PAD["top"] + ph + 4}" stroke="#444"/>')
        out.append(f'<text x="{px(v):.1f}" y="{_PAD["top"] + ph + 16}" '
                   f'text-anchor="middle">{fmt(round(v, 9))}</text>')
    for v in _ticks(y_lo, y_hi):
        out.append(f'<line x1="{_PAD["left"] - 4}" y1="{py(v):.1f}" x2="{_PAD["left"] + pw}" '
                   f'y2="{py(v):.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{_PAD["left"] - 6}" y="{py(v) + 4:.1f}" '
                   f'text-anchor="end">{fmt(round(v, 9))}</text>')
    out.append(f'<text x="{_PAD["left"] + pw / 2:.1f}" y="{_H - 10}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="16" y="{_PAD["top"] + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {_PAD["top"] + ph / 2:.1f})">{ylabel}</text>')
    for i, (name, y) in enumerate(zip(series, ys)):
        color = _COLORS[i % len(_COLORS)]
        seg = []
        for xv, yv in zip(x, y):
            if np.isfinite(yv):
                seg.append(f"{px(xv):.1f},{py(yv):.1f}")
                continue
            if len(seg) > 1:
                out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.8" points="{" ".join(seg)}"/>')
            seg = []
        if len(seg) > 1:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.8" points="{" ".join(seg)}"/>')
        ly = _PAD["top"] + 14 + 16 * i
        lx = _PAD["left"] + pw + 10
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 24}" y="{ly}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plots_from_csv(csv_path, out_dir):
    """Write the position, lateral and imputed-weight charts; reads only the CSV."""
    cols, data = read_trajectory_csv(csv_path)
    c = {name: data[:, i] for i, name in enumerate(cols)}
    charts = {
        "positions.svg": line_chart(c["t"], {"ego": c["s_ego"], "NV": c["s_nv"]},
                                    "Longitudinal position", "t [s]", "s [m]"),
        "lateral.svg": line_chart(c["t"], {"ego": c["l_ego"]},
                                  "Ego lateral position", "t [s]", "l [lane]"),
        "alpha.svg": line_chart(c["t"], {"alpha_s": c["alpha_s"], "alpha_v": c["alpha_v"],
                                         "alpha_a": c["alpha_a"]},
                                "Imputed NV weights", "t [s]", "alpha"),
    }
    paths = []
    for name, svg in charts.items():
        p = os.path.join(out_dir, name)
        atomic_write(p, svg)
        paths.append(p)
    return paths
