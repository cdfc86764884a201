"""Accuracy-vs-FLOPs sweeps over a stitch space and their CSV/SVG artifacts."""
import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from . import anchors as nn
from .budget import flops_of, params_of
from .stitching import forward_stitched

CSV_COLUMNS = ("config_id", "kind", "flops", "params", "accuracy", "on_pareto")
SVG_W, SVG_H = 960, 540


@dataclass
class SweepRow:
    config_id: int
    kind: str
    flops: float
    params: int
    accuracy: float


@dataclass
class SweepResult:
    rows: list
    pareto_mask: list

    def frontier(self):
        return [r for r, keep in zip(self.rows, self.pareto_mask) if keep]


def accuracy(logits, labels):
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _batched_logits(run, x, batch_size):
    return np.concatenate([run(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def anchor_accuracy(model, dataset, batch_size=256):
    logits = _batched_logits(lambda xb: nn.predict(model, xb), dataset.x, batch_size)
    return accuracy(logits, dataset.y)


def config_accuracy(space, config_id, small, large, dataset, batch_size=256):
    def run(xb):
        return forward_stitched(space, config_id, small, large, xb, record=False).logits
    return accuracy(_batched_logits(run, dataset.x, batch_size), dataset.y)


def pareto_front(rows):
    """Mask of rows not dominated in (lower flops, higher accuracy).

    At equal flops only the best accuracy survives; exact duplicates are all kept.
    """
    if not rows:
        raise ValueError("pareto_front needs at least one row")
    order = sorted(range(len(rows)), key=lambda i: (rows[i].flops, -rows[i].accuracy))
    mask = [False] * len(rows)
    best = -np.inf
    i = 0
    while i < len(order):
        # rows sharing this flops value, best accuracy first
        j = i
        flops = rows[order[i]].flops
        while j < len(order) and rows[order[j]].flops == flops:
            j += 1
        top = rows[order[i]].accuracy
        if top > best:
            for k in order[i:j]:
                if rows[k].accuracy == top:
                    mask[k] = True
            best = top
        i = j
    return mask


def sweep(space, small, large, dataset, cost, workers=1, batch_size=256):
    """Evaluate every config on ``dataset`` without touching any parameter."""
    ids = range(len(space.configs))

    def evaluate(cid):
        return config_accuracy(space, cid, small, large, dataset, batch_size)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            accs = list(pool.map(evaluate, ids))
    else:
        accs = [evaluate(cid) for cid in ids]

    rows = [
        SweepRow(cid, cfg.kind, flops_of(cfg, cost), params_of(cfg, space), acc)
        for cid, (cfg, acc) in enumerate(zip(space.configs, accs))
    ]
    rows.sort(key=lambda r: (r.flops, r.config_id))
    return SweepResult(rows, pareto_front(rows))


def curve_csv(result):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row, keep in zip(result.rows, result.pareto_mask):
        writer.writerow([row.config_id, row.kind, repr(row.flops), row.params,
                         repr(row.accuracy), int(keep)])
    return buf.getvalue()


def emit_curve(result, path_prefix):
    """Write ``<prefix>.csv`` and ``<prefix>.svg``; returns both paths."""
    csv_path, svg_path = f"{path_prefix}.csv", f"{path_prefix}.svg"
    try:
        with open(csv_path, "w", encoding="utf-8", newline="") as f:
            f.write(curve_csv(result))
        with open(svg_path, "w", encoding="utf-8") as f:
            f.write(scatter_svg(result))
    except OSError as exc:
        raise OSError(f"cannot write sweep artifacts under {path_prefix}: {exc}") from exc
    return csv_path, svg_path


# -- SVG -----------------------------------------------------------------------

_KIND_COLORS = {
    "AnchorSmall": "#d62728", "AnchorLarge": "#9467bd", "FS": "#1f77b4",
    "SF": "#2ca02c", "FSF": "#ff7f0e", "SFS": "#8c564b",
}
_MARGIN = dict(left=80, right=30, top=30, bottom=60)


def _axes(x_min, x_max, y_min, y_max, xlabel, ylabel):
    ml, mr, mt, mb = (_MARGIN[k] for k in ("left", "right", "top", "bottom"))
    pw, ph = SVG_W - ml - mr, SVG_H - mt - mb
    xspan = (x_max - x_min) or 1.0
    yspan = (y_max - y_min) or 1.0

    def sx(x):
        return ml + (x - x_min) / xspan * pw

    def sy(y):
        return mt + ph - (y - y_min) / yspan * ph

    parts = [
        f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>',
        f'<text x="{ml + pw / 2:.1f}" y="{SVG_H - 15}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="20" y="{mt + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 20 {mt + ph / 2:.1f})">{escape(ylabel)}</text>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        xv = x_min + frac * xspan
        yv = y_min + frac * yspan
        parts.append(f'<text x="{sx(xv):.1f}" y="{mt + ph + 18}" text-anchor="middle" '
                     f'font-size="11">{xv:.4g}</text>')
        parts.append(f'<text x="{ml - 8}" y="{sy(yv) + 4:.1f}" text-anchor="end" '
                     f'font-size="11">{yv:.3g}</text>')
    return parts, sx, sy


def _svg_document(parts):
    return (f'<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" '
            f'viewBox="0 0 {SVG_W} {SVG_H}">\n'
            f'<rect width="{SVG_W}" height="{SVG_H}" fill="white"/>\n'
            + "\n".join(parts) + "\n</svg>\n")


def scatter_svg(result):
    gflops = [r.flops / 1e9 for r in result.rows]
    accs = [r.accuracy for r in result.rows]
    parts, sx, sy = _axes(min(gflops), max(gflops), min(accs), max(accs), "GFLOPs", "accuracy")
    for row, gf in zip(result.rows, gflops):
        color = _KIND_COLORS.get(row.kind, "gray")
        parts.append(f'<circle cx="{sx(gf):.2f}" cy="{sy(row.accuracy):.2f}" r="4" '
                     f'fill="{color}"><title>{escape(row.kind)} #{row.config_id}</title></circle>')
    front = [(r.flops / 1e9, r.accuracy) for r in result.frontier()]
    if front:
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in front)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="black" stroke-width="2"/>')
    return _svg_document(parts)


def histogram_svg(dist):
    """Bar chart of the budget distribution: one bar per occupied FLOPs bin."""
    probs = [float(p) for p in dist.probabilities()]
    taus = [b.tau0 / 1e9 for b in dist.bins]
    half = dist.step / 2e9
    parts, sx, sy = _axes(min(taus) - half, max(taus) + half, 0.0, max(probs),
                          "GFLOPs", "probability")
    for tau, p in zip(taus, probs):
        x0, x1 = sx(tau - half * 0.8), sx(tau + half * 0.8)
        y = sy(p)
        parts.append(f'<rect x="{x0:.2f}" y="{y:.2f}" width="{max(x1 - x0, 1.0):.2f}" '
                     f'height="{sy(0.0) - y:.2f}" fill="#1f77b4"/>')
    return _svg_document(parts)
