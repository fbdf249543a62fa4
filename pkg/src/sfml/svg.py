"""Bare-bones SVG line and histogram plots (no styling engine)."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

W, H = 640, 420
PAD_L, PAD_R, PAD_T, PAD_B = 70, 20, 40, 50
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def _ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, n)


class _Frame:
    def __init__(self, xlim, ylim):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 <= self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 <= self.y0:
            self.y1 = self.y0 + 1.0

    def px(self, x):
        return PAD_L + (np.asarray(x) - self.x0) / (self.x1 - self.x0) * (W - PAD_L - PAD_R)

    def py(self, y):
        return H - PAD_B - (np.asarray(y) - self.y0) / (self.y1 - self.y0) * (H - PAD_T - PAD_B)


def _axes(frame, title, xlabel, ylabel):
    out = [
        f'<rect x="{PAD_L}" y="{PAD_T}" width="{W - PAD_L - PAD_R}" height="{H - PAD_T - PAD_B}" '
        'fill="none" stroke="#333"/>',
        f'<text x="{W / 2}" y="24" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle" font-size="13">{escape(xlabel)}</text>',
        f'<text x="16" y="{H / 2}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 16 {H / 2})">{escape(ylabel)}</text>',
    ]
    for t in _ticks(frame.x0, frame.x1):
        x = frame.px(t)
        out.append(f'<line x1="{x:.1f}" y1="{H - PAD_B}" x2="{x:.1f}" y2="{H - PAD_B + 5}" stroke="#333"/>')
        out.append(f'<text x="{x:.1f}" y="{H - PAD_B + 18}" text-anchor="middle" font-size="11">{t:.3g}</text>')
    for t in _ticks(frame.y0, frame.y1):
        y = frame.py(t)
        out.append(f'<line x1="{PAD_L - 5}" y1="{y:.1f}" x2="{PAD_L}" y2="{y:.1f}" stroke="#333"/>')
        out.append(f'<text x="{PAD_L - 8}" y="{y + 4:.1f}" text-anchor="end" font-size="11">{t:.3g}</text>')
    return out


def _legend(labels, dashed=()):
    out = []
    for i, label in enumerate(labels):
        y = PAD_T + 16 + 18 * i
        dash = ' stroke-dasharray="6 4"' if i in dashed else ""
        c = COLORS[i % len(COLORS)]
        out.append(f'<line x1="{W - PAD_R - 130}" y1="{y}" x2="{W - PAD_R - 105}" y2="{y}" stroke="{c}" '
                   f'stroke-width="2"{dash}/>')
        out.append(f'<text x="{W - PAD_R - 100}" y="{y + 4}" font-size="12">{escape(label)}</text>')
    return out


def _write(path, body) -> Path:
    path = Path(path)
    doc = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           '<rect width="100%" height="100%" fill="white"/>', *body, "</svg>"]
    path.write_text("\n".join(doc) + "\n")
    return path


def line_plot(path, x, series, title="", xlabel="t", ylabel="", dashed=()):
    """``series`` is a list of ``(label, y)``; labels in ``dashed`` index set are dashed."""
    x = np.asarray(x, dtype=float)
    ys = [np.asarray(y, dtype=float) for _, y in series]
    lo = min(float(np.nanmin(y)) for y in ys)
    hi = max(float(np.nanmax(y)) for y in ys)
    margin = 0.05 * (hi - lo if hi > lo else 1.0)
    frame = _Frame((float(x[0]), float(x[-1])), (lo - margin, hi + margin))
    body = _axes(frame, title, xlabel, ylabel)
    for i, y in enumerate(ys):
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(frame.px(x), frame.py(y)))
        dash = ' stroke-dasharray="6 4"' if i in dashed else ""
        body.append(f'<polyline fill="none" stroke="{COLORS[i % len(COLORS)]}" stroke-width="1.6"{dash} '
                    f'points="{pts}"/>')
    body += _legend([label for label, _ in series], dashed)
    return _write(path, body)


def paths_plot(path, x, paths, title="", xlabel="t", ylabel=""):
    """Many thin sample paths in one colour."""
    x = np.asarray(x, dtype=float)
    paths = np.asarray(paths, dtype=float)
    frame = _Frame((float(x[0]), float(x[-1])), (float(paths.min()), float(paths.max())))
    body = _axes(frame, title, xlabel, ylabel)
    for i, y in enumerate(paths):
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(frame.px(x), frame.py(y)))
        body.append(f'<polyline fill="none" stroke="{COLORS[i % len(COLORS)]}" stroke-opacity="0.7" '
                    f'stroke-width="0.8" points="{pts}"/>')
    return _write(path, body)


def histogram_plot(path, edges, densities, title="", xlabel="", ylabel="density"):
    """Step histograms sharing ``edges``; ``densities`` is a list of ``(label, heights)``."""
    edges = np.asarray(edges, dtype=float)
    top = max(float(np.max(h)) for _, h in densities) if densities else 1.0
    frame = _Frame((float(edges[0]), float(edges[-1])), (0.0, 1.05 * top))
    body = _axes(frame, title, xlabel, ylabel)
    for i, (_, h) in enumerate(densities):
        xs = np.repeat(edges, 2)[1:-1]
        ys = np.repeat(np.asarray(h, dtype=float), 2)
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(frame.px(xs), frame.py(ys)))
        dash = ' stroke-dasharray="6 4"' if i else ""
        body.append(f'<polyline fill="none" stroke="{COLORS[i % len(COLORS)]}" stroke-width="1.6"{dash} '
                    f'points="{pts}"/>')
    body += _legend([label for label, _ in densities], dashed=range(1, len(densities)))
    return _write(path, body)
