"""Minimal SVG scatter and line plots."""

from __future__ import annotations

from html import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")

W, H, M = 480, 360, 50


def _range(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return 0.0, 1.0
    lo, hi = float(v.min()), float(v.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


class _Frame:
    def __init__(self, xs, ys):
        self.x0, self.x1 = _range(xs)
        self.y0, self.y1 = _range(ys)

    def px(self, x):
        return M + (np.asarray(x, float) - self.x0) / (self.x1 - self.x0) * (W - 2 * M)

    def py(self, y):
        return H - M - (np.asarray(y, float) - self.y0) / (self.y1 - self.y0) * (H - 2 * M)

    def axes(self, title: str, xlabel: str, ylabel: str) -> list[str]:
        out = [
            f'<rect x="{M}" y="{M}" width="{W - 2 * M}" height="{H - 2 * M}" fill="none" stroke="#444"/>',
            f'<text x="{W / 2}" y="{M / 2}" text-anchor="middle" font-size="14">{escape(title)}</text>',
            f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
            f'<text x="14" y="{H / 2}" text-anchor="middle" font-size="12" '
            f'transform="rotate(-90 14 {H / 2})">{escape(ylabel)}</text>',
        ]
        for v in np.linspace(self.x0, self.x1, 5):
            out.append(
                f'<text x="{self.px(v):.1f}" y="{H - M + 14}" text-anchor="middle" font-size="10">{v:.3g}</text>'
            )
        for v in np.linspace(self.y0, self.y1, 5):
            out.append(
                f'<text x="{M - 4}" y="{self.py(v):.1f}" text-anchor="end" font-size="10">{v:.3g}</text>'
            )
        return out


def _document(body: list[str]) -> str:
    head = f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">'
    return "\n".join([head, '<rect width="100%" height="100%" fill="white"/>', *body, "</svg>"]) + "\n"


def _legend(labels) -> list[str]:
    out = []
    for i, lab in enumerate(labels):
        y = M + 14 + 14 * i
        c = PALETTE[i % len(PALETTE)]
        out.append(f'<rect x="{W - M - 110}" y="{y - 8}" width="10" height="10" fill="{c}"/>')
        out.append(f'<text x="{W - M - 96}" y="{y + 1}" font-size="11">{escape(str(lab))}</text>')
    return out


def scatter(groups: dict, title: str = "", xlabel: str = "x", ylabel: str = "y", radius: float = 1.2) -> str:
    """One colour per group; each group is an (n, 2) array."""
    pts = {k: np.asarray(v, dtype=float).reshape(-1, 2) for k, v in groups.items()}
    allp = np.concatenate(list(pts.values())) if pts else np.zeros((0, 2))
    fr = _Frame(allp[:, 0], allp[:, 1])
    body = fr.axes(title, xlabel, ylabel)
    for i, (k, p) in enumerate(pts.items()):
        c = PALETTE[i % len(PALETTE)]
        body.append(f'<g fill="{c}" fill-opacity="0.5">')
        for x, y in zip(fr.px(p[:, 0]), fr.py(p[:, 1])):
            body.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="{radius}"/>')
        body.append("</g>")
    if len(pts) > 1:
        body += _legend(pts)
    return _document(body)


def lines(series: dict, title: str = "", xlabel: str = "x", ylabel: str = "y") -> str:
    """One polyline with markers per series; each series is (xs, ys)."""
    xs = np.concatenate([np.asarray(s[0], float) for s in series.values()]) if series else np.zeros(0)
    ys = np.concatenate([np.asarray(s[1], float) for s in series.values()]) if series else np.zeros(0)
    fr = _Frame(xs, ys)
    body = fr.axes(title, xlabel, ylabel)
    for i, (k, (sx, sy)) in enumerate(series.items()):
        c = PALETTE[i % len(PALETTE)]
        px, py = fr.px(sx), fr.py(sy)
        ok = np.isfinite(px) & np.isfinite(py)
        pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(px[ok], py[ok]))
        body.append(f'<polyline points="{pts}" fill="none" stroke="{c}" stroke-width="1.5"/>')
        if len(sx) <= 60:
            for a, b in zip(px[ok], py[ok]):
                body.append(f'<circle cx="{a:.1f}" cy="{b:.1f}" r="2.5" fill="{c}"/>')
    body += _legend(series)
    return _document(body)
