"""Dependency-free SVG heatmap of a coupled attention map."""
from __future__ import annotations

import numpy as np

CELL = 12
MARGIN = 40


def gray_levels(values: np.ndarray) -> np.ndarray:
    """Linear map min -> 255 (white), max -> 0 (black); a constant map is white."""
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.full(values.shape, 255, dtype=int)
    return np.rint(255 * (1 - (values - lo) / (hi - lo))).astype(int)


def heatmap_svg(attention_map: np.ndarray, title: str = "coupled attention") -> str:
    """Rows are frames, columns joints; legend carries the numeric range."""
    m = np.asarray(attention_map, dtype=np.float64)
    T, N = m.shape
    levels = gray_levels(m)
    width = 2 * MARGIN + N * CELL
    height = 2 * MARGIN + T * CELL + 30
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<title>{title}</title>',
        f'<text x="{MARGIN}" y="{MARGIN - 20}" font-size="12">{title}: rows = frames, columns = joints</text>',
        f'<g id="cells" transform="translate({MARGIN},{MARGIN})">',
    ]
    for t in range(T):
        for j in range(N):
            g = levels[t, j]
            parts.append(
                f'<rect x="{j * CELL}" y="{t * CELL}" width="{CELL}" height="{CELL}" '
                f'fill="rgb({g},{g},{g})" data-frame="{t}" data-joint="{j}" data-value="{m[t, j]!r}"/>'
            )
    parts.append("</g>")
    ly = MARGIN + T * CELL + 10
    parts += [
        '<g id="legend">',
        '<defs><linearGradient id="ramp"><stop offset="0" stop-color="white"/>'
        '<stop offset="1" stop-color="black"/></linearGradient></defs>',
        f'<rect x="{MARGIN}" y="{ly}" width="{N * CELL}" height="10" fill="url(#ramp)" stroke="gray"/>',
        f'<text id="legend-min" x="{MARGIN}" y="{ly + 24}" font-size="10">min {float(m.min()):.6g}</text>',
        f'<text id="legend-max" x="{MARGIN + N * CELL}" y="{ly + 24}" font-size="10" '
        f'text-anchor="end">max {float(m.max()):.6g}</text>',
        "</g>",
        "</svg>",
    ]
    return "\n".join(parts) + "\n"
