"""Static SVG view of a decode trace: one cell per token, darker = accepted earlier."""

from __future__ import annotations

import re
from xml.sax.saxutils import escape

CELL = 22
PAD = 16


def _shade(step: int, first: int, last: int) -> str:
    frac = 0.0 if last == first else (step - first) / (last - first)
    # dark blue for early tokens fading toward pale blue
    r = int(30 + frac * 190)
    g = int(60 + frac * 170)
    b = int(140 + frac * 110)
    return f"rgb({r},{g},{b})"


def slot_labels(trace: dict) -> dict[int, int]:
    """Generation-order label of each slot, keyed by slot origin."""
    return {s["origin"]: s["iteration"] for s in trace["slots"]}


def render_svg(trace: dict, row_len: int | None = None, tokens: dict[int, str] | None = None) -> str:
    """Render a trace dict (as produced by ``DecodeTrace.to_dict``).

    ``row_len`` wraps the grid (defaults to one row); ``tokens`` optionally
    maps positions to text drawn inside the cells.
    """
    cells = sorted(trace["tokens"], key=lambda t: t["pos"])
    if not cells:
        return '<svg xmlns="http://www.w3.org/2000/svg" width="0" height="0"/>'
    start = cells[0]["pos"]
    span = cells[-1]["pos"] - start + 1
    row_len = row_len or span
    steps = [c["iter"] for c in cells]
    lo, hi = min(steps), max(steps)
    n_rows = -(-span // row_len)
    width = 2 * PAD + row_len * CELL
    height = 2 * PAD + n_rows * (CELL + 10)

    def xy(pos):
        off = pos - start
        return PAD + (off % row_len) * CELL, PAD + 10 + (off // row_len) * (CELL + 10)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="9">'
    ]
    for c in cells:
        x, y = xy(c["pos"])
        parts.append(
            f'<rect class="tok" x="{x}" y="{y}" width="{CELL}" height="{CELL}" '
            f'fill="{_shade(c["iter"], lo, hi)}" data-pos="{c["pos"]}" data-iter="{c["iter"]}"/>'
        )
        if tokens and c["pos"] in tokens:
            parts.append(
                f'<text x="{x + CELL / 2}" y="{y + CELL / 2 + 3}" text-anchor="middle" fill="white">'
                f"{escape(str(tokens[c['pos']]))}</text>"
            )
    labels = slot_labels(trace)
    k = len(cells) // max(1, len(labels))
    for o in sorted(labels):
        end = o + k
        label = labels[o]
        # a slot may wrap across rows; outline each row segment
        pos = o
        while pos < end:
            x, y = xy(pos)
            seg = min(end - pos, row_len - (pos - start) % row_len)
            parts.append(
                f'<rect class="slot" x="{x}" y="{y}" width="{seg * CELL}" height="{CELL}" '
                f'fill="none" stroke="black" stroke-width="1.5"/>'
            )
            pos += seg
        x, y = xy(o)
        parts.append(f'<text class="order" x="{x + 2}" y="{y - 2}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def order_labels_left_to_right(svg: str) -> list[int]:
    """Slot-order annotations in document (left-to-right) order."""
    return [int(m) for m in re.findall(r'<text class="order"[^>]*>(\d+)</text>', svg)]
