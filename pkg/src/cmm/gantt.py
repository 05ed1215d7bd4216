"""SVG Gantt rendering of schedules and measured timelines."""

from __future__ import annotations

from typing import Optional

from .scheduler import Schedule

COLORS = {
    "send": "#2ca02c",
    "recv": "#ff7f0e",
    "compute": "#d62728",
    "zero": "#1f77b4",
    "alloc": "#9e9e9e",
    "merge": "#9467bd",
    "copy_back": "#8c564b",
}
LEGEND = ("send", "recv", "compute", "zero", "alloc", "merge", "copy_back")

_ROW_H = 18
_PAD = 4
_LEFT = 120
_TOP = 30


def render_rows(rows: dict[str, list[tuple[float, float, str, str]]],
                makespan: float, width: int = 1000,
                title: str = "") -> str:
    """rows: process -> [(start, finish, kind, label)] sorted upstream."""
    keys = sorted(rows)
    height = _TOP + len(keys) * (_ROW_H + _PAD) + _PAD
    span = max(makespan, 1e-9)
    scale = (width - _LEFT - 10) / span
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
           f'height="{height}" font-family="monospace" font-size="10">']
    x = _LEFT
    out.append(f'<text x="4" y="12">{title}</text>')
    for kind in LEGEND:
        out.append(f'<rect x="{x}" y="4" width="10" height="10" '
                   f'fill="{COLORS[kind]}"/>')
        out.append(f'<text x="{x + 13}" y="12">{kind}</text>')
        x += 13 + 7 * len(kind) + 14
    for i, proc in enumerate(keys):
        y = _TOP + i * (_ROW_H + _PAD)
        out.append(f'<text x="4" y="{y + 12}">{proc}</text>')
        out.append(f'<line x1="{_LEFT}" y1="{y + _ROW_H}" '
                   f'x2="{width - 10}" y2="{y + _ROW_H}" '
                   'stroke="#dddddd"/>')
        for start, finish, kind, label in rows[proc]:
            if finish <= start:
                continue
            x0 = _LEFT + start * scale
            w = max((finish - start) * scale, 0.5)
            color = COLORS.get(kind, "#333333")
            out.append(f'<rect x="{x0:.2f}" y="{y}" width="{w:.2f}" '
                       f'height="{_ROW_H}" fill="{color}">'
                       f'<title>{label} [{start:.4f}, {finish:.4f}]'
                       '</title></rect>')
    out.append(f'<text x="{_LEFT}" y="{height - 4}">0 .. '
               f'{makespan:.4f}s</text>')
    out.append("</svg>")
    return "\n".join(out)


def schedule_svg(sched: Schedule, width: int = 1000,
                 title: Optional[str] = None) -> str:
    rows: dict[str, list[tuple[float, float, str, str]]] = {}
    for t in sched.tasks:
        if t.kind in ("cache_place", "cache_evict"):
            continue
        rows.setdefault(t.process, []).append(
            (t.start, t.finish, t.kind, t.id))
    for items in rows.values():
        items.sort()
    return render_rows(rows, sched.makespan, width,
                       title or f"planned schedule, makespan "
                                f"{sched.makespan:.4f}s")


def measured_svg(sched: Schedule, task_times: dict[str, tuple[float, float]],
                 width: int = 1000, title: Optional[str] = None) -> str:
    rows: dict[str, list[tuple[float, float, str, str]]] = {}
    makespan = 0.0
    for t in sched.tasks:
        if t.id not in task_times or t.kind in ("cache_place", "cache_evict"):
            continue
        start, finish = task_times[t.id]
        makespan = max(makespan, finish)
        rows.setdefault(t.process, []).append((start, finish, t.kind, t.id))
    for items in rows.values():
        items.sort()
    return render_rows(rows, makespan, width,
                       title or f"measured timeline, makespan "
                                f"{makespan:.4f}s")
