"""Trajectory logs (JSON lines) and their SVG rendering."""
from __future__ import annotations

import json
from pathlib import Path

PALETTE = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]
EVENT_STYLE = {"enter_I": "#2ca02c", "exit_I": "#d62728", "copy_paste": "#7f7f7f"}


class LogFormatError(ValueError):
    def __init__(self, lineno, msg):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


def write_log(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_log(path) -> list[dict]:
    records = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            r = json.loads(line)
        except json.JSONDecodeError as exc:
            raise LogFormatError(n, f"not JSON ({exc.msg})") from None
        if not isinstance(r, dict) or "point_id" not in r or "event" not in r:
            raise LogFormatError(n, "record needs point_id and event fields")
        if r["point_id"] is not None:
            try:
                float(r["x"]), float(r["y"])
            except (KeyError, TypeError, ValueError):
                raise LogFormatError(n, "point record without numeric x/y") from None
        records.append(r)
    return records


def trajectories(records) -> dict:
    """point_id -> {"path": [(x, y), ...], "target": (x, y) | None, "events": [(event, x, y)]}"""
    out: dict = {}
    for r in records:
        pid = r["point_id"]
        if pid is None:
            continue
        tr = out.setdefault(pid, {"path": [], "target": None, "events": []})
        xy = (float(r["x"]), float(r["y"]))
        if r.get("target") is not None:
            tr["target"] = tuple(float(v) for v in r["target"])
        if r["event"] is None:
            if not tr["path"] or tr["path"][-1] != xy:
                tr["path"].append(xy)
        else:
            tr["events"].append((r["event"], *xy))
    return out


def render_svg(records, cell: float = 8.0, pad: float = 3.0) -> str:
    tracks = trajectories(records)
    xs, ys = [], []
    for tr in tracks.values():
        pts = tr["path"] + ([tr["target"]] if tr["target"] else [])
        xs += [p[0] for p in pts]
        ys += [p[1] for p in pts]
    if not xs:
        xs, ys = [0.0], [0.0]
    x0, y0 = min(xs) - pad, min(ys) - pad
    W, H = (max(xs) + pad - x0) * cell, (max(ys) + pad - y0) * cell

    def X(v):
        return f"{(v - x0) * cell:.2f}"

    def Y(v):
        return f"{(v - y0) * cell:.2f}"

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W:.0f}" height="{H:.0f}" '
           f'viewBox="0 0 {W:.2f} {H:.2f}">',
           f'<rect width="{W:.2f}" height="{H:.2f}" fill="white"/>']
    for k, pid in enumerate(sorted(tracks)):
        tr, col = tracks[pid], PALETTE[k % len(PALETTE)]
        path = tr["path"] or [(0.0, 0.0)]
        pts = " ".join(f"{X(x)},{Y(y)}" for x, y in path)
        out.append(f'<g id="point-{pid}">')
        out.append(f'<polyline class="trajectory" points="{pts}" fill="none" stroke="{col}" '
                   f'stroke-width="1.5"/>')
        sx, sy = path[0]
        out.append(f'<circle class="source" cx="{X(sx)}" cy="{Y(sy)}" r="3" fill="{col}"/>')
        fx, fy = path[-1]
        out.append(f'<circle class="final" cx="{X(fx)}" cy="{Y(fy)}" r="3" fill="none" stroke="{col}"/>')
        if tr["target"]:
            tx, ty = tr["target"]
            out.append(f'<rect class="target" x="{(tx - x0) * cell - 4:.2f}" y="{(ty - y0) * cell - 4:.2f}" '
                       f'width="8" height="8" fill="none" stroke="#1f3f9f" stroke-width="1.5"/>')
        for ev, ex, ey in tr["events"]:
            out.append(f'<circle class="event {ev}" cx="{X(ex)}" cy="{Y(ey)}" r="1.8" '
                       f'fill="{EVENT_STYLE.get(ev, "black")}"><title>{ev}</title></circle>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
