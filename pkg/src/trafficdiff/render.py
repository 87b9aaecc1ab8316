"""SVG drawings of scenes: drivable area, lane directions and agent boxes."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .geometry import RasterSpec, box_vertices
from .raster import Scene

PX_PER_M = 8.0


def _poly(points, to_svg, **attrs) -> str:
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in (to_svg(p) for p in points))
    extra = " ".join(f'{k.replace("_", "-")}="{v}"' for k, v in attrs.items())
    return f'<polygon points="{pts}" {extra}/>'


def scene_svg(scene: Scene, spec: RasterSpec | None = None, title: str | None = None) -> str:
    """Return an SVG document for ``scene`` covering the raster extent."""
    spec = spec or RasterSpec()
    half = spec.extent_m / 2.0
    ox, oy = spec.origin
    size = spec.extent_m * PX_PER_M

    def to_svg(p):
        return ((p[0] - ox + half) * PX_PER_M, (oy + half - p[1]) * PX_PER_M)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size:.0f}" height="{size:.0f}" '
           f'viewBox="0 0 {size:.0f} {size:.0f}">',
           f'<rect width="{size:.0f}" height="{size:.0f}" fill="#f4f4f0"/>']
    if title:
        out.append(f"<title>{title}</title>")
    for lane in scene.road_map.lanes:
        h = lane.heading
        n = np.array([-math.sin(h), math.cos(h)]) * lane.width / 2.0
        s, e = np.array(lane.start), np.array(lane.end)
        out.append(_poly([s + n, e + n, e - n, s - n], to_svg, fill="#c9c9c9"))
    for row in scene.road_map.parking:
        c, s_ = math.cos(row.heading), math.sin(row.heading)
        u, v = np.array([c, s_]) * row.depth / 2, np.array([-s_, c]) * row.length / 2
        ctr = np.array(row.center)
        out.append(_poly([ctr + u + v, ctr + u - v, ctr - u - v, ctr - u + v], to_svg,
                         fill="#d8d2c4"))
    # direction arrows every 8 m along each lane
    for lane in scene.road_map.lanes:
        for t in np.arange(4.0, lane.length, 8.0):
            a, b = lane.point_at(t), lane.point_at(min(t + 1.5, lane.length))
            (x0, y0), (x1, y1) = to_svg(a), to_svg(b)
            out.append(f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x1:.2f}" y2="{y1:.2f}" '
                       f'stroke="#ffffff" stroke-width="2"/>')
            out.append(f'<circle cx="{x1:.2f}" cy="{y1:.2f}" r="2.5" fill="#ffffff"/>')
    for k, box in enumerate(scene.agents):
        fl, fr, bl, br = box_vertices(box)
        color = "#2060c0" if k == 0 else "#d04020"
        out.append(_poly([fl, fr, br, bl], to_svg, fill=color, fill_opacity="0.6",
                         stroke="#202020", stroke_width="1"))
        front = (fl + fr) / 2.0
        c = np.array(box.center)
        (x0, y0), (x1, y1) = to_svg(c), to_svg(front)
        out.append(f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x1:.2f}" y2="{y1:.2f}" '
                   f'stroke="#202020" stroke-width="1.5"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, scene: Scene, spec: RasterSpec | None = None, title: str | None = None) -> None:
    Path(path).write_text(scene_svg(scene, spec, title), encoding="utf-8")
