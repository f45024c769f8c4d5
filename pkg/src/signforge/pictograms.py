"""Procedurally drawn pictogram library.

Every built-in class ships six masks: variant 0 is the original pictogram and
variants 1-5 are alternative drawings of the same symbol (heavier strokes,
filled silhouettes, different proportions). Masks are drawn with Pillow at 4x
supersampling and box-filtered down, so edges are anti-aliased.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw

MASK_SIZE = 32
_SUPERSAMPLE = 4
N_VARIANTS = 6


@dataclass(frozen=True)
class _Style:
    width: float  # stroke width in unit-square coordinates
    filled: bool
    scale: float
    tweak: int  # per-symbol structural variation


_STYLES = [
    _Style(0.06, False, 0.90, 0),
    _Style(0.10, False, 0.92, 0),
    _Style(0.06, True, 0.90, 1),
    _Style(0.08, True, 1.00, 2),
    _Style(0.12, True, 0.95, 0),
    _Style(0.07, False, 1.00, 3),
]


class _Pen:
    """Draws in unit-square coordinates onto a supersampled canvas."""

    def __init__(self, style: _Style):
        self.size = MASK_SIZE * _SUPERSAMPLE
        self.img = Image.new("L", (self.size, self.size), 0)
        self.draw = ImageDraw.Draw(self.img)
        self.style = style

    def _xy(self, x, y):
        s = self.style.scale
        return ((0.5 + (x - 0.5) * s) * self.size, (0.5 + (y - 0.5) * s) * self.size)

    def _w(self, w=None):
        w = self.style.width if w is None else w
        return max(1, int(round(w * self.style.scale * self.size)))

    def line(self, pts, w=None):
        xy = [self._xy(*p) for p in pts]
        width = self._w(w)
        self.draw.line(xy, fill=255, width=width, joint="curve")
        r = width / 2
        for px, py in xy:
            self.draw.ellipse([px - r, py - r, px + r, py + r], fill=255)

    def ellipse(self, cx, cy, rx, ry, fill=None, w=None):
        fill = self.style.filled if fill is None else fill
        x0, y0 = self._xy(cx - rx, cy - ry)
        x1, y1 = self._xy(cx + rx, cy + ry)
        if fill:
            self.draw.ellipse([x0, y0, x1, y1], fill=255)
        else:
            self.draw.ellipse([x0, y0, x1, y1], outline=255, width=self._w(w))

    def poly(self, pts, fill=None, w=None):
        fill = self.style.filled if fill is None else fill
        xy = [self._xy(*p) for p in pts]
        if fill:
            self.draw.polygon(xy, fill=255)
        else:
            self.line(pts + [pts[0]], w)

    def rect(self, x0, y0, x1, y1, fill=None, w=None):
        self.poly([(x0, y0), (x1, y0), (x1, y1), (x0, y1)], fill, w)

    def mask(self) -> np.ndarray:
        small = self.img.resize((MASK_SIZE, MASK_SIZE), Image.BOX)
        return np.asarray(small, dtype=np.float64) / 255.0


def _truck(p: _Pen):
    t = p.style.tweak
    body_top = 0.30 if t != 2 else 0.25
    p.rect(0.10, body_top, 0.62, 0.68)
    cab = [(0.64, 0.40), (0.80, 0.40), (0.90, 0.55), (0.90, 0.68), (0.64, 0.68)]
    p.poly(cab)
    if t == 3:
        p.line([(0.10, 0.74), (0.90, 0.74)])
    r = 0.08 if t != 1 else 0.10
    for cx in (0.24, 0.48, 0.78):
        p.ellipse(cx, 0.76, r, r, fill=True)


def _bicycle(p: _Pen):
    t = p.style.tweak
    r = 0.20 if t != 2 else 0.23
    w = None if not p.style.filled else p.style.width * 1.3
    p.ellipse(0.25, 0.65, r, r, fill=False, w=w)
    p.ellipse(0.75, 0.65, r, r, fill=False, w=w)
    p.line([(0.25, 0.65), (0.45, 0.40), (0.70, 0.40), (0.75, 0.65)])
    p.line([(0.45, 0.40), (0.52, 0.65), (0.70, 0.40)])
    p.line([(0.40, 0.32), (0.50, 0.32)])
    p.line([(0.70, 0.40), (0.66, 0.28), (0.76, 0.26)])
    if t in (1, 3):
        p.ellipse(0.52, 0.65, 0.05, 0.05, fill=True)


def _person(p: _Pen, cx=0.5, scale=1.0, stride=1.0):
    def q(x, y):
        return (cx + (x - 0.5) * scale, 0.95 - (0.95 - y) * scale)

    hx, hy = q(0.52, 0.14)
    p.ellipse(hx, hy, 0.08 * scale, 0.08 * scale, fill=True)
    torso = [q(0.50, 0.26), q(0.47, 0.58)]
    p.line(torso, w=p.style.width * (1.6 if p.style.filled else 1.0))
    p.line([q(0.47, 0.58), q(0.47 - 0.16 * stride, 0.90)])
    p.line([q(0.47, 0.58), q(0.47 + 0.14 * stride, 0.75), q(0.47 + 0.14 * stride, 0.90)])
    p.line([q(0.50, 0.32), q(0.34, 0.50)])
    p.line([q(0.50, 0.32), q(0.64, 0.48)])


def _pedestrian(p: _Pen):
    t = p.style.tweak
    _person(p, cx=0.5, scale=1.0 if t != 2 else 0.95, stride=1.0 if t != 3 else 1.3)


def _deer(p: _Pen):
    t = p.style.tweak
    p.ellipse(0.45, 0.52, 0.25, 0.11)
    p.line([(0.65, 0.46), (0.76, 0.26)], w=p.style.width * 1.4)
    p.ellipse(0.80, 0.24, 0.07, 0.05, fill=True)
    for x0, x1 in ((0.27, 0.22), (0.36, 0.38), (0.56, 0.54), (0.64, 0.70)):
        p.line([(x0, 0.58), (x1, 0.88)])
    p.line([(0.78, 0.19), (0.72, 0.06)])
    p.line([(0.82, 0.19), (0.90, 0.06)])
    if t in (1, 3):
        p.line([(0.74, 0.12), (0.66, 0.10)])
        p.line([(0.87, 0.11), (0.95, 0.12)])
    p.line([(0.20, 0.48), (0.14, 0.40)])


def _children(p: _Pen):
    t = p.style.tweak
    big = 0.85 if t != 2 else 0.9
    _person(p, cx=0.34, scale=big)
    _person(p, cx=0.70, scale=0.65 if t != 3 else 0.7)
    p.line([(0.43, 0.55), (0.60, 0.64)])


def _road_works(p: _Pen):
    t = p.style.tweak
    _person(p, cx=0.40, scale=0.9)
    p.line([(0.56, 0.50), (0.80, 0.90)])
    p.poly([(0.76, 0.86), (0.90, 0.84), (0.88, 0.95), (0.74, 0.95)], fill=True)
    pile = [(0.05, 0.95), (0.22, 0.72), (0.32, 0.95)] if t != 1 else [(0.02, 0.95), (0.20, 0.66), (0.34, 0.95)]
    p.poly(pile, fill=True)


def _falling_rocks(p: _Pen):
    t = p.style.tweak
    p.poly([(0.10, 0.12), (0.22, 0.12), (0.22, 0.95), (0.10, 0.95)], fill=True)
    rocks = [(0.45, 0.30, 0.09), (0.62, 0.55, 0.11), (0.40, 0.72, 0.08), (0.78, 0.82, 0.10)]
    if t == 2:
        rocks.append((0.60, 0.18, 0.06))
    for cx, cy, r in rocks:
        p.ellipse(cx, cy, r, r * 0.9)
    p.line([(0.30, 0.95), (0.95, 0.95)])


@dataclass(frozen=True)
class BuiltinClass:
    class_id: int
    key: str
    display_name: str
    shape: str
    drawer: object


BUILTIN_CLASSES = [
    BuiltinClass(1, "no_trucks", "No trucks", "prohibitory_circle", _truck),
    BuiltinClass(2, "no_bicycles", "No bicycles", "prohibitory_circle", _bicycle),
    BuiltinClass(3, "no_pedestrians", "No pedestrians", "prohibitory_circle", _pedestrian),
    BuiltinClass(4, "deer_crossing", "Deer crossing", "warning_triangle", _deer),
    BuiltinClass(5, "children", "Children", "warning_triangle", _children),
    BuiltinClass(6, "road_works", "Road works", "warning_triangle", _road_works),
    BuiltinClass(7, "falling_rocks", "Falling rocks", "warning_triangle", _falling_rocks),
]


def draw_mask(class_key: str, variant: int) -> np.ndarray:
    """Return the ``MASK_SIZE`` x ``MASK_SIZE`` mask of a built-in pictogram variant."""
    if not 0 <= variant < N_VARIANTS:
        raise ValueError(f"variant must be in [0, {N_VARIANTS - 1}], got {variant}")
    for c in BUILTIN_CLASSES:
        if c.key == class_key:
            pen = _Pen(_STYLES[variant])
            c.drawer(pen)
            return np.clip(pen.mask(), 0.0, 1.0)
    raise KeyError(f"unknown built-in pictogram {class_key!r}")
