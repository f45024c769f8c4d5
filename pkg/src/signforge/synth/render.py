"""Sign-face rendering and perspective embedding into context scenes.

Both steps are written in torch so that gradients flow from the final image
back to the pictogram color.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F

from signforge.synth.geometry import apply_homography, homography, pixel_centers, sampling_grid
from signforge.synth.scenes import SHAPE_TO_SCENE, ContextScene

MIN_RESOLUTION = 16
SIGN_RED = (0.80, 0.07, 0.10)
SIGN_WHITE = (0.96, 0.96, 0.96)
_SS = 4  # supersampling for anti-aliased face geometry


class RenderError(ValueError):
    pass


def _subpixel_coords(res: int):
    t = (np.arange(res * _SS) + 0.5) / (res * _SS)
    return np.meshgrid(t, t, indexing="xy")


def _coverage(inside: np.ndarray, res: int) -> np.ndarray:
    return inside.reshape(res, _SS, res, _SS).mean(axis=(1, 3))


def _in_triangle(x, y, tri):
    def edge(p, q):
        return (q[0] - p[0]) * (y - p[1]) - (q[1] - p[1]) * (x - p[0])

    e = [edge(tri[k], tri[(k + 1) % 3]) for k in range(3)]
    return ((e[0] >= 0) & (e[1] >= 0) & (e[2] >= 0)) | ((e[0] <= 0) & (e[1] <= 0) & (e[2] <= 0))


def _shrink(tri: np.ndarray, d: float) -> np.ndarray:
    """Triangle offset inwards by ``d`` (unit coords)."""
    a, b, c = (np.linalg.norm(tri[(k + 1) % 3] - tri[(k + 2) % 3]) for k in range(3))
    incenter = (a * tri[0] + b * tri[1] + c * tri[2]) / (a + b + c)
    area2 = abs(np.cross(tri[1] - tri[0], tri[2] - tri[0]))
    r = area2 / (a + b + c)
    return incenter + (tri - incenter) * (r - d) / r


@lru_cache(maxsize=64)
def face_template(shape: str, res: int):
    """Return (base_rgb (3,R,R), face_alpha (R,R), pictogram box (row, col, side)), float64."""
    x, y = _subpixel_coords(res)
    red = np.array(SIGN_RED)[:, None, None]
    white = np.array(SIGN_WHITE)[:, None, None]
    if shape == "prohibitory_circle":
        r2 = (x - 0.5) ** 2 + (y - 0.5) ** 2
        outer = _coverage(r2 <= 0.49**2, res)
        inner = _coverage(r2 <= 0.385**2, res)
        box = 0.56
        box_center = (0.5, 0.5)
    elif shape == "warning_triangle":
        tri = np.array([[0.5, 0.05], [0.02, 0.9], [0.98, 0.9]])
        outer = _coverage(_in_triangle(x, y, tri), res)
        inner = _coverage(_in_triangle(x, y, _shrink(tri, 0.1)), res)
        box = 0.40
        box_center = (0.5, 0.62)
    else:
        raise RenderError(f"unknown sign shape {shape!r}")
    ring = np.clip(outer - inner, 0.0, 1.0)
    base = np.where(outer > 0, (red * ring + white * inner) / np.maximum(outer, 1e-12), 0.0)
    side = max(1, int(round(box * res)))
    row = int(round(box_center[1] * res - side / 2))
    col = int(round(box_center[0] * res - side / 2))
    return base, outer, (row, col, side)


def placed_mask(alpha_mask: np.ndarray, shape: str, res: int) -> np.ndarray:
    """The pictogram mask resampled into its box on the ``res`` x ``res`` face canvas."""
    _, _, (row, col, side) = face_template(shape, res)
    m = torch.from_numpy(np.array(alpha_mask, dtype=np.float64))[None, None]
    m = F.interpolate(m, size=(side, side), mode="bilinear", align_corners=False, antialias=True)
    canvas = np.zeros((res, res))
    canvas[row : row + side, col : col + side] = m[0, 0].clamp(0, 1).numpy()
    return canvas


def render_sign(sign, resolution: int, color: torch.Tensor | None = None, mask: np.ndarray | None = None):
    """Render a sign face.

    :param sign: a :class:`SignClass`
    :param resolution: face side in pixels
    :param color: optional (3,) tensor overriding ``sign.color``; may require grad
    :param mask: optional precomputed :func:`placed_mask`
    :return: (face (3,R,R), alpha (R,R)) tensors; dtype follows ``color`` (float32 default)
    """
    if resolution < MIN_RESOLUTION:
        raise RenderError(f"resolution {resolution} < {MIN_RESOLUTION}")
    if color is None:
        color = torch.tensor(sign.color.as_tuple(), dtype=torch.float32)
    dtype = color.dtype
    base, alpha, _ = face_template(sign.shape, resolution)
    if mask is None:
        mask = placed_mask(sign.pictogram.alpha_mask, sign.shape, resolution)
    m = torch.from_numpy(mask).to(dtype)[None]
    face = torch.from_numpy(base).to(dtype) * (1 - m) + color.reshape(3, 1, 1) * m
    return face, torch.from_numpy(alpha).to(dtype)


@lru_cache(maxsize=512)
def _warp_grid_cached(quad_key: tuple, face_res: int, h: int, w: int) -> np.ndarray:
    quad = np.array(quad_key).reshape(4, 2)
    src = np.array([[0, 0], [face_res, 0], [face_res, face_res], [0, face_res]], dtype=np.float64)
    hmat = homography(quad, src)
    xs, ys = pixel_centers(h, w)
    u, v = apply_homography(hmat, xs, ys)
    return sampling_grid(u, v, face_res, face_res, torch.float64)


def warp_grid(quad: np.ndarray, face_res: int, h: int, w: int, dtype=torch.float32) -> torch.Tensor:
    key = tuple(float(v) for v in np.asarray(quad, dtype=np.float64).ravel())
    return _warp_grid_cached(key, face_res, h, w).to(dtype)


def check_compatible(scene: ContextScene, sign_shape: str) -> None:
    if SHAPE_TO_SCENE.get(sign_shape) != scene.scene_type:
        raise RenderError(f"sign shape {sign_shape!r} cannot be embedded in a {scene.scene_type} scene")


def embed_in_scene(scene: ContextScene, face: torch.Tensor, alpha: torch.Tensor, sign_shape: str | None = None):
    """Warp ``face`` into the scene's placement quad and alpha-composite it.

    Bilinear sampling of the premultiplied face keeps the result linear (and so
    differentiable) in the face pixels. Returns a (3, H, W) image.
    """
    if sign_shape is not None:
        check_compatible(scene, sign_shape)
    dtype = face.dtype
    h, w = scene.background.shape[:2]
    res = face.shape[-1]
    grid = warp_grid(scene.placement_quad, res, h, w, dtype)
    src = torch.cat([face * alpha, alpha[None]], dim=0)[None]
    out = F.grid_sample(src, grid, mode="bilinear", padding_mode="zeros", align_corners=False)[0]
    bg = torch.from_numpy(scene.background).to(dtype).permute(2, 0, 1)
    a = out[3:4].clamp(0, 1)
    return bg * (1 - a) + out[:3]
