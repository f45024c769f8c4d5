"""Homographies and sampling grids shared by scene embedding and augmentations.

Coordinates are continuous pixel-edge coordinates: pixel (i, j) covers
[j, j+1) x [i, i+1) and its center is (j + 0.5, i + 0.5).
"""

from __future__ import annotations

import numpy as np
import torch


def homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 matrix mapping the 4 ``src`` points (x, y) onto the 4 ``dst`` points."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for k, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * k] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * k + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * k] = u
        b[2 * k + 1] = v
    h = np.linalg.solve(a, b)
    return np.append(h, 1.0).reshape(3, 3)


def pixel_centers(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    return xs, ys


def apply_homography(hmat: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    den = hmat[2, 0] * xs + hmat[2, 1] * ys + hmat[2, 2]
    u = (hmat[0, 0] * xs + hmat[0, 1] * ys + hmat[0, 2]) / den
    v = (hmat[1, 0] * xs + hmat[1, 1] * ys + hmat[1, 2]) / den
    return u, v


def sampling_grid(u: np.ndarray, v: np.ndarray, src_w: int, src_h: int, dtype=torch.float32) -> torch.Tensor:
    """Grid for ``grid_sample(align_corners=False)`` reading source coords (u, v)."""
    gx = 2.0 * u / src_w - 1.0
    gy = 2.0 * v / src_h - 1.0
    return torch.from_numpy(np.stack([gx, gy], axis=-1)[None]).to(dtype)


def is_convex(quad: np.ndarray) -> bool:
    quad = np.asarray(quad, dtype=np.float64)
    signs = []
    for k in range(4):
        p0, p1, p2 = quad[k], quad[(k + 1) % 4], quad[(k + 2) % 4]
        cross = (p1[0] - p0[0]) * (p2[1] - p1[1]) - (p1[1] - p0[1]) * (p2[0] - p1[0])
        signs.append(np.sign(cross))
    return all(s > 0 for s in signs) or all(s < 0 for s in signs)
