"""Procedural context scenes: backgrounds with a perspective placement quad."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from signforge.synth.geometry import is_convex

SCENE_TYPES = ("prohibitory", "warning")
SHAPE_TO_SCENE = {"prohibitory_circle": "prohibitory", "warning_triangle": "warning"}


@dataclass(frozen=True, eq=False)
class ContextScene:
    scene_id: int
    background: np.ndarray  # (H, W, 3) float32 in [0, 1]
    placement_quad: np.ndarray  # (4, 2) x/y corners: TL, TR, BR, BL
    scene_type: str
    flipped: bool = False

    @property
    def key(self) -> tuple[int, bool]:
        return (self.scene_id, self.flipped)

    def flip(self) -> "ContextScene":
        w = self.background.shape[1]
        q = self.placement_quad.copy()
        q[:, 0] = w - q[:, 0]
        # keep the face unmirrored: the mirrored TR becomes the new TL, etc.
        q = q[[1, 0, 3, 2]]
        return ContextScene(
            self.scene_id, np.ascontiguousarray(self.background[:, ::-1]), q, self.scene_type, not self.flipped
        )


def _smooth_noise(rng, h, w, sigma):
    return gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    h = w = size
    img = np.zeros((h, w, 3))
    horizon = int(rng.uniform(0.3, 0.6) * h)
    sky_top = rng.uniform([0.35, 0.5, 0.7], [0.6, 0.75, 0.95])
    sky_low = np.clip(sky_top + rng.uniform(0.1, 0.3), 0, 1)
    if rng.random() < 0.3:  # overcast
        sky_top = sky_low = np.full(3, rng.uniform(0.55, 0.85))
    t = np.linspace(0, 1, max(horizon, 1))[:, None]
    img[:horizon] = (sky_top * (1 - t) + sky_low * t)[:, None, :]
    ground = rng.choice(
        [np.array([0.25, 0.45, 0.2]), np.array([0.4, 0.4, 0.38]), np.array([0.45, 0.38, 0.25])]
    ) * rng.uniform(0.8, 1.2)
    tex = _smooth_noise(rng, h - horizon, w, 1.0)[..., None]
    img[horizon:] = ground + 0.06 * tex
    for _ in range(rng.integers(3, 9)):
        color = rng.uniform(0.05, 0.8, size=3)
        kind = rng.integers(3)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ys, xs = np.mgrid[0:h, 0:w] + 0.5
        if kind == 0:  # tree crown
            ry, rx = rng.uniform(0.08, 0.25) * h, rng.uniform(0.06, 0.2) * w
            m = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 < 1
            color = np.array([0.1, rng.uniform(0.25, 0.5), 0.1])
        elif kind == 1:  # pole
            hw = rng.uniform(0.01, 0.03) * w
            m = (np.abs(xs - cx) < hw) & (ys > cy * 0.5)
        else:  # building / vehicle block
            hh, hw = rng.uniform(0.05, 0.2) * h, rng.uniform(0.08, 0.3) * w
            m = (np.abs(ys - cy) < hh) & (np.abs(xs - cx) < hw)
        img[m] = color
    return img


def _quad(rng: np.random.Generator, size: int) -> np.ndarray:
    while True:
        s = rng.uniform(0.66, 0.84) * size
        cx = size / 2 + rng.uniform(-0.05, 0.05) * size
        cy = size / 2 + rng.uniform(-0.05, 0.05) * size
        base = np.array([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]]) * s
        # yaw-like foreshortening plus per-corner jitter
        yaw = rng.uniform(-0.12, 0.12)
        base[:, 1] *= 1 + yaw * np.sign(base[:, 0])
        base[:, 0] *= 1 - abs(yaw)
        quad = base + np.array([cx, cy]) + rng.uniform(-0.05, 0.05, size=(4, 2)) * s
        if is_convex(quad) and quad.min() >= 0.5 and quad.max() <= size - 0.5:
            return quad


def _scene(rng, scene_id, scene_type, size) -> ContextScene:
    bg = _background(rng, size)
    quad = _quad(rng, size)
    # sign post under the sign
    cx = quad[:, 0].mean()
    bottom = quad[:, 1].max()
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    post = (np.abs(xs - cx) < 0.03 * size) & (ys > bottom - 2)
    bg[post] = rng.uniform(0.4, 0.6)
    bg = np.clip(bg, 0.0, 1.0).astype(np.float32)
    return ContextScene(scene_id, bg, quad, scene_type, False)


def generate_scenes(config, seed: int | None = None) -> list[ContextScene]:
    """Generate ``2 * scenes_per_type`` scenes, each followed by its horizontal flip.

    Scene ids ``0..scenes_per_type-1`` are prohibitory, the rest are warning scenes.
    """
    if config.scenes_per_type < 1:
        raise ValueError("scenes_per_type must be >= 1")
    seed = config.master_seed if seed is None else seed
    out = []
    for k in range(2 * config.scenes_per_type):
        scene_type = SCENE_TYPES[k // config.scenes_per_type]
        rng = np.random.default_rng([seed, 0x5CE7E, k])
        scene = _scene(rng, k, scene_type, config.image_size)
        out.extend([scene, scene.flip()])
    return out


def save_scenes(scenes: list[ContextScene], path) -> None:
    np.savez_compressed(
        path,
        scene_id=np.array([s.scene_id for s in scenes]),
        background=np.stack([s.background for s in scenes]),
        quad=np.stack([s.placement_quad for s in scenes]),
        scene_type=np.array([s.scene_type for s in scenes]),
        flipped=np.array([s.flipped for s in scenes]),
    )


def load_scenes(path) -> list[ContextScene]:
    with np.load(path) as z:
        return [
            ContextScene(int(i), bg, q, str(t), bool(f))
            for i, bg, q, t, f in zip(z["scene_id"], z["background"], z["quad"], z["scene_type"], z["flipped"])
        ]
