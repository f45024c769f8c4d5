"""Fifteen differentiable image augmentations and random chains of them.

Each augmentation works on a single (3, H, W) tensor, is built only from
differentiable torch ops, and is parameterized by a flat list of floats so a
chain can be stored verbatim in a dataset manifest. Parameter ranges are the
constants in each ``sample`` function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from signforge.synth.geometry import apply_homography, homography, pixel_centers, sampling_grid

MAX_CHAIN = 8

_LUMA = (0.299, 0.587, 0.114)
_RGB2YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])


class AugmentationError(ValueError):
    pass


@dataclass(frozen=True)
class Augmentation:
    name: str
    sample: Callable[[np.random.Generator], list]
    apply: Callable[[torch.Tensor, list], torch.Tensor]


def _depthwise(img: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    kh, kw = kernel.shape
    x = F.pad(img[None], (kw // 2, kw // 2, kh // 2, kh // 2), mode="replicate")
    weight = kernel.to(img.dtype).expand(3, 1, kh, kw)
    return F.conv2d(x, weight, groups=3)[0]


def _resample(img: torch.Tensor, u: np.ndarray, v: np.ndarray) -> torch.Tensor:
    h, w = img.shape[-2:]
    grid = sampling_grid(u, v, w, h, img.dtype)
    return F.grid_sample(img[None], grid, mode="bilinear", padding_mode="border", align_corners=False)[0]


def _affine(img: torch.Tensor, angle=0.0, scale=1.0, tx=0.0, ty=0.0) -> torch.Tensor:
    # inverse map: output pixel -> source pixel, about the image center
    h, w = img.shape[-2:]
    xs, ys = pixel_centers(h, w)
    cx, cy = w / 2, h / 2
    c, s = math.cos(angle), math.sin(angle)
    dx, dy = xs - cx - tx, ys - cy - ty
    u = (c * dx + s * dy) / scale + cx
    v = (-s * dx + c * dy) / scale + cy
    return _resample(img, u, v)


def _color_matrix(img: torch.Tensor, mat: np.ndarray) -> torch.Tensor:
    return torch.einsum("ij,jhw->ihw", torch.from_numpy(mat).to(img.dtype), img)


def _luma(img: torch.Tensor) -> torch.Tensor:
    wts = torch.tensor(_LUMA, dtype=img.dtype).reshape(3, 1, 1)
    return (img * wts).sum(0, keepdim=True)


# -- the fifteen operations -----------------------------------------------------


def _noise_sample(rng):
    return [rng.uniform(0.01, 0.06), float(rng.integers(0, 2**31 - 1))]


def _noise_apply(img, p):
    sigma, seed = p
    g = torch.Generator().manual_seed(int(seed))
    noise = torch.randn(img.shape, generator=g, dtype=torch.float64).to(img.dtype)
    return img + sigma * noise


def _motion_sample(rng):
    return [float(rng.choice([3, 5, 7])), rng.uniform(0.0, math.pi)]


def _motion_apply(img, p):
    k, angle = int(p[0]), p[1]
    kern = np.zeros((k, k))
    c = (k - 1) / 2
    for t in np.linspace(-c, c, 8 * k):
        x, y = c + t * math.cos(angle), c + t * math.sin(angle)
        x0, y0 = int(math.floor(x)), int(math.floor(y))
        fx, fy = x - x0, y - y0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                if 0 <= y0 + dy < k and 0 <= x0 + dx < k:
                    kern[y0 + dy, x0 + dx] += wx * wy
    kern /= kern.sum()
    return _depthwise(img, torch.from_numpy(kern))


def _gblur_sample(rng):
    return [rng.uniform(0.4, 1.2)]


def _gblur_apply(img, p):
    sigma = p[0]
    r = max(1, int(math.ceil(2 * sigma)))
    t = np.arange(-r, r + 1)
    g = np.exp(-(t**2) / (2 * sigma**2))
    g /= g.sum()
    return _depthwise(img, torch.from_numpy(np.outer(g, g)))


def _darken_sample(rng):
    return [rng.uniform(0.5, 0.9)]


def _darken_apply(img, p):
    return img * p[0]


def _brighten_sample(rng):
    return [rng.uniform(0.05, 0.25)]


def _brighten_apply(img, p):
    return img + p[0]


def _contrast_sample(rng):
    return [rng.uniform(0.6, 1.4)]


def _contrast_apply(img, p):
    mean = _luma(img).mean()
    return (img - mean) * p[0] + mean


def _saturation_sample(rng):
    return [rng.uniform(0.5, 1.5)]


def _saturation_apply(img, p):
    gray = _luma(img)
    return gray + p[0] * (img - gray)


def _hue_sample(rng):
    return [rng.uniform(-0.3, 0.3)]


def _hue_apply(img, p):
    c, s = math.cos(p[0]), math.sin(p[0])
    rot = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    mat = np.linalg.inv(_RGB2YIQ) @ rot @ _RGB2YIQ
    return _color_matrix(img, mat)


def _translate_sample(rng):
    return [rng.uniform(-0.06, 0.06), rng.uniform(-0.06, 0.06)]


def _translate_apply(img, p):
    h, w = img.shape[-2:]
    return _affine(img, tx=p[0] * w, ty=p[1] * h)


def _rotate_sample(rng):
    return [rng.uniform(-12.0, 12.0)]


def _rotate_apply(img, p):
    return _affine(img, angle=math.radians(p[0]))


def _scale_sample(rng):
    return [rng.uniform(0.85, 1.15)]


def _scale_apply(img, p):
    return _affine(img, scale=p[0])


def _perspective_sample(rng):
    return list(rng.uniform(-0.05, 0.05, size=8))


def _perspective_apply(img, p):
    h, w = img.shape[-2:]
    corners = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float64)
    moved = corners + np.asarray(p).reshape(4, 2) * np.array([w, h])
    hmat = homography(corners, moved)  # output -> source
    xs, ys = pixel_centers(h, w)
    u, v = apply_homography(hmat, xs, ys)
    return _resample(img, u, v)


def _cutout_sample(rng):
    # top-left (fractions), side (fraction of width), gray fill
    return [rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.08, 0.2), rng.uniform(0.1, 0.9)]


def _cutout_apply(img, p):
    h, w = img.shape[-2:]
    side = max(1, int(round(p[2] * w)))
    r = int(p[0] * (h - side))
    c = int(p[1] * (w - side))
    m = torch.zeros((1, h, w), dtype=img.dtype)
    m[:, r : r + side, c : c + side] = 1
    return img * (1 - m) + p[3] * m


def _dct_matrix(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None]
    d = np.cos(math.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2 / n)
    d[0] /= math.sqrt(2)
    return d


def _jpeg_sample(rng):
    return [rng.uniform(0.35, 0.8)]


def _jpeg_apply(img, p):
    h, w = img.shape[-2:]
    dh = torch.from_numpy(_dct_matrix(h)).to(img.dtype)
    dw = torch.from_numpy(_dct_matrix(w)).to(img.dtype)
    fy, fx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    keep = torch.from_numpy((fy + fx) < 2 * p[0]).to(img.dtype)
    coef = dh @ img @ dw.T
    return dh.T @ (coef * keep) @ dw


def _vignette_sample(rng):
    return [rng.uniform(0.1, 0.5)]


def _vignette_apply(img, p):
    h, w = img.shape[-2:]
    xs, ys = pixel_centers(h, w)
    r2 = ((xs - w / 2) / (w / 2)) ** 2 + ((ys - h / 2) / (h / 2)) ** 2
    fall = torch.from_numpy(1 - p[0] * r2 / 2).to(img.dtype)
    return img * fall


REGISTRY: dict[str, Augmentation] = {
    a.name: a
    for a in [
        Augmentation("gaussian_noise", _noise_sample, _noise_apply),
        Augmentation("motion_blur", _motion_sample, _motion_apply),
        Augmentation("gaussian_blur", _gblur_sample, _gblur_apply),
        Augmentation("darken", _darken_sample, _darken_apply),
        Augmentation("brighten", _brighten_sample, _brighten_apply),
        Augmentation("contrast", _contrast_sample, _contrast_apply),
        Augmentation("saturation_shift", _saturation_sample, _saturation_apply),
        Augmentation("hue_shift", _hue_sample, _hue_apply),
        Augmentation("translate", _translate_sample, _translate_apply),
        Augmentation("rotate", _rotate_sample, _rotate_apply),
        Augmentation("scale", _scale_sample, _scale_apply),
        Augmentation("perspective_jitter", _perspective_sample, _perspective_apply),
        Augmentation("cutout_occlusion", _cutout_sample, _cutout_apply),
        Augmentation("jpeg_like_smoothing", _jpeg_sample, _jpeg_apply),
        Augmentation("vignette", _vignette_sample, _vignette_apply),
    ]
}
AUGMENTATION_IDS = tuple(REGISTRY)


@dataclass(frozen=True)
class AugmentationChain:
    ops: tuple = ()  # ((augmentation_id, (params...)), ...)

    def __post_init__(self):
        ops = tuple((str(name), tuple(float(v) for v in params)) for name, params in self.ops)
        if len(ops) > MAX_CHAIN:
            raise AugmentationError(f"chain length {len(ops)} > {MAX_CHAIN}")
        for name, _ in ops:
            if name not in REGISTRY:
                raise AugmentationError(f"unknown augmentation id {name!r}")
        object.__setattr__(self, "ops", ops)

    def __len__(self):
        return len(self.ops)

    def to_json(self) -> list:
        return [[name, list(params)] for name, params in self.ops]

    @classmethod
    def from_json(cls, doc) -> "AugmentationChain":
        return cls(tuple((name, tuple(params)) for name, params in doc))


def sample_chain(rng: np.random.Generator) -> AugmentationChain:
    length = int(rng.integers(1, MAX_CHAIN + 1))
    picks = rng.choice(len(AUGMENTATION_IDS), size=length, replace=False)
    ops = []
    for k in picks:
        aug = REGISTRY[AUGMENTATION_IDS[k]]
        ops.append((aug.name, tuple(float(v) for v in aug.sample(rng))))
    return AugmentationChain(tuple(ops))


def apply_chain(image: torch.Tensor, chain: AugmentationChain) -> torch.Tensor:
    """Apply ``chain`` to a (3, H, W) image and clip the result to [0, 1]."""
    out = image
    for name, params in chain.ops:
        try:
            aug = REGISTRY[name]
        except KeyError:
            raise AugmentationError(f"unknown augmentation id {name!r}") from None
        out = aug.apply(out, list(params))
    if not chain.ops:
        return out
    return out.clamp(0.0, 1.0)
