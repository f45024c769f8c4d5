"""Independent reference computations used by the tests.

Finite differences of rendered images with respect to class colors, and a
one-candidate-at-a-time brute force for patch placement.
"""

import math

import numpy as np
import torch
import torch.nn.functional as F

from signforge.attacks import grid_positions
from signforge.synth.augment import AugmentationChain, apply_chain, sample_chain
from signforge.synth.render import embed_in_scene, render_sign


def full_chain(rng, length=8) -> AugmentationChain:
    while True:
        c = sample_chain(rng)
        if len(c) == length:
            return c


def pipeline_fn(sign, scene, chain, res):
    """color (3,) -> augmented image, float64 end to end."""

    def f(color):
        face, alpha = render_sign(sign, res, color)
        return apply_chain(embed_in_scene(scene, face, alpha, sign.shape), chain)

    return f


def unsaturated(f, color, h=1e-3):
    """Pixels strictly inside (0, 1) at color and at every +-h probe, i.e. away from clip kinks."""
    keep = None
    with torch.no_grad():
        base = torch.tensor(color, dtype=torch.float64)
        probes = [base]
        for k in range(3):
            e = torch.zeros(3, dtype=torch.float64)
            e[k] = h
            probes += [base + e, base - e]
        for p in probes:
            img = f(p)
            ok = (img > 0) & (img < 1)
            keep = ok if keep is None else keep & ok
    return keep.to(torch.float64)


def color_grad_check(f, color, weights, h=1e-3):
    """(analytic, numeric) gradients of sum(weights * f(color)) w.r.t. the 3 channels."""
    c = torch.tensor(color, dtype=torch.float64, requires_grad=True)
    (weights * f(c)).sum().backward()
    analytic = c.grad.numpy().copy()
    numeric = np.zeros(3)
    with torch.no_grad():
        for k in range(3):
            e = torch.zeros(3, dtype=torch.float64)
            e[k] = h
            base = torch.tensor(color, dtype=torch.float64)
            numeric[k] = ((weights * f(base + e)).sum() - (weights * f(base - e)).sum()).item() / (2 * h)
    return analytic, numeric


def rel_error(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def brute_force_argmax(model, x, y, side, stride, color=0.5):
    """Loss of every grid position, one forward pass each; first maximum in row-major order."""
    h, w = x.shape[-2:]
    best, best_loss = None, -math.inf
    with torch.no_grad():
        for r, c in grid_positions(h, w, side, stride):
            img = x.clone()
            img[:, r : r + side, c : c + side] = color
            loss = F.cross_entropy(model(img[None]), y[None]).item()
            if loss > best_loss:
                best, best_loss = (r, c), loss
    return best


def gray_occluded(model, x, y, side, stride, color=0.5):
    """Each image with a ``color`` square at its brute-force worst-case position."""
    out = x.clone()
    for k in range(len(x)):
        r, c = brute_force_argmax(model, x[k], y[k], side, stride, color)
        out[k, :, r : r + side, c : c + side] = color
    return out
