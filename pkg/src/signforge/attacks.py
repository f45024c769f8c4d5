"""Evasion attacks: exhaustive patch placement, ROA, RP4_m, universal patch, PGD-Linf.

All attacks take a model mapping (B, 3, H, W) images in [0, 1] to logits and
zero-based integer labels. The model is only read, never updated; attacks put
it in eval mode and restore the previous mode on exit.
"""

from __future__ import annotations

import dataclasses
import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

ATTACK_IDS = ("roa", "rp4", "universal", "pgd", "dorpatch")
SEARCH_MODES = ("exhaustive", "gradient")
MAX_FORWARD_BATCH = 2048


class AttackError(RuntimeError):
    pass


class PlacementError(AttackError):
    pass


class UnimplementedAttackError(AttackError, NotImplementedError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    attack: str = "rp4"
    coverage: float = 0.05
    m: int = 4
    stride: int = 2
    init_color: tuple = (0.5, 0.5, 0.5)
    opt_steps: int = 30
    step_size: float = 8 / 255
    bw_constraint: bool = False
    epsilon_linf: float = 8 / 255
    targeted: bool = False
    universal_target: int = 1
    universal_steps: int = 200
    universal_batch: int = 32
    # "gradient" scores grid positions by input-gradient saliency and only
    # evaluates the top_candidates best; a cheap placement for training loops
    search: str = "exhaustive"
    top_candidates: int = 8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "init_color", tuple(float(c) for c in self.init_color))
        if self.attack not in ATTACK_IDS:
            raise AttackError(f"unknown attack id {self.attack!r}")
        if not 0.0 < self.coverage < 0.5:
            raise AttackError("coverage must be in (0, 0.5)")
        if self.m < 1 or self.stride < 1:
            raise AttackError("m and stride must be >= 1")
        if self.search not in SEARCH_MODES:
            raise AttackError(f"search must be one of {SEARCH_MODES}")


@dataclass(frozen=True)
class PatchPlacement:
    squares: tuple = ()  # ((row, col, side), ...)

    @property
    def area(self) -> int:
        return sum(s * s for _, _, s in self.squares)

    def mask(self, h: int, w: int, dtype=torch.float32) -> torch.Tensor:
        m = torch.zeros((1, h, w), dtype=dtype)
        for r, c, s in self.squares:
            m[:, r : r + s, c : c + s] = 1
        return m

    def in_bounds(self, h: int, w: int) -> bool:
        return all(r >= 0 and c >= 0 and r + s <= h and c + s <= w for r, c, s in self.squares)

    def disjoint(self) -> bool:
        sq = self.squares
        return not any(_overlap(sq[i], sq[j]) for i in range(len(sq)) for j in range(i + 1, len(sq)))


def _overlap(a, b) -> bool:
    return a[0] < b[0] + b[2] and b[0] < a[0] + a[2] and a[1] < b[1] + b[2] and b[1] < a[1] + a[2]


@dataclass
class AttackOutcome:
    """Batched result; index ``k`` of each field belongs to sample ``k``."""

    adv: torch.Tensor
    success: torch.Tensor
    loss_before: torch.Tensor
    loss_after: torch.Tensor
    placements: list | None = None
    mask: torch.Tensor | None = None  # (B, 1, H, W) for patch attacks
    extra: dict = field(default_factory=dict)

    def reapply(self, x_new: torch.Tensor, x_old: torch.Tensor) -> torch.Tensor:
        """Apply the same (fixed) perturbation to re-rendered inputs ``x_new``.

        Patch attacks replace the masked pixels with the adversarial ones;
        additive attacks add ``adv - x_old``. Gradients flow through ``x_new``.
        """
        adv = self.adv.detach().to(x_new.dtype)
        if self.mask is not None:
            m = self.mask.to(x_new.dtype)
            return x_new * (1 - m) + adv * m
        return (x_new + (adv - x_old.detach().to(x_new.dtype))).clamp(0, 1)

    def records(self, labels: torch.Tensor) -> list[dict]:
        out = []
        for k in range(len(self.success)):
            out.append(
                {
                    "label": int(labels[k]) + 1,
                    "success": bool(self.success[k]),
                    "loss_before": float(self.loss_before[k]),
                    "loss_after": float(self.loss_after[k]),
                    "placement": [list(s) for s in self.placements[k].squares] if self.placements else None,
                }
            )
        return out


@contextmanager
def eval_mode(model):
    was_training = model.training
    model.eval()
    try:
        yield model
    finally:
        model.train(was_training)


def _losses(model, x, y) -> torch.Tensor:
    return F.cross_entropy(model(x), y, reduction="none")


@torch.no_grad()
def predict(model, x: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    with eval_mode(model):
        return torch.cat([model(x[k : k + batch_size]).argmax(1) for k in range(0, len(x), batch_size)])


def patch_side(coverage: float, m: int, h: int, w: int) -> int:
    """Side of each of ``m`` equal squares jointly covering ``coverage`` of the image."""
    return max(1, int(math.floor(math.sqrt(coverage * h * w / m) + 0.5)))


def grid_positions(h: int, w: int, side: int, stride: int) -> list[tuple[int, int]]:
    """Row-major candidate top-left corners."""
    return [(r, c) for r in range(0, h - side + 1, stride) for c in range(0, w - side + 1, stride)]


def _candidate_masks(h, w, side, positions, dtype):
    m = torch.zeros((len(positions), 1, h, w), dtype=dtype)
    for k, (r, c) in enumerate(positions):
        m[k, :, r : r + side, c : c + side] = 1
    return m


@torch.no_grad()
def exhaustive_placement(model, x, y, m: int, side: int, stride: int, init_color=(0.5, 0.5, 0.5)) -> list:
    """Greedy sequential exhaustive search for ``m`` disjoint squares per sample.

    Square k is the grid position maximizing the loss with the k-1 already
    chosen squares and the candidate all filled with ``init_color``. Candidates
    overlapping chosen squares are excluded; ties go to the first position in
    row-major order.

    :return: one :class:`PatchPlacement` per sample
    """
    h, w = x.shape[-2:]
    if side > min(h, w):
        raise PlacementError(f"patch side {side} exceeds image size {h}x{w}")
    positions = grid_positions(h, w, side, stride)
    cand = _candidate_masks(h, w, side, positions, x.dtype)
    color = torch.tensor(init_color, dtype=x.dtype).reshape(1, 3, 1, 1)
    n_cand = len(positions)
    rows = torch.tensor([r for r, _ in positions])
    cols = torch.tensor([c for _, c in positions])
    per_chunk = max(1, MAX_FORWARD_BATCH // n_cand)
    chosen = [[] for _ in range(len(x))]
    current = x.clone()
    with eval_mode(model):
        for _ in range(m):
            for b0 in range(0, len(x), per_chunk):
                xb = current[b0 : b0 + per_chunk]
                yb = y[b0 : b0 + per_chunk]
                imgs = xb[:, None] * (1 - cand[None]) + color[None] * cand[None]
                losses = _losses(model, imgs.flatten(0, 1), yb.repeat_interleave(n_cand)).view(len(xb), n_cand)
                for j in range(len(xb)):
                    b = b0 + j
                    lj = losses[j].clone()
                    for r0, c0, s0 in chosen[b]:
                        lj[(rows < r0 + s0) & (rows + side > r0) & (cols < c0 + s0) & (cols + side > c0)] = -math.inf
                    if torch.isinf(lj).all():
                        raise PlacementError("grid has fewer non-overlapping candidates than requested patches")
                    best = int(torch.nonzero(lj == lj.max())[0])
                    r, c = positions[best]
                    chosen[b].append((r, c, side))
                    current[b, :, r : r + side, c : c + side] = color[0]
    return [PatchPlacement(tuple(s)) for s in chosen]


def gradient_placement(model, x, y, m: int, side: int, stride: int, init_color=(0.5, 0.5, 0.5),
                       top_candidates: int = 8) -> list:
    """Like :func:`exhaustive_placement`, but only the ``top_candidates`` grid
    positions with the largest summed input-gradient magnitude are evaluated."""
    h, w = x.shape[-2:]
    if side > min(h, w):
        raise PlacementError(f"patch side {side} exceeds image size {h}x{w}")
    positions = grid_positions(h, w, side, stride)
    rows = torch.tensor([r for r, _ in positions])
    cols = torch.tensor([c for _, c in positions])
    color = torch.tensor(init_color, dtype=x.dtype).reshape(1, 3, 1, 1)
    top = min(top_candidates, len(positions))
    chosen = [[] for _ in range(len(x))]
    current = x.clone()
    with eval_mode(model):
        for _ in range(m):
            xg = current.detach().requires_grad_(True)
            (grad,) = torch.autograd.grad(_losses(model, xg, y).sum(), xg)
            with torch.no_grad():
                sal = F.avg_pool2d(grad.abs().sum(1, keepdim=True), side, stride=stride).flatten(1)
                for b in range(len(x)):
                    for r0, c0, s0 in chosen[b]:
                        sal[b, (rows < r0 + s0) & (rows + side > r0) & (cols < c0 + s0) & (cols + side > c0)] = -math.inf
                if torch.isinf(sal).all(1).any():
                    raise PlacementError("grid has fewer non-overlapping candidates than requested patches")
                idx = sal.topk(top, dim=1).indices.sort(dim=1).values  # (B, top), row-major order
                valid = torch.gather(sal, 1, idx) > -math.inf
                masks = torch.zeros((len(x), top, 1, h, w), dtype=x.dtype)
                for b in range(len(x)):
                    for k in range(top):
                        r, c = positions[int(idx[b, k])]
                        masks[b, k, :, r : r + side, c : c + side] = 1
                imgs = current[:, None] * (1 - masks) + color[None] * masks
                losses = _losses(model, imgs.flatten(0, 1), y.repeat_interleave(top)).view(len(x), top)
                losses[~valid] = -math.inf
                for b in range(len(x)):
                    k = int(torch.nonzero(losses[b] == losses[b].max())[0])
                    r, c = positions[int(idx[b, k])]
                    chosen[b].append((r, c, side))
                    current[b, :, r : r + side, c : c + side] = color[0]
    return [PatchPlacement(tuple(s)) for s in chosen]


def place_patches(model, x, y, cfg: "AttackConfig", m: int, side: int) -> list:
    if cfg.search == "gradient":
        return gradient_placement(model, x, y, m, side, cfg.stride, cfg.init_color, cfg.top_candidates)
    return exhaustive_placement(model, x, y, m, side, cfg.stride, cfg.init_color)


def _optimize_patches(model, x, y, mask, init_color, steps, step_size, bw):
    color = torch.tensor(init_color, dtype=x.dtype).reshape(1, 3, 1, 1)
    fill = color.expand_as(x).clone()

    def project(p):
        return (p >= 0.5).to(p.dtype) if bw else p

    def compose(p):
        return x * (1 - mask) + project(p) * mask

    with eval_mode(model):
        with torch.no_grad():
            best_adv = compose(fill)
            best_loss = _losses(model, best_adv, y)
        loss_init = best_loss.clone()
        p = fill
        for _ in range(steps):
            p = p.detach().requires_grad_(True)
            loss = _losses(model, x * (1 - mask) + p * mask, y)
            (grad,) = torch.autograd.grad(loss.sum(), p)
            with torch.no_grad():
                p = (p + step_size * grad.sign() * mask).clamp(0, 1)
                cand = compose(p)
                cand_loss = _losses(model, cand, y)
                better = cand_loss > best_loss
                best_adv[better] = cand[better]
                best_loss = torch.where(better, cand_loss, best_loss)
        with torch.no_grad():
            pred = model(best_adv).argmax(1)
    return best_adv.detach(), pred != y, loss_init, best_loss


def rp4_attack(model, x, y, cfg: AttackConfig) -> AttackOutcome:
    """RP4_m: ``cfg.m`` squares placed by exhaustive search, then joint sign-gradient ascent.

    With ``bw_constraint`` every evaluated iterate is projected to {0, 1} per
    channel, so the returned patches are strictly black/white-valued.
    """
    h, w = x.shape[-2:]
    side = patch_side(cfg.coverage, cfg.m, h, w)
    placements = place_patches(model, x, y, cfg, cfg.m, side)
    mask = torch.stack([p.mask(h, w, x.dtype) for p in placements])
    adv, success, lb, la = _optimize_patches(model, x, y, mask, cfg.init_color, cfg.opt_steps, cfg.step_size,
                                             cfg.bw_constraint)
    return AttackOutcome(adv, success, lb, la, placements, mask)


def roa_attack(model, x, y, cfg: AttackConfig) -> AttackOutcome:
    """Rectangular occlusion attack: a single exhaustively placed, optimized square."""
    return rp4_attack(model, x, y, dataclasses.replace(cfg, m=1, bw_constraint=False))


def _snap_into_ball(adv, x, eps):
    # clip the deviation in float64, then step any rounding overshoot back toward x
    xd = x.double()
    adv = (xd + (adv.double() - xd).clamp(-eps, eps)).to(adv.dtype)
    while True:
        over = (adv.double() - xd).abs() > eps
        if not over.any():
            return adv
        adv = torch.where(over, torch.nextafter(adv, x), adv)


def pgd_linf(model, x, y, epsilon: float, steps: int, step_size: float) -> AttackOutcome:
    """Sign-gradient ascent projected onto the Linf ball of radius ``epsilon`` and [0, 1].

    Returns the highest-loss iterate among steps 1..``steps`` (the input
    itself when ``steps`` is 0), so one step with ``step_size == epsilon`` is
    exactly the fast gradient sign method.
    """
    with eval_mode(model):
        with torch.no_grad():
            loss_before = _losses(model, x, y)
        best_adv, best_loss = x.clone(), None
        adv = x.clone()
        for _ in range(steps):
            adv = adv.detach().requires_grad_(True)
            (grad,) = torch.autograd.grad(_losses(model, adv, y).sum(), adv)
            with torch.no_grad():
                adv = adv + step_size * grad.sign()
                adv = torch.min(torch.max(adv, x - epsilon), x + epsilon).clamp(0, 1)
                adv = _snap_into_ball(adv, x, epsilon)
                loss = _losses(model, adv, y)
                if best_loss is None:
                    best_adv, best_loss = adv.clone(), loss
                else:
                    better = loss > best_loss
                    best_adv[better] = adv[better]
                    best_loss = torch.where(better, loss, best_loss)
        with torch.no_grad():
            if best_loss is None:
                best_loss = loss_before.clone()
            pred = model(best_adv).argmax(1)
    return AttackOutcome(best_adv.detach(), pred != y, loss_before, best_loss, None, None)


@dataclass
class UniversalPatch:
    patch: torch.Tensor  # (3, side, side)
    target: int  # zero-based target label

    @property
    def side(self) -> int:
        return self.patch.shape[-1]

    def positions(self, n: int, h: int, w: int, generator: torch.Generator):
        rows = torch.randint(0, h - self.side + 1, (n,), generator=generator)
        cols = torch.randint(0, w - self.side + 1, (n,), generator=generator)
        return rows, cols

    def apply(self, x: torch.Tensor, generator: torch.Generator, patch: torch.Tensor | None = None):
        """Paste the patch at uniformly random positions; returns (adv, mask)."""
        patch = self.patch if patch is None else patch
        h, w = x.shape[-2:]
        s = self.side
        rows, cols = self.positions(len(x), h, w, generator)
        mask = torch.zeros((len(x), 1, h, w), dtype=x.dtype)
        canvas = torch.zeros_like(x)
        for k, (r, c) in enumerate(zip(rows.tolist(), cols.tolist())):
            mask[k, :, r : r + s, c : c + s] = 1
            canvas[k, :, r : r + s, c : c + s] = patch
        return x * (1 - mask) + canvas * mask, mask


def universal_patch(model, data: torch.Tensor, target_class: int, cfg: AttackConfig,
                    steps: int | None = None) -> UniversalPatch:
    """Fit one square patch that pushes random training images toward ``target_class``.

    :param data: (N, 3, H, W) images to draw batches from
    :param target_class: 1-based class id
    """
    if len(data) == 0:
        raise AttackError("universal patch needs a nonempty dataset")
    n_classes = None
    steps = cfg.universal_steps if steps is None else steps
    h, w = data.shape[-2:]
    side = patch_side(cfg.coverage, 1, h, w)
    color = torch.tensor(cfg.init_color, dtype=data.dtype).reshape(3, 1, 1)
    up = UniversalPatch(color.expand(3, side, side).clone(), target_class - 1)
    gen = torch.Generator().manual_seed(cfg.seed)
    with eval_mode(model):
        for _ in range(steps):
            idx = torch.randint(0, len(data), (min(cfg.universal_batch, len(data)),), generator=gen)
            p = up.patch.detach().requires_grad_(True)
            adv, _ = up.apply(data[idx], gen, p)
            logits = model(adv)
            if n_classes is None:
                n_classes = logits.shape[1]
                if not 0 <= up.target < n_classes:
                    raise AttackError(f"target class {target_class} outside [1, {n_classes}]")
            loss = F.cross_entropy(logits, torch.full((len(idx),), up.target, dtype=torch.long))
            (grad,) = torch.autograd.grad(loss, p)
            with torch.no_grad():
                up.patch = (p - cfg.step_size * grad.sign()).clamp(0, 1)
    return up


def apply_universal(model, up: UniversalPatch, x, y, seed: int = 0) -> AttackOutcome:
    gen = torch.Generator().manual_seed(seed)
    with eval_mode(model), torch.no_grad():
        loss_before = _losses(model, x, y)
        adv, mask = up.apply(x, gen)
        logits = model(adv)
        loss_after = F.cross_entropy(logits, y, reduction="none")
        pred = logits.argmax(1)
    return AttackOutcome(adv, pred != y, loss_before, loss_after, None, mask,
                         {"targeted_success": pred == up.target})


class Attack:
    """A configured attack bound to a model: ``attack(x, y) -> AttackOutcome``."""

    def __init__(self, model, cfg: AttackConfig, train_images: torch.Tensor | None = None):
        if cfg.attack == "dorpatch":
            raise UnimplementedAttackError("dorpatch: not implemented (external method)")
        self.model = model
        self.cfg = cfg
        self.universal = None
        if cfg.attack == "universal":
            if train_images is None:
                raise AttackError("universal attack needs training images to fit the patch")
            self.universal = universal_patch(model, train_images, cfg.universal_target, cfg)
        self._calls = 0

    def __call__(self, x, y) -> AttackOutcome:
        cfg = self.cfg
        if cfg.attack == "rp4":
            return rp4_attack(self.model, x, y, cfg)
        if cfg.attack == "roa":
            return roa_attack(self.model, x, y, cfg)
        if cfg.attack == "pgd":
            return pgd_linf(self.model, x, y, cfg.epsilon_linf, cfg.opt_steps, cfg.step_size)
        self._calls += 1
        return apply_universal(self.model, self.universal, x, y, seed=cfg.seed * 7919 + self._calls)


def make_attack(model, cfg: AttackConfig, train_images=None) -> Attack:
    return Attack(model, cfg, train_images)


def registered_attacks() -> dict:
    return {
        "roa": "rectangular occlusion attack (exhaustive placement, m=1)",
        "rp4": "RP4_m: m exhaustively placed squares, jointly optimized colors",
        "universal": "position- and input-agnostic targeted patch",
        "pgd": "PGD with Linf-bounded perturbations",
        "dorpatch": "unimplemented (external method)",
    }
