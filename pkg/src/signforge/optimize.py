"""Joint optimization of a standard and a classifier.

Pictograms are discrete, so they are chosen greedily class by class from a
candidate pool by the robust accuracy of adversarially trained models. Colors
are continuous: adversarial training runs in fractional-epoch slices, and
between slices one class's color takes a signed-gradient step that lowers the
loss of the current model on adversarial examples of that class.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from signforge.attacks import AttackConfig, AttackError, make_attack
from signforge.evaluate import EvalReport, robust_accuracy
from signforge.model.nets import build_model
from signforge.model.train import (
    AdversarialTrainer,
    RenderSource,
    TrainConfig,
    config_hash,
    doa_from_scratch,
    train_standard,
)
from signforge.standard import PictogramPool, StandardError, TrafficSignStandard, set_pictogram
from signforge.synth.dataset import SignDataset, SynthConfig, instantiate

log = logging.getLogger(__name__)

CLASS_ORDERS = ("random", "worst_first")
COLOR_INITS = ("static_gray", "random")
GRAY = (0.5, 0.5, 0.5)
# binary RGB colors except white
EDGE_COLORS = tuple((r, g, b) for r in (0.0, 1.0) for g in (0.0, 1.0) for b in (0.0, 1.0) if (r, g, b) != (1, 1, 1))


class OptimizeError(ValueError):
    pass


@dataclass(frozen=True)
class PictogramSearchConfig:
    runs_per_candidate: int = 5
    class_order: str = "random"
    eval_attack: AttackConfig = AttackConfig(attack="rp4", m=4, coverage=0.05)
    eval_split: str = "val"
    eval_cap: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.runs_per_candidate < 1:
            raise OptimizeError("runs_per_candidate must be >= 1")
        if self.class_order not in CLASS_ORDERS:
            raise OptimizeError(f"class_order must be one of {CLASS_ORDERS}")


@dataclass(frozen=True)
class ColorOptConfig:
    T: int = 400
    epoch_fraction: float = 0.25
    alpha: float = 0.01
    init: str = "static_gray"
    restarts: int = 10
    attack_batch: int = 64  # class-i samples attacked per color step
    select_split: str = "val"
    select_cap: int | None = None
    eval_every: int = 0  # 0 disables periodic accuracy records
    seed: int = 0

    def __post_init__(self):
        if self.T < 1 or self.restarts < 1:
            raise OptimizeError("T and restarts must be >= 1")
        if self.alpha <= 0:
            raise OptimizeError("alpha must be > 0")
        if not 0.0 < self.epoch_fraction <= 1.0:
            raise OptimizeError("epoch_fraction must be in (0, 1]")
        if self.init not in COLOR_INITS:
            raise OptimizeError(f"init must be one of {COLOR_INITS}")


# -- small pure pieces -----------------------------------------------------------------


def class_for_iteration(t: int, classes) -> int:
    """Class updated at iteration t (1-based): t mod n, with residue 0 meaning the last class."""
    classes = list(classes)
    r = t % len(classes)
    return classes[r - 1] if r else classes[-1]


def visit_counts(T: int, n: int) -> dict:
    counts = {c: 0 for c in range(1, n + 1)}
    for t in range(1, T + 1):
        counts[class_for_iteration(t, range(1, n + 1))] += 1
    return counts


def sign_step(color, grad, alpha: float) -> np.ndarray:
    """clip(color - alpha * sign(grad), 0, 1) with sign(0) = 0."""
    return np.clip(np.asarray(color, dtype=np.float64) - alpha * np.sign(np.asarray(grad, dtype=np.float64)), 0.0, 1.0)


def initial_colors(n: int, init: str, rng: np.random.Generator) -> np.ndarray:
    if init == "static_gray":
        return np.tile(np.array(GRAY), (n, 1))
    if init == "random":
        return rng.uniform(0.0, 1.0, size=(n, 3))
    raise OptimizeError(f"unknown init {init!r}")


def baseline_colors(standard: TrafficSignStandard, mode: str, seed: int = 0) -> TrafficSignStandard:
    """Random colors, or a seeded permutation of the edge colors (one per class)."""
    rng = np.random.default_rng([seed, 0xC0])
    if mode == "random":
        return standard.with_colors(rng.uniform(0.0, 1.0, size=(standard.n, 3)))
    if mode == "edge":
        if standard.n > len(EDGE_COLORS):
            raise OptimizeError(f"edge mode has {len(EDGE_COLORS)} colors for {standard.n} classes")
        perm = rng.permutation(len(EDGE_COLORS))[: standard.n]
        return standard.with_colors(np.array([EDGE_COLORS[p] for p in perm]))
    raise OptimizeError(f"unknown baseline mode {mode!r}")


# -- traces --------------------------------------------------------------------------


class TraceWriter:
    """Append-only JSON-lines trace; also kept in memory."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_trace(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# -- greedy pictogram search -----------------------------------------------------------


class DoaEvaluator:
    """Robust accuracy of a DOA model trained from scratch on I(S).

    Called as ``evaluator(standard, seed) -> float``; ``per_class`` returns the
    per-class robust accuracies used by the worst-first class order.
    """

    def __init__(self, scenes, synth_cfg: SynthConfig, train_cfg: TrainConfig, attack_cfg: AttackConfig,
                 split: str = "val", cap: int | None = None, arch: str | None = None):
        self.scenes = scenes
        self.synth_cfg = synth_cfg
        self.train_cfg = train_cfg
        self.attack_cfg = attack_cfg
        self.split = split
        self.cap = cap
        self.arch = arch
        self._manifest = None

    def report(self, standard, seed: int) -> EvalReport:
        if self._manifest is None:
            self._manifest = instantiate(standard, self.scenes, self.synth_cfg)
        ds = SignDataset(standard, self.scenes, self._manifest)
        model = doa_from_scratch(ds.tensors("train"), self.train_cfg, standard.n, ds.image_size, seed, self.arch)
        x, y = ds.tensors(self.split)
        return robust_accuracy(model, x, y, self.attack_cfg, self.cap, seed)

    def __call__(self, standard, seed: int) -> float:
        return self.report(standard, seed).robust_accuracy

    def per_class(self, standard, seed: int) -> dict:
        return {c: v["robust"] for c, v in self.report(standard, seed).per_class.items()}


def class_order(classes, cfg: PictogramSearchConfig, scores: dict | None = None) -> list:
    classes = list(classes)
    if cfg.class_order == "random":
        rng = np.random.default_rng([cfg.seed, 0x0D])
        return [classes[j] for j in rng.permutation(len(classes))]
    if scores is None:
        raise OptimizeError("worst_first order needs per-class scores")
    return sorted(classes, key=lambda c: (scores.get(c, 0.0), c))


def run_seed(base: int, class_id: int, candidate: int, run: int) -> int:
    return int(np.random.SeedSequence([base, class_id, candidate, run]).generate_state(1)[0])


def greedy_pictogram_search(standard: TrafficSignStandard, pool: PictogramPool, evaluator,
                            cfg: PictogramSearchConfig, classes=None, trace: TraceWriter | None = None):
    """Fix each class's pictogram to the candidate with the best mean score.

    :param evaluator: ``evaluator(standard, seed) -> float`` (robust accuracy),
        typically a :class:`DoaEvaluator`; any callable works, e.g. a mock oracle
    :param classes: class ids to optimize (default all), visited in ``cfg.class_order``
    :return: (standard, trace records)
    """
    classes = list(range(1, standard.n + 1)) if classes is None else list(classes)
    for c in classes:
        if c not in pool:
            raise StandardError(f"pool is missing class {c}")
    trace = trace or TraceWriter()
    scores = None
    if cfg.class_order == "worst_first":
        if not hasattr(evaluator, "per_class"):
            raise OptimizeError("worst_first order needs an evaluator with per_class()")
        scores = evaluator.per_class(standard, cfg.seed)
    order = class_order(classes, cfg, scores)
    for c in order:
        means = []
        for j in range(1, pool.size(c) + 1):
            cand = set_pictogram(standard, c, j, pool)
            accs = []
            for r in range(cfg.runs_per_candidate):
                seed = run_seed(cfg.seed, c, j, r)
                t0 = time.perf_counter()
                acc = float(evaluator(cand, seed))
                accs.append(acc)
                trace.write({"kind": "search_run", "class": c, "candidate": j, "run": r, "seed": seed,
                             "robust_accuracy": acc, "seconds": round(time.perf_counter() - t0, 3)})
            means.append(float(np.mean(accs)))
        best = int(np.argmax(means)) + 1  # first maximum = lowest candidate index
        standard = set_pictogram(standard, c, best, pool)
        trace.write({"kind": "search_choice", "class": c, "chosen": best, "means": means})
        log.info("class %d: candidate %d (means %s)", c, best, np.round(means, 3).tolist())
    return standard, trace.records


# -- color optimization ----------------------------------------------------------------


@dataclass
class ColorRun:
    restart: int
    seed: int
    standard: TrafficSignStandard
    model: object
    report: EvalReport
    records: list = field(default_factory=list)


def _color_step_grad(model, dataset: SignDataset, colors: np.ndarray, idx, class_id: int, attack_cfg):
    """Average gradient of the adversarial loss of class ``class_id`` w.r.t. its color.

    The adversarial perturbation is computed on the detached rendering and then
    held fixed while differentiating the re-rendered images.
    """
    c = torch.tensor(colors, dtype=torch.float32, requires_grad=True)
    x = dataset.render(idx, colors=c)
    y = dataset.labels(idx)
    x0 = x.detach()
    outcome = make_attack(model, attack_cfg)(x0, y)
    x_adv = outcome.reapply(x, x0)
    model.eval()
    loss = F.cross_entropy(model(x_adv), y)
    (g,) = torch.autograd.grad(loss, c)
    return g[class_id - 1].double().numpy(), loss.item(), outcome.success.float().mean().item()


def color_optimize(standard: TrafficSignStandard, dataset: SignDataset, color_cfg: ColorOptConfig,
                   train_cfg: TrainConfig, attack_cfg: AttackConfig, eval_attack: AttackConfig | None = None,
                   classes=None, trace: TraceWriter | None = None, restart_ids=None):
    """Sign-gradient color optimization interleaved with sliced adversarial training.

    Every restart builds a fresh model, trains phase 1 on I(S_init), then runs
    T iterations of: train_fraction; attack class-i samples; color step. The
    restart whose final model scores the highest robust accuracy on
    ``select_split`` is returned (ties: lowest restart index).

    :param dataset: a :class:`SignDataset` whose manifest fixes the samples
    :param classes: class ids whose colors are optimized (default all); the
        others keep the colors of ``standard``
    :return: (standard, model, best restart index, list of :class:`ColorRun`)
    """
    n = standard.n
    classes = list(range(1, n + 1)) if classes is None else list(classes)
    if not classes:
        raise OptimizeError("no classes to optimize")
    eval_attack = eval_attack or attack_cfg
    trace = trace or TraceWriter()
    train_idx = dataset.split("train")
    train_labels = dataset.labels(train_idx).numpy() + 1
    runs = []
    for r in restart_ids if restart_ids is not None else range(color_cfg.restarts):
        seed = int(np.random.SeedSequence([color_cfg.seed, r]).generate_state(1)[0] % (2**31))
        rng = np.random.default_rng(seed)
        colors = standard.colors()
        colors[[c - 1 for c in classes]] = initial_colors(len(classes), color_cfg.init, rng)
        cur = standard.with_colors(colors)
        tcfg = dataclasses.replace(train_cfg, seed=seed)
        model = build_model(tcfg.arch, n, dataset.image_size, seed)
        ds = dataset.with_standard(cur)
        with torch.no_grad():
            x_tr = ds.render(train_idx)
        train_standard(model, (x_tr, ds.labels(train_idx)), tcfg)
        trainer = AdversarialTrainer(model, tcfg, len(train_idx),
                                     total_epochs=color_cfg.T * color_cfg.epoch_fraction)
        trace.write({"kind": "restart_start", "restart": r, "seed": seed, "colors": colors.tolist()})
        for t in range(1, color_cfg.T + 1):
            i = class_for_iteration(t, classes)
            ds = dataset.with_standard(cur)
            losses = trainer.train_fraction(RenderSource(ds, train_idx), color_cfg.epoch_fraction)
            pool = train_idx[train_labels == i]
            rec = {"kind": "iteration", "restart": r, "t": t, "class": i, "batch_losses": losses,
                   "prev_color": colors[i - 1].tolist()}
            if len(pool) == 0:
                rec.update(skipped=True, reason="no class samples", grad=None, colors=colors.tolist())
                trace.write(rec)
                continue
            pick = rng.choice(len(pool), min(color_cfg.attack_batch, len(pool)), replace=False)
            try:
                g, adv_loss, success = _color_step_grad(model, ds, colors, pool[np.sort(pick)], i, attack_cfg)
            except AttackError as exc:
                rec.update(skipped=True, reason=str(exc), grad=None, colors=colors.tolist())
                trace.write(rec)
                log.warning("restart %d t=%d: attack failed, skipping (%s)", r, t, exc)
                continue
            colors = colors.copy()
            colors[i - 1] = sign_step(colors[i - 1], g, color_cfg.alpha)
            cur = standard.with_colors(colors)
            rec.update(skipped=False, grad=g.tolist(), adv_loss=adv_loss, attack_success=success,
                       colors=colors.tolist())
            if color_cfg.eval_every and t % color_cfg.eval_every == 0:
                x, y = ds.with_standard(cur).tensors(color_cfg.select_split)
                rep = robust_accuracy(model, x, y, eval_attack, color_cfg.select_cap, seed)
                rec.update(benign_accuracy=rep.benign_accuracy, robust_accuracy=rep.robust_accuracy)
            trace.write(rec)
        x, y = dataset.with_standard(cur).tensors(color_cfg.select_split)
        rep = robust_accuracy(model, x, y, eval_attack, color_cfg.select_cap, color_cfg.seed)
        trace.write({"kind": "restart_end", "restart": r, "seed": seed, "colors": colors.tolist(),
                     "benign_accuracy": rep.benign_accuracy, "robust_accuracy": rep.robust_accuracy})
        log.info("restart %d: robust %.3f benign %.3f colors %s", r, rep.robust_accuracy, rep.benign_accuracy,
                 np.round(colors, 3).tolist())
        runs.append(ColorRun(r, seed, cur, model, rep))
    best = select_restart([run.report.robust_accuracy for run in runs])
    trace.write({"kind": "selection", "chosen": runs[best].restart,
                 "robust_accuracies": [run.report.robust_accuracy for run in runs]})
    return runs[best].standard, runs[best].model, runs[best].restart, runs


def select_restart(scores) -> int:
    """Index of the highest score; ties go to the lowest index."""
    if len(scores) == 0:
        raise OptimizeError("no restarts to select from")
    return int(np.argmax(np.asarray(scores, dtype=np.float64)))


# -- full pipeline -----------------------------------------------------------------------


@dataclass
class OptimizationResult:
    standard: TrafficSignStandard
    model: object
    k: int
    search_records: list
    color_records: list
    chosen_restart: int | None
    runs: list = field(default_factory=list)


def optimize_standard(standard: TrafficSignStandard, pool: PictogramPool, scenes, synth_cfg: SynthConfig,
                      search_cfg: PictogramSearchConfig, color_cfg: ColorOptConfig, train_cfg: TrainConfig,
                      attack_cfg: AttackConfig, k: int | None = None, search_train_cfg: TrainConfig | None = None,
                      evaluator=None, out_dir=None) -> OptimizationResult:
    """Greedy pictograms, then colors, for the first ``k`` classes (default all).

    k=0 leaves the standard untouched and returns a plain DOA model trained on it.

    :param search_train_cfg: training config for the candidate evaluations
        (defaults to ``train_cfg``)
    :param attack_cfg: the attack generating class-i adversarial examples
        during color optimization
    """
    n = standard.n
    k = n if k is None else k
    if not 0 <= k <= n:
        raise OptimizeError(f"k must be in [0, {n}]")
    out_dir = Path(out_dir) if out_dir else None
    manifest = instantiate(standard, scenes, synth_cfg)
    if k == 0:
        ds = SignDataset(standard, scenes, manifest)
        model = doa_from_scratch(ds.tensors("train"), train_cfg, n, ds.image_size)
        return OptimizationResult(standard, model, 0, [], [], None)
    classes = list(range(1, k + 1))
    if evaluator is None:
        evaluator = DoaEvaluator(scenes, synth_cfg, search_train_cfg or train_cfg, search_cfg.eval_attack,
                                 search_cfg.eval_split, search_cfg.eval_cap)
    search_trace = TraceWriter(out_dir / "search_trace.jsonl" if out_dir else None)
    standard, _ = greedy_pictogram_search(standard, pool, evaluator, search_cfg, classes, search_trace)
    color_trace = TraceWriter(out_dir / "trace.jsonl" if out_dir else None)
    ds = SignDataset(standard, scenes, manifest)
    best_std, model, chosen, runs = color_optimize(standard, ds, color_cfg, train_cfg, attack_cfg,
                                                   search_cfg.eval_attack, classes, color_trace)
    return OptimizationResult(best_std, model, k, search_trace.records, color_trace.records, chosen, runs)


def config_summary(**cfgs) -> dict:
    return {name: {"hash": config_hash(c), **dataclasses.asdict(c)} for name, c in cfgs.items()}
