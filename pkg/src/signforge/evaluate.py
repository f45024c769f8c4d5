"""Benign and robust accuracy, attack sweeps, k-sweeps and transfer tables.

Robust accuracy here is accuracy under attack over *all* evaluated samples:
a sample that is already misclassified without an attack counts as an attack
success. Set ``count_benign_errors=False`` to score only the attack outcome.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from signforge.attacks import AttackConfig, make_attack, predict
from signforge.model.train import TrainConfig, config_hash, doa_from_scratch

log = logging.getLogger(__name__)


class EvalError(ValueError):
    pass


def model_hash(model) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


@dataclass
class EvalReport:
    benign_accuracy: float
    robust_accuracy: float
    per_class: dict
    attack_hash: str
    model_hash: str
    n_samples: int
    wall_time: float
    attack: str = ""
    sample_indices: list = field(default_factory=list)
    outcomes: list = field(default_factory=list)

    def to_json(self, with_outcomes: bool = False) -> dict:
        d = dataclasses.asdict(self)
        if not with_outcomes:
            d.pop("outcomes")
            d.pop("sample_indices")
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return d

    def save(self, path, with_outcomes: bool = True) -> None:
        Path(path).write_text(json.dumps(self.to_json(with_outcomes), indent=2, sort_keys=True))


def select_samples(n_total: int, sample_cap: int | None, seed: int = 0) -> np.ndarray:
    """Seeded subset of ``sample_cap`` positions out of ``n_total`` (sorted), or all."""
    if sample_cap is None or sample_cap == n_total:
        return np.arange(n_total)
    if sample_cap > n_total:
        raise EvalError(f"sample_cap {sample_cap} exceeds split size {n_total}")
    if sample_cap < 1:
        raise EvalError("sample_cap must be >= 1")
    return np.sort(np.random.default_rng([seed, 0xE7A1]).choice(n_total, sample_cap, replace=False))


def robust_accuracy(model, x: torch.Tensor, y: torch.Tensor, attack_cfg: AttackConfig,
                    sample_cap: int | None = 200, seed: int = 0, train_images: torch.Tensor | None = None,
                    count_benign_errors: bool = True, batch_size: int = 100) -> EvalReport:
    """Attack every selected sample and report benign and robust accuracy.

    :param x, y: the evaluation split (images, zero-based labels)
    :param sample_cap: number of samples drawn (seeded) from the split; None = all
    :param train_images: needed only to fit a universal patch
    """
    if len(x) == 0:
        raise EvalError("empty split")
    t0 = time.perf_counter()
    attack = make_attack(model, attack_cfg, train_images)  # raises for unimplemented attacks
    sel = select_samples(len(x), sample_cap, seed)
    xs, ys = x[sel], y[sel]
    benign_ok = predict(model, xs) == ys
    robust_ok, outcomes = [], []
    for k in range(0, len(xs), batch_size):
        out = attack(xs[k : k + batch_size], ys[k : k + batch_size])
        ok = ~out.success
        if count_benign_errors:
            ok = ok & benign_ok[k : k + batch_size]
        robust_ok.append(ok)
        outcomes.extend(out.records(ys[k : k + batch_size]))
    robust_ok = torch.cat(robust_ok)
    per_class = {}
    for c in range(model.n_classes):
        sel_c = ys == c
        nc = int(sel_c.sum())
        per_class[c + 1] = {
            "n": nc,
            "benign": float(benign_ok[sel_c].float().mean()) if nc else float("nan"),
            "robust": float(robust_ok[sel_c].float().mean()) if nc else float("nan"),
        }
    return EvalReport(
        benign_accuracy=float(benign_ok.float().mean()),
        robust_accuracy=float(robust_ok.float().mean()),
        per_class=per_class,
        attack_hash=config_hash(attack_cfg),
        model_hash=model_hash(model),
        n_samples=len(xs),
        wall_time=time.perf_counter() - t0,
        attack=attack_cfg.attack,
        sample_indices=[int(i) for i in sel],
        outcomes=outcomes,
    )


# -- tables and plots ----------------------------------------------------------------


def write_csv(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        raise EvalError("no rows to write")
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def plot_csv(csv_path, png_path, x: str, y: str, group: str, xlabel: str | None = None,
             ylabel: str | None = None) -> None:
    """Line plot of ``y`` vs ``x``, one line per ``group`` value; a pure function of the CSV."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_csv(csv_path)
    groups = sorted({r[group] for r in rows})
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for g in groups:
        pts = sorted((float(r[x]), float(r[y])) for r in rows if r[group] == g)
        ax.plot([p[0] for p in pts], [100 * p[1] for p in pts], marker="o", label=g)
    ax.set_xlabel(xlabel or x)
    ax.set_ylabel(ylabel or f"{y} (%)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def attack_sweep(model, x, y, attacks, coverages, sample_cap: int | None = 200, seed: int = 0,
                 train_images=None, out_dir=None) -> list[dict]:
    """Robust accuracy per (attack, coverage). Writes sweep.csv and sweep.png when ``out_dir`` is set.

    :param attacks: attack ids or AttackConfigs (the coverage field is overridden)
    """
    coverages = [float(c) for c in coverages]
    if coverages != sorted(coverages):
        raise EvalError("coverages must be sorted ascending")
    rows = []
    for a in attacks:
        base = a if isinstance(a, AttackConfig) else AttackConfig(attack=a, m=1 if a == "roa" else 4)
        label = base.attack if base.attack != "rp4" else f"rp4_{base.m}"
        for cov in coverages:
            cfg = dataclasses.replace(base, coverage=cov)
            rep = robust_accuracy(model, x, y, cfg, sample_cap, seed, train_images)
            rows.append({"attack": label, "coverage": cov, "robust_accuracy": rep.robust_accuracy,
                         "benign_accuracy": rep.benign_accuracy, "n_samples": rep.n_samples})
            log.info("sweep %s cov=%.3f robust=%.3f", label, cov, rep.robust_accuracy)
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_csv(rows, out_dir / "sweep.csv")
        plot_csv(out_dir / "sweep.csv", out_dir / "sweep.png", "coverage", "robust_accuracy", "attack",
                 "patch coverage", "robust accuracy (%)")
    return rows


def sweep_optimized_classes(results: dict, n: int, inits=("static_gray", "random"), out_dir=None) -> list[dict]:
    """Benign and robust accuracy vs the number k of optimized classes.

    :param results: {(init, k): EvalReport or (benign, robust)}; k=0 may be keyed by
        either init or by (None, 0) since it is the plain-DOA baseline for both
    """
    rows = []
    for init in inits:
        for k in range(n + 1):
            rep = results.get((init, k))
            if rep is None and k == 0:
                rep = results.get((None, 0))
            if rep is None:
                raise EvalError(f"missing result for init={init} k={k}")
            benign, robust = (rep.benign_accuracy, rep.robust_accuracy) if isinstance(rep, EvalReport) else rep
            rows.append({"init": init, "k": k, "benign_accuracy": float(benign), "robust_accuracy": float(robust)})
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_csv(rows, out_dir / "k_sweep.csv")
        plot_csv(out_dir / "k_sweep.csv", out_dir / "k_sweep.png", "k", "robust_accuracy", "init",
                 "optimized classes k", "robust accuracy (%)")
    return rows


def transfer_eval(optimized_dataset, original_dataset, architectures, train_cfg: TrainConfig,
                  attack_cfg: AttackConfig, sample_cap: int | None = 200, seed: int = 0, out_dir=None,
                  models: dict | None = None) -> list[dict]:
    """DOA-train each architecture from scratch on both standards and compare.

    :param optimized_dataset, original_dataset: SignDatasets over the same manifest
    :param models: optional dict filled with the trained models, keyed (arch, standard)
    """
    rows = []
    for arch in architectures:
        for label, ds in (("original", original_dataset), ("optimized", optimized_dataset)):
            xtr, ytr = ds.tensors("train")
            xte, yte = ds.tensors("test")
            model = doa_from_scratch((xtr, ytr), train_cfg, ds.standard.n, ds.image_size, seed, arch)
            rep = robust_accuracy(model, xte, yte, attack_cfg, sample_cap, seed)
            if models is not None:
                models[(arch, label)] = model
            rows.append({"arch": arch, "standard": label, "benign_accuracy": rep.benign_accuracy,
                         "robust_accuracy": rep.robust_accuracy, "n_samples": rep.n_samples})
            log.info("transfer %s %s benign=%.3f robust=%.3f", arch, label, rep.benign_accuracy,
                     rep.robust_accuracy)
    if out_dir is not None:
        write_csv(rows, Path(out_dir) / "transfer.csv")
    return rows


@dataclass
class ExperimentMatrix:
    """Cells of (standard variant, training mode, architecture, attack) with result slots."""

    cells: list = field(default_factory=list)

    @classmethod
    def grid(cls, standards, modes, archs, attacks) -> "ExperimentMatrix":
        cells = [
            {"standard": s, "mode": m, "arch": a, "attack": k, "result": None, "provenance": None}
            for s in standards for m in modes for a in archs for k in attacks
        ]
        return cls(cells)

    def __len__(self):
        return len(self.cells)

    def fill(self, fn) -> "ExperimentMatrix":
        """``fn(cell) -> (EvalReport, provenance dict)`` for every empty cell."""
        for cell in self.cells:
            if cell["result"] is None:
                rep, prov = fn(cell)
                cell["result"] = {"benign_accuracy": rep.benign_accuracy, "robust_accuracy": rep.robust_accuracy,
                                  "n_samples": rep.n_samples, "attack_hash": rep.attack_hash,
                                  "model_hash": rep.model_hash}
                cell["provenance"] = prov
        return self

    def rows(self) -> list[dict]:
        out = []
        for c in self.cells:
            r = c["result"] or {}
            out.append({"standard": c["standard"], "mode": c["mode"], "arch": c["arch"], "attack": c["attack"],
                        "benign_accuracy": r.get("benign_accuracy"), "robust_accuracy": r.get("robust_accuracy"),
                        "provenance": json.dumps(c["provenance"], sort_keys=True)})
        return out

    def to_csv(self, path) -> None:
        missing = [c for c in self.cells if c["result"] is None]
        if missing:
            raise EvalError(f"{len(missing)} matrix cells have no result")
        write_csv(self.rows(), path)
