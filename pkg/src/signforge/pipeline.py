"""The end-to-end experiment as a chain of hashed, resumable stages.

Each stage writes its artifacts plus a ``stage.json`` record holding the stage
hash (its config sections and the hashes of the stages it reads from) and a
checksum of every output file. A stage whose record matches is skipped, so an
interrupted run resumes where it stopped and a completed run does no work.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from pathlib import Path

from signforge import __version__
from signforge.attacks import AttackConfig
from signforge.config import RunConfig, build_run_config
from signforge.evaluate import attack_sweep, robust_accuracy, sweep_optimized_classes, transfer_eval, write_csv
from signforge.model.train import config_hash, doa_from_scratch, load_checkpoint, save_checkpoint
from signforge.optimize import DoaEvaluator, TraceWriter, color_optimize, greedy_pictogram_search, optimize_standard
from signforge.standard import default_pool, default_standard, load_pool, load_standard, save_pool, save_standard
from signforge.synth.dataset import DatasetManifest, SignDataset, instantiate
from signforge.synth.scenes import generate_scenes, load_scenes, save_scenes

log = logging.getLogger(__name__)

_EVAL = ("attack", "eval")
_OPT = ("train", "search_train", "search_attack", "color_attack", "search", "color")
# (stage, config sections it depends on, upstream stages)
STAGE_SPECS = (
    ("scenes", ("synth",), ()),
    ("instantiate", ("synth", "n_classes", "pool_size"), ("scenes",)),
    ("baseline", ("train",) + _EVAL, ("instantiate",)),
    ("optimize", _OPT + _EVAL, ("instantiate",)),
    ("instantiate_optimized", ("synth",), ("optimize", "scenes")),
    ("scratch", ("train",) + _EVAL, ("instantiate_optimized",)),
    ("evaluate", _OPT + _EVAL, ("baseline", "scratch", "instantiate", "instantiate_optimized")),
    ("summary", (), ("baseline", "optimize", "scratch", "evaluate")),
)
STAGES = tuple(s[0] for s in STAGE_SPECS)


class StageError(RuntimeError):
    def __init__(self, stage: str, config_hash: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed (config {config_hash}): {cause}")
        self.stage = stage
        self.config_hash = config_hash
        self.cause = cause


class StopRequested(Exception):
    """Raised after ``stop_after`` completes; simulates an interrupted run."""


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dump_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _files(root: Path) -> list[Path]:
    return sorted(p for p in root.rglob("*") if p.is_file() and p.name != "stage.json")


class Pipeline:
    def __init__(self, cfg: RunConfig, out_dir, stop_after: str | None = None):
        if stop_after is not None and stop_after not in STAGES:
            raise ValueError(f"unknown stage {stop_after!r}")
        self.cfg = cfg
        self.root = Path(out_dir)
        self.stop_after = stop_after
        self.hashes: dict = {}
        self.executed: list[str] = []
        self.skipped: list[str] = []

    # -- stage bookkeeping ------------------------------------------------------------

    def stage_dir(self, name: str) -> Path:
        return self.root / name

    def stage_hash(self, name: str, sections, upstream) -> str:
        return stage_hash(self.cfg, name, sections, {u: self.hashes[u] for u in upstream})

    def is_complete(self, name: str, h: str) -> bool:
        rec_path = self.stage_dir(name) / "stage.json"
        if not rec_path.exists():
            return False
        rec = json.loads(rec_path.read_text())
        if rec.get("hash") != h:
            return False
        d = self.stage_dir(name)
        return all((d / f).exists() and file_digest(d / f) == digest for f, digest in rec["outputs"].items())

    def run_stage(self, name: str, fn) -> None:
        _, sections, upstream = next(spec for spec in STAGE_SPECS if spec[0] == name)
        h = self.stage_hash(name, sections, upstream)
        self.hashes[name] = h
        d = self.stage_dir(name)
        if self.is_complete(name, h):
            log.info("stage %s: up to date (%s), skipped", name, h)
            self.skipped.append(name)
        else:
            log.info("stage %s: running (%s)", name, h)
            d.mkdir(parents=True, exist_ok=True)
            t0 = time.perf_counter()
            try:
                fn(d)
            except Exception as e:  # noqa: BLE001 - re-raised with stage context
                raise StageError(name, self.cfg.hash(), e) from e
            outputs = {str(p.relative_to(d)): file_digest(p) for p in _files(d)}
            dump_json({"stage": name, "hash": h, "config_hash": self.cfg.hash(),
                       "upstream": {u: self.hashes[u] for u in upstream}, "outputs": outputs}, d / "stage.json")
            self.executed.append(name)
            with (self.root / "run_log.jsonl").open("a") as fh:
                fh.write(json.dumps({"stage": name, "hash": h, "seconds": round(time.perf_counter() - t0, 2),
                                     "finished": time.strftime("%Y-%m-%dT%H:%M:%S")}) + "\n")
        if self.stop_after == name:
            raise StopRequested(name)

    # -- helpers ----------------------------------------------------------------------

    def _scenes(self):
        return load_scenes(self.stage_dir("scenes") / "scenes.npz")

    def _dataset(self, stage: str, standard_stage: str | None = None):
        d = self.stage_dir(stage)
        std = load_standard(self.stage_dir(standard_stage or stage) / "standard" / "standard.json")
        return SignDataset(std, self._scenes(), DatasetManifest.load(d / "manifest.json"))

    def _report(self, model, ds, d: Path, name: str = "report.json"):
        c = self.cfg
        x, y = ds.tensors(c.eval.split)
        cap = min(c.eval.sample_cap, len(x)) if c.eval.sample_cap else None
        rep = robust_accuracy(model, x, y, c.attack, cap, c.master_seed)
        doc = rep.to_json()
        doc.pop("wall_time")
        doc["config_hash"] = c.hash()
        dump_json(doc, d / name)
        return rep

    # -- stages -----------------------------------------------------------------------

    def run(self) -> dict:
        c = self.cfg
        self.root.mkdir(parents=True, exist_ok=True)
        c.save(self.root / "config.json")
        n = c.n_classes

        def scenes(d):
            save_scenes(generate_scenes(c.synth, c.master_seed), d / "scenes.npz")

        def inst(d):
            std = default_standard(n)
            save_standard(std, d / "standard" / "standard.json")
            save_pool(default_pool(n, c.pool_size), d / "pool" / "pool.json")
            # read back so every later stage sees the on-disk (8-bit) masks
            std = load_standard(d / "standard" / "standard.json")
            instantiate(std, self._scenes(), c.synth, c.master_seed).save(d / "manifest.json")

        def baseline(d):
            ds = self._dataset("instantiate")
            model = doa_from_scratch(ds.tensors("train"), c.train, n, ds.image_size, c.master_seed)
            save_checkpoint(model, d / "model.pt", {"config_hash": c.hash(), "stage": "baseline"})
            self._report(model, ds, d)

        def optimize(d):
            ds = self._dataset("instantiate")
            pool = load_pool(self.stage_dir("instantiate") / "pool" / "pool.json")
            evaluator = DoaEvaluator(ds.scenes.values(), c.synth, c.search_train, c.search_attack,
                                     c.search.eval_split, c.search.eval_cap)
            evaluator._manifest = ds.manifest
            std, _ = greedy_pictogram_search(ds.standard, pool, evaluator, c.search, None,
                                             TraceWriter(d / "search_trace.jsonl"))
            best, model, chosen, runs = color_optimize(std, ds.with_standard(std), c.color, c.train, c.color_attack,
                                                       c.search_attack, None, TraceWriter(d / "trace.jsonl"))
            save_standard(best, d / "standard" / "standard.json")
            save_checkpoint(model, d / "model.pt", {"config_hash": c.hash(), "stage": "optimize",
                                                    "chosen_restart": chosen})
            self._report(model, ds.with_standard(load_standard(d / "standard" / "standard.json")), d)
            dump_json({"chosen_restart": chosen,
                       "restarts": [{"restart": r.restart, "seed": r.seed,
                                     "select_robust_accuracy": r.report.robust_accuracy,
                                     "colors": r.standard.colors().tolist()} for r in runs]},
                      d / "restarts.json")

        def inst_opt(d):
            std = load_standard(self.stage_dir("optimize") / "standard" / "standard.json")
            save_standard(std, d / "standard" / "standard.json")
            instantiate(std, self._scenes(), c.synth, c.master_seed).save(d / "manifest.json")

        def scratch(d):
            ds = self._dataset("instantiate_optimized")
            model = doa_from_scratch(ds.tensors("train"), c.train, n, ds.image_size, c.master_seed)
            save_checkpoint(model, d / "model.pt", {"config_hash": c.hash(), "stage": "scratch"})
            self._report(model, ds, d)

        def evaluate(d):
            orig = self._dataset("instantiate")
            opt = self._dataset("instantiate_optimized")
            x, y = orig.tensors(c.eval.split)
            cap = min(c.eval.sample_cap, len(x)) if c.eval.sample_cap else None
            base_model = load_checkpoint(self.stage_dir("baseline") / "model.pt")
            attacks = [AttackConfig(attack=a, m=1 if a == "roa" else c.attack.m, stride=c.attack.stride,
                                    opt_steps=c.attack.opt_steps, step_size=c.attack.step_size, seed=c.master_seed)
                       for a in c.eval.sweep_attacks]
            attack_sweep(base_model, x, y, attacks, c.eval.coverages, cap, c.master_seed,
                         train_images=orig.tensors("train")[0], out_dir=d)
            archs = [a for a in c.eval.transfer_archs if a != c.train.arch]
            rows = []
            for label, stage in (("original", "baseline"), ("optimized", "scratch")):
                rep = json.loads((self.stage_dir(stage) / "report.json").read_text())
                rows.append({"arch": c.train.arch, "standard": label, "benign_accuracy": rep["benign_accuracy"],
                             "robust_accuracy": rep["robust_accuracy"], "n_samples": rep["n_samples"]})
            rows += transfer_eval(opt, orig, archs, c.train, c.attack, cap, c.master_seed)
            write_csv(rows, d / "transfer.csv")
            if c.eval.k_sweep:
                dump_json({"rows": self._k_sweep(d)}, d / "k_sweep.json")

        def summary(d):
            rd = {s: json.loads((self.stage_dir(s) / "report.json").read_text())
                  for s in ("baseline", "optimize", "scratch")}
            doc = {
                "version": __version__,
                "config_hash": c.hash(),
                "stage_hashes": {s: self.hashes[s] for s in STAGES if s in self.hashes},
                "baseline": {k: rd["baseline"][k] for k in ("benign_accuracy", "robust_accuracy", "n_samples")},
                "optimized_joint": {k: rd["optimize"][k] for k in ("benign_accuracy", "robust_accuracy", "n_samples")},
                "optimized_scratch": {k: rd["scratch"][k] for k in ("benign_accuracy", "robust_accuracy", "n_samples")},
                "robust_gain": rd["scratch"]["robust_accuracy"] - rd["baseline"]["robust_accuracy"],
                "optimized_colors": load_standard(self.stage_dir("optimize") / "standard" / "standard.json")
                .colors().tolist(),
            }
            dump_json(doc, d / "summary.json")

        fns = {"scenes": scenes, "instantiate": inst, "baseline": baseline, "optimize": optimize,
               "instantiate_optimized": inst_opt, "scratch": scratch, "evaluate": evaluate, "summary": summary}
        for name in STAGES:
            self.run_stage(name, fns[name])
        return json.loads((self.stage_dir("summary") / "summary.json").read_text())

    def _k_sweep(self, d: Path) -> list:
        """Partial optimizations for every k and init (expensive: 2n optimize runs)."""
        c = self.cfg
        ds = self._dataset("instantiate")
        pool = load_pool(self.stage_dir("instantiate") / "pool" / "pool.json")
        base = json.loads((self.stage_dir("baseline") / "report.json").read_text())
        results = {(None, 0): (base["benign_accuracy"], base["robust_accuracy"])}
        scenes = list(ds.scenes.values())
        for init in c.eval.k_sweep_inits:
            color = dataclasses.replace(c.color, init=init)
            for k in range(1, c.n_classes + 1):
                res = optimize_standard(ds.standard, pool, scenes, c.synth, c.search, color, c.train,
                                        c.color_attack, k, c.search_train,
                                        DoaEvaluator(scenes, c.synth, c.search_train, c.search_attack,
                                                     c.search.eval_split, c.search.eval_cap))
                rep = self._report(res.model, ds.with_standard(res.standard), d, f"k{k}_{init}.json")
                results[(init, k)] = rep
        return sweep_optimized_classes(results, c.n_classes, c.eval.k_sweep_inits, d)


def stage_hash(cfg: RunConfig, name: str, sections, upstream_hashes: dict) -> str:
    d = cfg.to_dict()
    return config_hash({"stage": name, "config": {s: d[s] for s in sections}, "upstream": upstream_hashes})


def check_directory(root) -> list[str]:
    """Validate a run directory: output checksums, upstream links and stage hashes.

    Stage hashes are recomputed from ``config.json`` along the chain, so stale
    records (produced under another config) are reported too.

    :return: a list of problems (empty if the directory is consistent)
    """
    root = Path(root)
    problems = []
    records = {}
    for rec_path in sorted(root.glob("*/stage.json")):
        rec = json.loads(rec_path.read_text())
        records[rec["stage"]] = rec
        d = rec_path.parent
        for f, digest in rec["outputs"].items():
            p = d / f
            if not p.exists():
                problems.append(f"{rec['stage']}: missing output {f}")
            elif file_digest(p) != digest:
                problems.append(f"{rec['stage']}: checksum mismatch for {f}")
    if not records:
        return ["no stage records found"]
    cfg_path = root / "config.json"
    if not cfg_path.exists():
        return problems + ["config.json missing"]
    cfg = build_run_config(json.loads(cfg_path.read_text()))
    expected: dict = {}
    for name, sections, upstream in STAGE_SPECS:
        if name not in records:
            continue
        rec = records[name]
        for up in upstream:
            if up not in records:
                problems.append(f"{name}: upstream stage {up} has no record")
            elif rec["upstream"].get(up) != records[up]["hash"]:
                problems.append(f"{name}: recorded upstream {up} hash does not match that stage's record")
        if all(u in expected for u in upstream):
            expected[name] = stage_hash(cfg, name, sections, {u: expected[u] for u in upstream})
            if expected[name] != rec["hash"]:
                problems.append(f"{name}: stage hash {rec['hash']} does not match config.json ({expected[name]})")
    return problems
