"""Command-line interface: ``signforge <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 stage failure,
4 unimplemented attack requested.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from signforge import __version__
from signforge.attacks import ATTACK_IDS, AttackConfig, UnimplementedAttackError, registered_attacks
from signforge.config import SCHEMA_VERSION, ConfigError, RunConfig, load_run_config
from signforge.evaluate import EvalReport, plot_csv, robust_accuracy
from signforge.model.nets import ARCHITECTURES, build_model
from signforge.model.train import load_checkpoint, save_checkpoint, train_doa, train_standard
from signforge.optimize import optimize_standard
from signforge.pipeline import STAGES, Pipeline, StageError, StopRequested, check_directory
from signforge.standard import StandardError, default_pool, default_standard, load_pool, load_standard, save_standard
from signforge.synth.augment import AUGMENTATION_IDS
from signforge.synth.dataset import DatasetManifest, MaterializedDataset, SignDataset, instantiate
from signforge.synth.scenes import generate_scenes, load_scenes, save_scenes

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_UNIMPLEMENTED = 0, 2, 3, 4

log = logging.getLogger("signforge")


class CliError(Exception):
    def __init__(self, msg, code=EXIT_STAGE):
        super().__init__(msg)
        self.code = code


# -- data directories --------------------------------------------------------------------
# A data directory holds manifest.json, standard/standard.json and scenes.npz,
# plus images.npy when materialized.


def write_data_dir(out: Path, standard, scenes, manifest, materialize: bool = False) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_standard(standard, out / "standard" / "standard.json")
    save_scenes(scenes, out / "scenes.npz")
    manifest.save(out / "manifest.json")
    if materialize:
        SignDataset(load_standard(out / "standard" / "standard.json"), scenes, manifest).materialize(out)


def open_data_dir(path):
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise CliError(f"{path} is not a data directory (no manifest.json)", EXIT_CONFIG)
    if (path / "images.npy").exists():
        return MaterializedDataset(path)
    std = load_standard(path / "standard" / "standard.json")
    return SignDataset(std, load_scenes(path / "scenes.npz"), DatasetManifest.load(path / "manifest.json"))


def _cfg(args) -> RunConfig:
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"master_seed={args.seed}")
    return load_run_config(getattr(args, "config", None), overrides, getattr(args, "paper_scale", False))


def _dump(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _report_doc(rep: EvalReport, cfg: RunConfig) -> dict:
    doc = rep.to_json(with_outcomes=True)
    doc["config_hash"] = cfg.hash()
    return doc


# -- commands ------------------------------------------------------------------------------


def cmd_gen_scenes(args) -> int:
    cfg = _cfg(args)
    scenes = generate_scenes(cfg.synth, cfg.master_seed)
    save_scenes(scenes, args.out)
    print(f"wrote {len(scenes)} scene variants to {args.out} (config {cfg.hash()})")
    return EXIT_OK


def cmd_instantiate(args) -> int:
    cfg = _cfg(args)
    scenes = load_scenes(args.scenes)
    std = load_standard(args.standard) if args.standard else default_standard(cfg.n_classes)
    manifest = instantiate(std, scenes, cfg.synth, cfg.master_seed)
    write_data_dir(Path(args.out), std, scenes, manifest, args.materialize)
    print(json.dumps(manifest.counts(), sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _cfg(args)
    ds = open_data_dir(args.data)
    x, y = ds.tensors("train")
    tc = dataclasses.replace(cfg.train, arch=args.arch or cfg.train.arch)
    if args.init:
        model = load_checkpoint(args.init)
    else:
        model = build_model(tc.arch, int(y.max()) + 1 if args.n_classes is None else args.n_classes,
                            x.shape[-1], cfg.master_seed)
        train_standard(model, (x, y), tc)
    if args.mode == "doa":
        train_doa(model, (x, y), tc)
    save_checkpoint(model, args.out, {"config_hash": cfg.hash(), "mode": args.mode, "seed": cfg.master_seed})
    print(f"saved {args.mode} model to {args.out}")
    return EXIT_OK


def _attack_cfg(args, cfg: RunConfig) -> AttackConfig:
    fields = {"attack": args.attack}
    for name in ("coverage", "m", "stride"):
        if getattr(args, name, None) is not None:
            fields[name] = getattr(args, name)
    if args.attack == "roa":
        fields["m"] = 1
    return dataclasses.replace(cfg.attack, **fields)


def cmd_attack(args) -> int:
    cfg = _cfg(args)
    acfg = _attack_cfg(args, cfg)
    model = load_checkpoint(args.model)
    ds = open_data_dir(args.data)
    x, y = ds.tensors(args.split)
    train_images = ds.tensors("train")[0] if acfg.attack == "universal" else None
    rep = robust_accuracy(model, x, y, acfg, args.cap if args.cap else None, cfg.master_seed, train_images)
    doc = _report_doc(rep, cfg)
    doc["success_rate"] = sum(o["success"] for o in rep.outcomes) / max(1, len(rep.outcomes))
    _dump(doc, args.out)
    print(f"{acfg.attack}: success rate {doc['success_rate']:.4f}, robust accuracy {rep.robust_accuracy:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _cfg(args)
    acfg = _attack_cfg(args, cfg)
    model = load_checkpoint(args.model)
    ds = open_data_dir(args.data)
    x, y = ds.tensors(args.split)
    cap = None if args.full else min(args.cap or cfg.eval.sample_cap, len(x))
    train_images = ds.tensors("train")[0] if acfg.attack == "universal" else None
    rep = robust_accuracy(model, x, y, acfg, cap, cfg.master_seed, train_images)
    _dump(_report_doc(rep, cfg), args.out)
    print(f"benign {rep.benign_accuracy:.4f} robust {rep.robust_accuracy:.4f} (n={rep.n_samples})")
    return EXIT_OK


def cmd_optimize(args) -> int:
    overrides = list(args.set or [])
    if args.init:
        overrides.append(f"color.init={'static_gray' if args.init == 'static' else 'random'}")
    if args.restarts:
        overrides.append(f"color.restarts={args.restarts}")
    if args.seed is not None:
        overrides.append(f"master_seed={args.seed}")
    cfg = load_run_config(args.config, overrides, args.paper_scale)
    std = load_standard(args.standard) if args.standard else default_standard(cfg.n_classes)
    pool = load_pool(args.pool) if args.pool else default_pool(std.n, cfg.pool_size)
    scenes = load_scenes(args.scenes) if args.scenes else generate_scenes(cfg.synth, cfg.master_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    res = optimize_standard(std, pool, scenes, cfg.synth, cfg.search, cfg.color, cfg.train, cfg.color_attack,
                            args.k, cfg.search_train, out_dir=out)
    save_standard(res.standard, out / "standard" / "standard.json")
    save_checkpoint(res.model, out / "model.pt", {"config_hash": cfg.hash(), "k": res.k,
                                                  "chosen_restart": res.chosen_restart})
    ds = SignDataset(load_standard(out / "standard" / "standard.json"), scenes,
                     instantiate(res.standard, scenes, cfg.synth, cfg.master_seed))
    x, y = ds.tensors(cfg.eval.split)
    rep = robust_accuracy(res.model, x, y, cfg.attack, min(cfg.eval.sample_cap or len(x), len(x)), cfg.master_seed)
    _dump({"k": res.k, "chosen_restart": res.chosen_restart, "config_hash": cfg.hash(),
           "benign_accuracy": rep.benign_accuracy, "robust_accuracy": rep.robust_accuracy,
           "colors": res.standard.colors().tolist()}, out / "summary.json")
    print(f"k={res.k}: benign {rep.benign_accuracy:.4f} robust {rep.robust_accuracy:.4f}; wrote {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run)
    plots = {"sweep.csv": ("coverage", "robust_accuracy", "attack"),
             "k_sweep.csv": ("k", "robust_accuracy", "init")}
    made = []
    for csv_path in sorted(run.rglob("*.csv")):
        if csv_path.name in plots:
            x, y, g = plots[csv_path.name]
            plot_csv(csv_path, csv_path.with_suffix(".png"), x, y, g)
            made.append(str(csv_path.with_suffix(".png")))
    summary = run / "summary" / "summary.json"
    if summary.exists():
        print(summary.read_text().rstrip())
    for m in made:
        print(f"plot: {m}")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    cfg = _cfg(args)
    pipe = Pipeline(cfg, args.out, stop_after=args.stop_after)
    try:
        summary = pipe.run()
    except StopRequested as stop:
        print(f"stopped after stage {stop.args[0]}; executed: {', '.join(pipe.executed) or 'none'}")
        return EXIT_OK
    print(f"executed: {', '.join(pipe.executed) or 'none'}; skipped: {', '.join(pipe.skipped) or 'none'}")
    print(json.dumps({k: summary[k] for k in ("baseline", "optimized_joint", "optimized_scratch", "robust_gain")},
                     sort_keys=True))
    return EXIT_OK


def cmd_check(args) -> int:
    problems = check_directory(args.run)
    for p in problems:
        print(p)
    if problems:
        return EXIT_STAGE
    print(f"{args.run}: hash chain ok")
    return EXIT_OK


def version_text() -> str:
    lines = [
        f"signforge {__version__}",
        f"config hash schema: v{SCHEMA_VERSION} (sha256 of canonical JSON, 16 hex chars)",
        f"architectures: {', '.join(ARCHITECTURES)}",
        f"attacks ({len(ATTACK_IDS)}):",
    ]
    lines += [f"  {k}: {v}" for k, v in registered_attacks().items()]
    lines.append(f"augmentations ({len(AUGMENTATION_IDS)}):")
    lines += [f"  {a}" for a in AUGMENTATION_IDS]
    return "\n".join(lines)


def cmd_version(args) -> int:
    print(version_text())
    return EXIT_OK


# -- parser --------------------------------------------------------------------------------


def _common(p, seed=True):
    p.add_argument("--config", help="run config (JSON); flags and --set win over file values")
    p.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE", help="config override, repeatable")
    p.add_argument("--paper-scale", action="store_true", help="use the full published protocol defaults")
    if seed:
        p.add_argument("--seed", type=int, help="master seed")


def _attack_args(p, required=True):
    p.add_argument("--attack", choices=ATTACK_IDS, required=required, default=None if required else "rp4")
    p.add_argument("--coverage", type=float)
    p.add_argument("--m", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="signforge", description="Optimize traffic-sign standards for robustness.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    ap.add_argument("--jobs", type=int, default=1, help="cap on torch worker threads")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", help="generate procedural context scenes")
    _common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_scenes)

    p = sub.add_parser("instantiate", help="instantiate a standard into a dataset directory")
    _common(p)
    p.add_argument("--scenes", required=True)
    p.add_argument("--standard", help="standard.json (default: the built-in original standard)")
    p.add_argument("--materialize", action="store_true", help="also write images.npy and PNGs")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_instantiate)

    p = sub.add_parser("train", help="standard or DOA training")
    _common(p)
    p.add_argument("--mode", choices=("standard", "doa"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--arch", choices=ARCHITECTURES)
    p.add_argument("--init", help="start from this checkpoint instead of running phase 1")
    p.add_argument("--n-classes", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("attack", help="attack a model on a data split")
    _common(p)
    _attack_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--cap", type=int, help="number of samples (default: whole split)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("optimize", help="greedy pictograms + color optimization")
    _common(p)
    p.add_argument("--standard")
    p.add_argument("--pool")
    p.add_argument("--scenes")
    p.add_argument("--k", type=int, help="optimize only the first k classes (default: all)")
    p.add_argument("--init", choices=("static", "random"))
    p.add_argument("--restarts", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_optimize)

    p = sub.add_parser("evaluate", help="benign and robust accuracy report")
    _common(p)
    _attack_args(p, required=False)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--cap", type=int)
    p.add_argument("--full", action="store_true", help="evaluate the whole split")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("report", help="regenerate plots from CSVs and print the summary")
    p.add_argument("--run", required=True)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("reproduce", help="run the whole experiment (resumable)")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--stop-after", choices=STAGES, help="stop once this stage is complete")
    p.set_defaults(fn=cmd_reproduce)

    p = sub.add_parser("check", help="validate a run directory's hash chain")
    p.add_argument("run")
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("version", help="version and registered ids")
    p.set_defaults(fn=cmd_version)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.jobs))
    try:
        return args.fn(args)
    except UnimplementedAttackError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_UNIMPLEMENTED
    except StageError as e:
        if isinstance(e.cause, UnimplementedAttackError):
            print(f"error: {e}", file=sys.stderr)
            return EXIT_UNIMPLEMENTED
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STAGE
    except (ConfigError, StandardError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except Exception as e:  # noqa: BLE001 - any other failure is a stage failure
        print(f"error: {args.command} failed: {e}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
