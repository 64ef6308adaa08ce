"""Command-line entry points: gen-synth, train, ablate, eval and export-maps."""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ConfigError, RunConfig, load_config
from .data import SPLITS, DataError, build_adjacency, generate_synthetic, load_splits, write_dataset
from .metrics import (
    attention_map,
    auroc,
    export_attention_maps,
    f1,
    instance_auroc,
    rank_methods,
    variance_on_errors,
)
from .model import CheckpointError, MILModel, load_checkpoint, save_checkpoint
from .trainer import fit, write_history, write_steps

log = logging.getLogger("probsa")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
REPORT_FIELDS = ["run_seed", "split", "auroc", "f1"]
ABLATION_FIELDS = ["variant", "lambda", "auroc_mean", "auroc_std", "f1_mean", "f1_std",
                   "rank", "status"]
DIAGNOSTIC_FIELDS = ["run_seed", "var_wrong", "var_right", "n_wrong", "n_right",
                     "instance_auroc"]


# --- shared helpers ------------------------------------------------------------

def load_data(cfg: RunConfig) -> dict:
    if cfg.data.synthetic is not None:
        return generate_synthetic(cfg.data.synthetic, cfg.data.seed)
    return load_splits(cfg.data.manifest)


def n_features(splits: dict) -> int:
    for split in SPLITS:
        if splits.get(split):
            return splits[split][0].features.shape[1]
    raise DataError("dataset has no bags")


def resolve_features(cfg: RunConfig, splits: dict) -> None:
    """Fill ``model.P`` from the data so ``run.json`` is self-contained."""
    p = n_features(splits)
    if cfg.model.get("P") is None:
        cfg.model["P"] = p
    cfg.variant(p)


def cell_config(cfg: RunConfig, variant: dict, lam) -> RunConfig:
    """The single-run configuration of one ablation grid cell."""
    cell = copy.deepcopy(cfg)
    cell.model.update(variant)
    cell.objective.lam = lam
    return cell


def graphs_for(cfg: RunConfig, bags) -> list:
    return [build_adjacency(b, cfg.data.neighborhood, cfg.data.connectivity) for b in bags]


def write_run_json(out_dir: Path, cfg: RunConfig, command: str, extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "config": cfg.to_dict(), **(extra or {})}
    (out_dir / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def safe_scores(probs, labels, threshold) -> tuple[float, float]:
    """AUROC and F1, or NaN where the split lacks a class."""
    try:
        a = auroc(probs, labels)
    except ValueError:
        a = float("nan")
    try:
        f = f1(probs, labels, threshold)
    except ValueError:
        f = float("nan")
    return a, f


def write_report(path: Path, rows: list[tuple[int, str, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for seed, split, a, f in rows:
            w.writerow([seed, split, repr(a), repr(f)])
        if rows:
            am, asd = mean_std([r[2] for r in rows])
            fm, fsd = mean_std([r[3] for r in rows])
            w.writerow(["mean±std", rows[0][1], f"{am:.6f}±{asd:.6f}", f"{fm:.6f}±{fsd:.6f}"])


# --- training --------------------------------------------------------------------

def train_runs(cfg: RunConfig, splits: dict, out_dir: Path) -> list[tuple[int, str, float, float]]:
    """One training run per seed; writes per-seed artefacts and ``report.csv``."""
    train, val, test = splits["train"], splits["val"], splits["test"]
    if not train or not val:
        raise DataError("train and val splits must be non-empty")
    variant = cfg.variant(n_features(splits))
    policy = cfg.objective.policy()
    tcfg = cfg.train_config()
    train_graphs = graphs_for(cfg, train)
    rows, diags = [], []
    for seed in cfg.seeds:
        run_dir = out_dir / f"seed_{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        model = MILModel(variant, seed=seed)
        result = fit(train, train_graphs, val, model, tcfg, policy, seed=seed)
        model.load_state(result.best_state)
        save_checkpoint(run_dir / "checkpoint.psac", model,
                        {"seed": seed, "best_epoch": result.best_epoch,
                         "best_val_auroc": result.best_val_auroc, "lambda": policy.label})
        write_history(run_dir / "history.csv", result.history)
        write_steps(run_dir / "steps.csv", result.steps)
        if not test:
            log.warning("test split is empty; no test metrics for seed %d", seed)
            continue
        probs = np.array([model.predict_bag(b, tcfg.S_predict, seed=(tcfg.eval_seed, i))
                          for i, b in enumerate(test)])
        a, f = safe_scores(probs, [b.label for b in test], tcfg.threshold)
        rows.append((seed, "test", a, f))
        maps = [attention_map(model, b) for b in test]
        d = variance_on_errors(maps, test, tcfg.threshold)
        diags.append([seed, repr(d["var_wrong"]), repr(d["var_right"]), d["n_wrong"],
                      d["n_right"], repr(instance_auroc(maps, test))])
        log.info("seed %d: best epoch %d, val AUROC %.4f, test AUROC %.4f, F1 %.4f",
                 seed, result.best_epoch, result.best_val_auroc, a, f)
    write_report(out_dir / "report.csv", rows)
    with open(out_dir / "diagnostics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DIAGNOSTIC_FIELDS)
        w.writerows(diags)
    return rows


# --- commands ----------------------------------------------------------------------

def cmd_gen_synth(cfg: RunConfig, args) -> int:
    if cfg.data.synthetic is None:
        raise ConfigError("gen-synth needs data.synthetic")
    out = Path(cfg.out_dir)
    if args.dry_run:
        print(f"gen-synth: seed {cfg.data.seed} -> {out}/manifest.csv")
        return EXIT_OK
    splits = generate_synthetic(cfg.data.synthetic, cfg.data.seed)
    manifest = write_dataset(out, splits)
    card = {split: {"bags": len(bags), "positive": sum(b.label for b in bags),
                    "positive_fraction": (sum(b.label for b in bags) / len(bags)) if bags else 0.0}
            for split, bags in splits.items()}
    card["seed"] = cfg.data.seed
    card["synthetic"] = dataclasses.asdict(cfg.data.synthetic)
    (out / "dataset_card.json").write_text(json.dumps(card, indent=2, sort_keys=True) + "\n")
    write_run_json(out, cfg, "gen-synth")
    log.info("wrote %s", manifest)
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    out = Path(cfg.out_dir)
    if args.dry_run:
        print(f"train: seeds {cfg.seeds}, lambda {cfg.objective.lam}, out {out}")
        return EXIT_OK
    splits = load_data(cfg)
    resolve_features(cfg, splits)
    write_run_json(out, cfg, "train")
    train_runs(cfg, splits, out)
    return EXIT_OK


def cell_name(variant: dict, lam) -> str:
    parts = [f"{k}={variant[k]}" for k in sorted(variant)]
    return "__".join(parts + [f"lambda={lam}"]).replace("/", "_")


def _run_cell(cfg: RunConfig, variant: dict, lam, out_dir: str) -> dict:
    """Worker: train one grid cell; failures are reported rather than raised."""
    name = json.dumps(variant, sort_keys=True)
    try:
        cell = cell_config(cfg, variant, lam)
        splits = load_data(cell)
        resolve_features(cell, splits)
        name = cell.variant(cell.model["P"]).name
        write_run_json(Path(out_dir), cell, "train")
        rows = train_runs(cell, splits, Path(out_dir))
        return {"variant": name, "lambda": lam, "status": "ok",
                "auroc": [r[2] for r in rows], "f1": [r[3] for r in rows]}
    except Exception as exc:  # isolate the cell, keep the grid going
        return {"variant": name, "lambda": lam,
                "status": f"error: {type(exc).__name__}: {exc}", "auroc": [], "f1": []}


def cmd_ablate(cfg: RunConfig, args) -> int:
    out = Path(cfg.out_dir)
    cells = [(v, lam) for v in cfg.ablation.variants for lam in cfg.ablation.lambdas]
    if args.dry_run:
        for v, lam in cells:
            print(f"ablate: {cell_name(v, lam)} seeds {cfg.seeds}")
        return EXIT_OK
    write_run_json(out, cfg, "ablate")
    jobs = max(1, args.jobs)
    dirs = [str(out / cell_name(v, lam)) for v, lam in cells]
    if jobs == 1:
        results = [_run_cell(cfg, v, lam, d) for (v, lam), d in zip(cells, dirs)]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_cell, cfg, v, lam, d) for (v, lam), d in zip(cells, dirs)]
            results = [fut.result() for fut in futures]
    ok = [k for k, r in enumerate(results) if r["status"] == "ok" and r["auroc"]]
    ranks = {}
    if ok:
        table = [[mean_std(results[k]["auroc"])[0], mean_std(results[k]["f1"])[0]] for k in ok]
        ranks = dict(zip(ok, rank_methods(table)))
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_FIELDS)
        for k, r in enumerate(results):
            if r["auroc"]:
                am, asd = mean_std(r["auroc"])
                fm, fsd = mean_std(r["f1"])
                stats = [repr(am), repr(asd), repr(fm), repr(fsd)]
            else:
                stats = [""] * 4
            rank = repr(float(ranks[k])) if k in ranks else ""
            w.writerow([r["variant"], r["lambda"], *stats, rank, r["status"]])
    failed = [r for r in results if r["status"] != "ok"]
    for r in failed:
        log.error("cell %s lambda=%s failed: %s", r["variant"], r["lambda"], r["status"])
    return EXIT_OK


def _checkpoints(cfg: RunConfig, args) -> list[tuple[str, Path]]:
    if args.checkpoint:
        return [("checkpoint", Path(args.checkpoint))]
    return [(str(s), Path(cfg.out_dir) / f"seed_{s}" / "checkpoint.psac") for s in cfg.seeds]


def _load_matching(path: Path, cfg: RunConfig, splits: dict) -> MILModel:
    if not path.exists():
        raise DataError(f"checkpoint {path} not found")
    model, _ = load_checkpoint(path)
    resolve_features(cfg, splits)
    expected = cfg.variant(cfg.model["P"])
    if model.variant != expected:
        raise ConfigError(f"checkpoint variant {model.variant.to_dict()} does not match the "
                          f"configured {expected.to_dict()}")
    return model


def cmd_eval(cfg: RunConfig, args) -> int:
    if args.dry_run:
        print(f"eval: {[str(p) for _, p in _checkpoints(cfg, args)]}")
        return EXIT_OK
    splits = load_data(cfg)
    rows = []
    for tag, path in _checkpoints(cfg, args):
        model = _load_matching(path, cfg, splits)
        for split in ("val", "test"):
            if not splits[split]:
                continue
            bags = splits[split]
            probs = [model.predict_bag(b, cfg.eval.S_predict, seed=(cfg.eval.eval_seed, i))
                     for i, b in enumerate(bags)]
            a, f = safe_scores(probs, [b.label for b in bags], cfg.eval.threshold)
            rows.append([tag, split, repr(a), repr(f)])
            print(f"{tag} {split}: AUROC {a:.4f} F1 {f:.4f}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval_report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        w.writerows(rows)
    return EXIT_OK


def cmd_export_maps(cfg: RunConfig, args) -> int:
    path = Path(args.checkpoint) if args.checkpoint else \
        Path(cfg.out_dir) / f"seed_{cfg.seeds[0]}" / "checkpoint.psac"
    maps_dir = Path(args.maps_dir) if args.maps_dir else Path(cfg.out_dir) / "maps"
    if args.dry_run:
        print(f"export-maps: {path} -> {maps_dir}")
        return EXIT_OK
    splits = load_data(cfg)
    maps_dir.mkdir(parents=True, exist_ok=True)
    test = splits["test"]
    if not test:
        log.warning("test split is empty; no maps written")
        return EXIT_OK
    model = _load_matching(path, cfg, splits)
    export_attention_maps(model, test, maps_dir, cfg.eval.S_predict, cfg.eval.eval_seed)
    write_run_json(maps_dir, cfg, "export-maps", {"checkpoint": str(path)})
    log.info("wrote %d maps to %s", len(test), maps_dir)
    return EXIT_OK


COMMANDS = {"gen-synth": cmd_gen_synth, "train": cmd_train, "ablate": cmd_ablate,
            "eval": cmd_eval, "export-maps": cmd_export_maps}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="probsa", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the run seeds (gen-synth: the data seed)")
    parser.add_argument("--jobs", type=int, default=1, help="parallel grid cells for ablate")
    parser.add_argument("--dry-run", action="store_true", help="validate and print the plan")
    parser.add_argument("--checkpoint", default=None, help="checkpoint for eval/export-maps")
    parser.add_argument("--maps-dir", default=None, help="output directory for export-maps")
    parser.add_argument("--out-dir", default=None, help="override out_dir")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not log.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        log.addHandler(handler)
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        cfg = load_config(args.config)
        if args.out_dir:
            cfg.out_dir = args.out_dir
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            if args.command == "gen-synth":
                cfg.data.seed = args.seed
            else:
                cfg.seeds = [args.seed]
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except ad.NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
