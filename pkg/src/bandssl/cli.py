"""``bandssl <synth|pretrain|train|sweep|occlude|report> --config <path> [--set key=value ...]``"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import persistence as store
from .config import ConfigError, RunConfig, build, dump_config, load_config
from .core_types import BandLabel, normalize_pixels
from .ingest import CatalogError
from .synthsky import generate_dataset, generate_rgb_scenes, read_dataset, write_dataset
from .trainer import (
    TrainingDivergedError,
    aggregate_rows,
    finetune,
    learning_curves,
    make_splits,
    plot_learning_curves,
    pretrain,
    render_table,
    sweep,
)

log = logging.getLogger("bandssl")

COMMANDS = ("synth", "pretrain", "train", "sweep", "occlude", "report")


class CommandError(RuntimeError):
    def __init__(self, category: str, message: str):
        self.category = category
        super().__init__(message)


def set_deterministic(flag: bool) -> None:
    torch.use_deterministic_algorithms(flag)
    if flag:
        torch.backends.cudnn.benchmark = False


def _record(run: RunConfig, command: str, **extra) -> store.ExperimentRecord:
    manifest = {
        "command": command,
        "config": run.raw,
        "seed": run.seed,
        "deterministic": run.deterministic,
        "code_version": store.code_version(),
        "format_version": store.FORMAT_VERSION,
        **extra,
    }
    return store.ExperimentRecord(manifest=manifest)


def _load_dataset(run: RunConfig):
    root = Path(run.data.path)
    if not root.exists():
        raise CommandError("no_input", f"dataset directory {root} not found (run `bandssl synth` first)")
    ds = read_dataset(root)
    if not ds:
        raise CommandError("no_input", f"no clusters under {root}")
    return ds


def cmd_synth(run: RunConfig) -> store.ExperimentRecord:
    from dataclasses import replace

    cfg = replace(run.synth, seed=run.seed)
    ds = generate_dataset(cfg, run.data.n_clusters)
    write_dataset(ds, run.data.path)
    rec = _record(run, "synth")
    rec.dataset_digest = store.dataset_digest(ds)
    log.info("wrote %d clusters to %s", len(ds), run.data.path)
    return rec


def cmd_pretrain(run: RunConfig) -> store.ExperimentRecord:
    from dataclasses import replace

    cfg = replace(run.pretrain, seed=run.seed)
    rec = _record(run, "pretrain")
    if cfg.mode == "band_classification":
        ds = _load_dataset(run)
        rec.dataset_digest = store.dataset_digest(ds)
        result = pretrain(ds, cfg, make_splits(ds, run.seed))
    else:
        images = generate_rgb_scenes(run.data.rgb_images, run.data.rgb_side, run.seed)
        result = pretrain(images, cfg)
    ckpt_dir = run.output_dir / "checkpoints"
    path, digest = store.save_checkpoint(
        result.model, "pretrain", result.history[-1]["epoch"], ckpt_dir,
        {"mode": cfg.mode, "seed": run.seed},
    )
    rec.add_checkpoint("pretrain", result.history[-1]["epoch"], path, digest)
    store.write_json(run.output_dir / "pretrain_history.json", {"history": result.history})
    return rec


def _metric_row(label, fraction, seed, fold, mae, sigma, trial, deterministic):
    row = {"model": label, "fraction": fraction, "trial": trial, "fold": fold,
           "mae": mae, "sigma": sigma, "seed": seed}
    if deterministic:
        row["timestamp"] = ""
    return row


def cmd_train(run: RunConfig) -> store.ExperimentRecord:
    ds = _load_dataset(run)
    plan = make_splits(ds, run.seed)
    rec = _record(run, "train")
    rec.dataset_digest = store.dataset_digest(ds)
    init = run.train.pretrained
    result = finetune(ds, init, run.finetune, plan, run.train.fold, run.model)
    label = "ours" if init else "base"
    path, digest = store.save_checkpoint(
        result.model, f"finetune_{label}", result.best_epoch, run.output_dir / "checkpoints",
        {"fold": run.train.fold, "stop_reason": result.stop_reason},
    )
    rec.add_checkpoint(f"finetune_{label}", result.best_epoch, path, digest)
    metrics = run.output_dir / "metrics.csv"
    store.record_metrics(
        [_metric_row(label, run.finetune.fraction, run.finetune.trial_seed, run.train.fold, result.mae, result.sigma, 0, run.deterministic)], metrics
    )
    rec.metrics_path = str(metrics)
    rec.manifest["stopping"] = {"best_epoch": result.best_epoch, "epochs_run": result.epochs_run,
                                "stop_reason": result.stop_reason}
    return rec


def _write_reports(rows, out_dir: Path) -> dict:
    agg = aggregate_rows(rows)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "table.md").write_text(render_table(agg))
    curves = learning_curves(agg)
    store.write_json(out_dir / "learning_curves.json", curves)
    plot_learning_curves(agg, out_dir / "learning_curves.png")
    return agg


def cmd_sweep(run: RunConfig) -> store.ExperimentRecord:
    ds = _load_dataset(run)
    plan = make_splits(ds, run.seed)
    s = run.sweep
    if s.pretrained is None:
        raise CommandError("config", "sweep.pretrained must name a pretrain checkpoint")
    rec = _record(run, "sweep")
    rec.dataset_digest = store.dataset_digest(ds)
    metrics = run.output_dir / "metrics.csv"
    metrics.unlink(missing_ok=True)
    stops = []

    def on_row(row):
        store.record_metrics([_metric_row(row["model"], row["fraction"], row["seed"], row["fold"], row["mae"], row["sigma"],
                                          row["trial"], run.deterministic)], metrics)
        stops.append({k: row[k] for k in ("model", "fraction", "trial", "fold", "best_epoch", "stop_reason")})

    result = sweep(ds, s.fractions, s.trials, plan, s.pretrained, run.finetune, run.model,
                   folds=s.folds, workers=s.workers, on_row=on_row)
    result.check(s.trials)
    _write_reports(store.load_metrics(metrics), run.output_dir / "report")
    rec.metrics_path = str(metrics)
    rec.manifest["stopping"] = stops
    return rec


def cmd_occlude(run: RunConfig) -> store.ExperimentRecord:
    from .occlusion import dataset_mean_value, marker_saliency_score, occlusion_map, render_overlay, save_map

    occ = run.occlusion_section
    if occ.checkpoint is None:
        raise CommandError("config", "occlusion.checkpoint must name a pretrain checkpoint")
    model, manifest = store.load_checkpoint(occ.checkpoint)
    if model.pretext_head is None or model.pretext_head.n_classes != 5:
        raise CommandError("config", "occlusion needs a band-classification checkpoint")
    ds = _load_dataset(run)
    scheme = run.pretrain.normalization
    by_id = {o.cluster_id: o for o in ds}
    if occ.clusters:
        ids = [str(c) for c in occ.clusters]
        absent = [c for c in ids if c not in by_id]
        if absent:
            raise CommandError("data", f"unknown clusters {absent}")
    else:
        plan = make_splits(ds, run.seed)
        ids = sorted(plan.pretext_test, key=str)[: occ.n_clusters]
    norm = [normalize_pixels(img, scheme) for o in ds for img in o.images.values()]
    fill = dataset_mean_value(norm)
    out = run.output_dir / "occlusion"
    rec = _record(run, "occlude", checkpoint=str(occ.checkpoint))
    rec.dataset_digest = store.dataset_digest(ds)
    summary = []
    for cid in ids:
        obs = by_id[cid]
        for b in occ.bands:
            band = BandLabel.coerce(b)
            img = normalize_pixels(obs.images[band], scheme)
            omap = occlusion_map(model, img, band, run.occlusion, fill)
            stem = out / f"{cid}_{band.value}"
            save_map(omap, stem)
            members = list(obs.truth.members) if obs.truth else []
            stars = list(obs.truth.stars) if obs.truth else []
            render_overlay(omap, img, members, stars, stem.with_suffix(".png"))
            entry = {"cluster_id": cid, "band": band.value, "base_probability": omap.base_probability}
            if members:
                entry["member_score"] = marker_saliency_score(omap, members)
            if stars:
                entry["star_score"] = marker_saliency_score(omap, stars)
            summary.append(entry)
    store.write_json(out / "summary.json", {"maps": summary, "fill_value": fill})
    return rec


def cmd_report(run: RunConfig) -> store.ExperimentRecord:
    paths = run.report.metrics or [str(run.output_dir / "metrics.csv")]
    rows = []
    for p in paths:
        rows.extend(store.load_metrics(p))
    if not rows:
        raise CommandError("no_input", "no input metrics")
    agg = _write_reports(rows, run.output_dir / "report")
    rec = _record(run, "report", inputs=[str(p) for p in paths])
    rec.manifest["aggregates"] = {f"{m}@{f:g}": v for (m, f), v in sorted(agg.items())}
    return rec


HANDLERS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "occlude": cmd_occlude,
    "report": cmd_report,
}


def run_command(command: str, run: RunConfig) -> Path:
    set_deterministic(run.deterministic)
    torch.manual_seed(run.seed)
    np.random.seed(run.seed)
    run.output_dir.mkdir(parents=True, exist_ok=True)
    (run.output_dir / f"{command}_config.yaml").write_text(dump_config(run.raw))
    rec = HANDLERS[command](run)
    return rec.finalize(run.output_dir / f"{command}_record.json")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bandssl", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=False, help="YAML run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. pretrain.epochs=5")
    p.add_argument("--deterministic", action="store_true", help="force reproducible kernels")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _fail(category: str, message: str) -> int:
    print(f"bandssl-error category={category} message={json.dumps(message)}", file=sys.stderr)
    return 2 if category == "config" else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.overrides)
        if args.deterministic:
            overrides.append("deterministic=true")
        run = build(load_config(args.config, overrides))
        path = run_command(args.command, run)
    except ConfigError as exc:
        return _fail("config", str(exc))
    except CommandError as exc:
        return _fail(exc.category, str(exc))
    except (CatalogError, KeyError, FileNotFoundError) as exc:
        return _fail("data", str(exc))
    except (TrainingDivergedError, FloatingPointError) as exc:
        return _fail("training", str(exc))
    except store.IntegrityError as exc:
        return _fail("integrity", str(exc))
    except OSError as exc:
        return _fail("io", str(exc))
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
