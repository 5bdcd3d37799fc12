"""Command-line entry point: ``ddg train | eval | ablate | report``.

Exit codes: 0 success, 1 other failure, 2 configuration/data error,
3 training aborted on a non-finite loss, 4 sweep finished with failed runs.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import torch
import yaml

from . import ablation, reporting
from .attacks import evaluate_robustness, parse_attack
from .config import RunConfig, build_config, load_config, save_resolved
from .data import load_cifar10, make_synthetic, split_holdout
from .errors import ConfigError, DDGError, IngestionError, NaNLossError
from .models import build_model, load_checkpoint, param_count, read_manifest
from .training import read_metrics, train

log = logging.getLogger("ddg")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NAN, EXIT_PARTIAL = 0, 1, 2, 3, 4
DEFAULT_EVAL = "pgd10,pgd20,pgd50,fgsm,bim,cw"


class PartialSweepFailure(DDGError):
    pass


def load_data(cfg: RunConfig):
    """Return ``(train, holdout, test)`` for the configured source."""
    d = cfg.data
    if d.source == "cifar10":
        full = load_cifar10(d.path, d.limit, "train")
        test = load_cifar10(d.path, d.test_limit, "test")
    else:
        total = make_synthetic(d.num_samples + d.test_samples, d.num_classes, d.geometry,
                               seed=d.seed, image_shape=d.image_shape)
        full = total.subset(range(d.num_samples), "train")
        test = total.subset(range(d.num_samples, len(total)), "test")
    train_set, holdout = split_holdout(full, d.holdout_fraction, seed=d.seed)
    return train_set, holdout, test


def _new_model(cfg: RunConfig, image_shape):
    return build_model(cfg.model.arch, cfg.guidance.num_classes, image_shape,
                       normalize=cfg.model.normalize)


def _deterministic():
    torch.use_deterministic_algorithms(True)


def cmd_train(config_path, overrides=(), out=None) -> str:
    cfg = load_config(config_path, overrides)
    run_dir = out or cfg.run_dir()
    os.makedirs(run_dir, exist_ok=True)
    save_resolved(cfg, os.path.join(run_dir, "config.resolved.yaml"))
    train_set, holdout, _ = load_data(cfg)
    _deterministic()
    torch.manual_seed(cfg.seed)
    model = _new_model(cfg, train_set.image_shape)
    log.info("training %s (%d params) with %s on %d examples", cfg.model.arch,
             param_count(model), cfg.train.kind, len(train_set))
    result = train(model, train_set, cfg.train, cfg.guidance, holdout=holdout, seed=cfg.seed,
                   run_dir=run_dir, manifest={"config": cfg.to_dict()})
    rows = reporting.best_final_rows(result.history)
    print(reporting.format_table(rows))
    print(f"run directory: {run_dir}")
    return run_dir


def cmd_eval(checkpoint, attacks=DEFAULT_EVAL, config_path=None, seed=0, out=None) -> list:
    manifest = read_manifest(checkpoint)
    if config_path is not None:
        cfg = load_config(config_path)
        if cfg.model.arch != manifest["arch"]:
            raise ConfigError(
                f"checkpoint architecture {manifest['arch']!r} does not match "
                f"config architecture {cfg.model.arch!r}"
            )
    elif "config" in manifest:
        cfg = build_config(manifest["config"])
    else:
        raise ConfigError("checkpoint has no embedded config; pass --config")
    model, manifest, _ = load_checkpoint(checkpoint)
    if cfg.guidance.num_classes != manifest["num_classes"]:
        raise ConfigError("checkpoint and config disagree on the number of classes")
    _, _, test = load_data(cfg)
    names = [a for a in (attacks or "").split(",") if a.strip()]
    specs = [parse_attack(a, cfg.train.eval_epsilon) for a in names]
    _deterministic()
    scores = evaluate_robustness(model, test, specs, cfg.train.eval_batch_size, seed=seed)
    record = {"checkpoint": os.path.abspath(checkpoint), "epoch": manifest.get("epoch"),
              "seed": seed, "clean": scores["clean"],
              "attacks": [{**s.describe(), "accuracy": scores[s.label]} for s in specs]}
    rows = [{"attack": "clean", "epsilon": "", "steps": "", "step_size": "",
             "accuracy": record["clean"]}]
    rows += [{"attack": a["name"], "epsilon": f"{a['epsilon'] * 255:g}/255",
              "steps": a["num_steps"], "step_size": f"{a['step_size'] * 255:g}/255",
              "accuracy": a["accuracy"]} for a in record["attacks"]]
    out = out or os.path.dirname(os.path.abspath(checkpoint))
    os.makedirs(out, exist_ok=True)
    stem = os.path.join(out, os.path.splitext(os.path.basename(checkpoint))[0] + ".eval")
    with open(stem + ".json", "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
    reporting.write_csv(stem + ".csv", rows)
    table = reporting.format_table(rows)
    with open(stem + ".txt", "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    print(table)
    return rows


def load_sweep(path):
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    seeds = None
    if isinstance(doc, dict):
        unknown = set(doc) - {"entries", "seeds"}
        if unknown:
            raise ConfigError(f"sweep spec: unknown key(s) {sorted(unknown)}")
        seeds = doc.get("seeds")
        doc = doc.get("entries", [])
    if not isinstance(doc, list):
        raise ConfigError("sweep spec must be a list of entries or {entries: [...], seeds: [...]}")
    from .config import parse_number

    items = []
    for item in doc:
        if not isinstance(item, dict):
            raise ConfigError("each sweep entry must be a mapping")
        items.append({k: (parse_number(v) if k in ("budget_override", "beta1", "beta2") else v)
                      for k, v in item.items()})
    return ablation.expand_sweep(items), seeds


def cmd_ablate(config_path, sweep_path, overrides=(), out=None, dry_run=False,
               workers=1, seeds=None):
    cfg = load_config(config_path, overrides)
    entries, spec_seeds = load_sweep(sweep_path)
    seeds = list(seeds or spec_seeds or [cfg.seed])
    out = out or os.path.join(cfg.run_dir(), "ablate")
    planned = [{"run": e.label, "seed": s, **ablation.entry_dict(e)} for e in entries for s in seeds]
    if dry_run:
        print(reporting.format_table(planned))
        print(f"{len(planned)} run(s) planned; output directory: {out}")
        return None
    os.makedirs(out, exist_ok=True)
    save_resolved(cfg, os.path.join(out, "config.resolved.yaml"))
    train_set, holdout, _ = load_data(cfg)
    _deterministic()

    def factory():
        return _new_model(cfg, train_set.image_shape)

    report = ablation.run_sweep(cfg.train, entries, cfg=cfg.guidance, train_data=train_set,
                                holdout=holdout, model_factory=factory, seeds=seeds,
                                out_dir=os.path.join(out, "runs"), workers=workers)
    ablation.write_sweep(report, out)
    for run in report.runs:
        stem = os.path.join(out, "trajectories", f"{run.entry.label}_s{run.seed}")
        os.makedirs(os.path.dirname(stem), exist_ok=True)
        reporting.write_csv(stem + ".csv", run.trajectory)
        if run.trajectory:
            reporting.plot_trajectories(run.trajectory, stem + ".png",
                                        title=f"{run.entry.label} (seed {run.seed})")
    print(reporting.format_table(report.summary()))
    if report.failed:
        raise PartialSweepFailure(f"{len(report.failed)} of {len(report.runs)} run(s) failed")
    return report


def cmd_report(run_dir) -> list:
    history = read_metrics(os.path.join(run_dir, "metrics.jsonl"))
    if not history:
        raise ConfigError(f"{run_dir} has no metrics records")
    epochs = reporting.metrics_rows(history)
    summary = reporting.best_final_rows(history)
    reporting.write_csv(os.path.join(run_dir, "report.csv"), epochs)
    text = (reporting.format_table(epochs) + "\n\n" + reporting.format_table(summary))
    with open(os.path.join(run_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    print(text)
    return summary


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one configured run")
    t.add_argument("config")
    t.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config value (dotted key)")
    t.add_argument("--out", help="run directory (default: <output root>/<name>)")

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("checkpoint")
    e.add_argument("--attacks", default=DEFAULT_EVAL,
                   help=f"comma-separated attack names (default: {DEFAULT_EVAL})")
    e.add_argument("--config", help="config to take data settings from")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")

    a = sub.add_parser("ablate", help="run a confidence-group override sweep")
    a.add_argument("config")
    a.add_argument("--sweep", required=True)
    a.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    a.add_argument("--out")
    a.add_argument("--seeds", type=lambda s: [int(x) for x in s.split(",")])
    a.add_argument("--workers", type=int, default=1)
    a.add_argument("--dry-run", action="store_true")

    r = sub.add_parser("report", help="tabulate a run directory's metrics")
    r.add_argument("run_dir")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "train":
            cmd_train(args.config, args.overrides, args.out)
        elif args.command == "eval":
            cmd_eval(args.checkpoint, args.attacks, args.config, args.seed, args.out)
        elif args.command == "ablate":
            cmd_ablate(args.config, args.sweep, args.overrides, args.out, args.dry_run,
                       args.workers, args.seeds)
        else:
            cmd_report(args.run_dir)
    except (ConfigError, IngestionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NaNLossError as exc:
        print(f"error: {exc}\n{json.dumps(exc.snapshot, sort_keys=True)}", file=sys.stderr)
        return EXIT_NAN
    except PartialSweepFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    except DDGError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
