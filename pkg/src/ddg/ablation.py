"""Confidence-group ablations: partition each batch into confidence blocks
and override the perturbation budget or the soft label of one block."""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .errors import ConfigError, NaNLossError, ValidationError
from .guidance import GuidanceConfig, most_probable_wrong_class
from .training import GuidanceOverride, TrainPlan, train

log = logging.getLogger(__name__)

SWEEP_ATTACKS = ("pgd10", "cw10")


@dataclass(frozen=True)
class GroupSpec:
    num_groups: int = 4
    selected_group: int = 0

    def __post_init__(self):
        if self.num_groups < 2:
            raise ConfigError("num_groups must be >= 2")
        if not 0 <= self.selected_group < self.num_groups:
            raise ConfigError(f"selected_group must lie in [0, {self.num_groups})")


@dataclass(frozen=True)
class OverrideSpec:
    budget_override: float | None = None
    beta1: float = 0.0
    beta2: float = 0.0

    def __post_init__(self):
        if self.budget_override is not None and not 0 < self.budget_override <= 1:
            raise ConfigError("budget_override must lie in (0, 1]")
        if not (np.isfinite(self.beta1) and np.isfinite(self.beta2)):
            raise ConfigError("beta1 and beta2 must be finite")

    @property
    def touches_labels(self) -> bool:
        return self.beta1 != 0 or self.beta2 != 0


def group_sizes(batch_size: int, num_groups: int) -> list:
    base, extra = divmod(batch_size, num_groups)
    return [base + (g < extra) for g in range(num_groups)]


def partition_groups(confidences, spec: GroupSpec) -> torch.Tensor:
    """Group id per sample. Group 0 holds the most confident block; blocks are
    contiguous in descending confidence, ties keep batch order, and sizes
    differ by at most one."""
    conf = torch.as_tensor(confidences)
    B = conf.shape[0]
    if B < spec.num_groups:
        raise ValidationError(f"batch of {B} cannot be split into {spec.num_groups} groups")
    order = torch.sort(conf, descending=True, stable=True).indices
    block = torch.repeat_interleave(torch.arange(spec.num_groups),
                                    torch.tensor(group_sizes(B, spec.num_groups)))
    groups = torch.empty(B, dtype=torch.long)
    groups[order] = block
    return groups


def apply_budget_override(budgets, groups, spec: GroupSpec, ov: OverrideSpec) -> torch.Tensor:
    """Set the selected group's budget to ``ov.budget_override``; others unchanged.

    ``budgets`` may be a per-sample vector or a scalar (uniform budget).
    """
    xi = torch.as_tensor(budgets, dtype=torch.float64)
    if xi.ndim == 0:
        xi = xi.expand(groups.shape[0])
    if ov.budget_override is None:
        return xi.clone()
    out = xi.clone()
    out[groups == spec.selected_group] = ov.budget_override
    return out


def apply_label_override(relaxed, probs, labels, groups, spec: GroupSpec,
                         ov: OverrideSpec) -> torch.Tensor:
    """Selected rows become ``relaxed + beta1 * onehot(y) + beta2 * onehot(y_m)``
    with ``y_m`` the most probable wrong class under ``probs``."""
    out = relaxed.clone()
    if not ov.touches_labels:
        return out
    rows = (groups == spec.selected_group).nonzero().flatten()
    labels = torch.as_tensor(labels).long()
    y_m = most_probable_wrong_class(probs, labels)
    out[rows, labels[rows]] += ov.beta1
    out[rows, y_m[rows]] += ov.beta2
    return out


class GroupOverride(GuidanceOverride):
    """Injects one (GroupSpec, OverrideSpec) pair into a training run."""

    def __init__(self, group: GroupSpec, ov: OverrideSpec):
        self.group = group
        self.ov = ov
        self.max_budget = ov.budget_override or 0.0

    def budgets(self, xi, confidences):
        if self.ov.budget_override is None:
            return xi
        return apply_budget_override(xi, partition_groups(confidences, self.group),
                                     self.group, self.ov)

    def targets(self, targets, probs, labels, confidences):
        if not self.ov.touches_labels:
            return targets
        return apply_label_override(targets, probs, labels,
                                    partition_groups(confidences, self.group),
                                    self.group, self.ov)


@dataclass(frozen=True)
class SweepEntry:
    group: GroupSpec
    override: OverrideSpec
    name: str = ""

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        parts = [f"g{self.group.selected_group}of{self.group.num_groups}"]
        if self.override.budget_override is not None:
            parts.append(f"xi{self.override.budget_override * 255:g}")
        if self.override.touches_labels:
            parts.append(f"b1{self.override.beta1:g}_b2{self.override.beta2:g}")
        return "_".join(parts)


@dataclass
class RunReport:
    entry: SweepEntry
    seed: int
    status: str
    trajectory: list = field(default_factory=list)
    error: str | None = None

    @property
    def co_detected(self) -> bool:
        return any(row["co_flag"] for row in self.trajectory)

    def summary(self) -> dict:
        row = {"run": self.entry.label, "group": self.entry.group.selected_group,
               "num_groups": self.entry.group.num_groups, "seed": self.seed,
               "status": self.status, "co": self.co_detected}
        if self.trajectory:
            last = self.trajectory[-1]
            best = max(self.trajectory, key=lambda r: r["pgd10"])
            row.update(final_clean=last["clean"], final_pgd10=last["pgd10"],
                       final_cw10=last.get("cw10"), best_pgd10=best["pgd10"],
                       best_epoch=best["epoch"])
        return row


@dataclass
class SweepReport:
    runs: list = field(default_factory=list)

    @property
    def failed(self) -> list:
        return [r for r in self.runs if r.status != "ok"]

    def records(self):
        """One record per (run, epoch)."""
        for r in self.runs:
            for row in r.trajectory:
                yield {"run": r.entry.label, "group": r.entry.group.selected_group,
                       "seed": r.seed, **row}

    def summary(self) -> list:
        return sorted((r.summary() for r in self.runs),
                      key=lambda s: (s["group"], s["run"], s["seed"]))


def expand_sweep(items) -> list:
    """Turn sweep-spec dicts into entries.

    ``selected_group: "all"`` expands into one entry per group.
    """
    entries = []
    for item in items:
        item = dict(item)
        unknown = set(item) - {"num_groups", "selected_group", "budget_override",
                               "beta1", "beta2", "name"}
        if unknown:
            raise ConfigError(f"unknown sweep keys: {sorted(unknown)}")
        G = int(item.get("num_groups", 4))
        sel = item.get("selected_group", 0)
        groups = range(G) if sel == "all" else [int(sel)]
        ov = OverrideSpec(item.get("budget_override"), float(item.get("beta1", 0.0)),
                          float(item.get("beta2", 0.0)))
        for g in groups:
            name = item.get("name", "")
            if name and sel == "all":
                name = f"{name}_g{g}"
            entries.append(SweepEntry(GroupSpec(G, g), ov, name))
    return entries


def _run_one(args):
    entry, seed, base_plan, cfg, train_data, holdout, model_factory, out_dir = args
    torch.manual_seed(seed)
    model = model_factory()
    run_dir = None
    if out_dir is not None:
        run_dir = os.path.join(out_dir, f"{entry.label}_s{seed}")
    traj = []

    def collect(rec):
        traj.append({"epoch": rec.epoch, "clean": rec.clean_acc,
                     "pgd10": rec.robust["pgd10"], "cw10": rec.robust.get("cw10"),
                     "train_loss": rec.train_loss, "co_flag": rec.co_flag})

    try:
        train(model, train_data, base_plan, cfg, holdout=holdout, seed=seed, run_dir=run_dir,
              override=GroupOverride(entry.group, entry.override), on_epoch=collect)
    except NaNLossError as exc:
        log.warning("run %s seed %d aborted: %s", entry.label, seed, exc)
        return RunReport(entry, seed, "failed", traj, str(exc))
    return RunReport(entry, seed, "ok", traj)


def run_sweep(base_plan: TrainPlan, sweep, *, cfg: GuidanceConfig, train_data, holdout,
              model_factory, seeds=(0,), out_dir=None, workers: int = 1) -> SweepReport:
    """Train one run per (entry, seed) with the entry's override injected.

    Runs that abort on a non-finite loss are reported as failed; the sweep
    carries on. ``workers > 1`` runs entries in separate processes.
    """
    entries = [e if isinstance(e, SweepEntry) else SweepEntry(*e) for e in sweep]
    plan = replace(base_plan, eval_attacks=tuple(dict.fromkeys(
        (*base_plan.eval_attacks, *SWEEP_ATTACKS))))
    jobs = [(e, s, plan, cfg, train_data, holdout, model_factory, out_dir)
            for e in entries for s in seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run_one, jobs))
    else:
        runs = [_run_one(j) for j in jobs]
    return SweepReport(runs)


def write_sweep(report: SweepReport, out_dir) -> dict:
    """Persist the per-(run, epoch) stream and the per-group summary."""
    from .reporting import write_csv, format_table

    os.makedirs(out_dir, exist_ok=True)
    paths = {"stream": os.path.join(out_dir, "sweep.jsonl"),
             "summary_csv": os.path.join(out_dir, "summary.csv"),
             "summary_txt": os.path.join(out_dir, "summary.txt")}
    with open(paths["stream"], "w", encoding="utf-8") as fh:
        for rec in report.records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    rows = report.summary()
    write_csv(paths["summary_csv"], rows)
    with open(paths["summary_txt"], "w", encoding="utf-8") as fh:
        fh.write(format_table(rows) + "\n")
    return paths


def entry_dict(entry: SweepEntry) -> dict:
    return {"name": entry.label, **asdict(entry.group), **asdict(entry.override)}
