"""Training loops: the dynamic-guidance trainer, the FGSM-RS and
uniform-guidance baselines, perturbation persistence and CO tracking."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .attacks import ddg_single_step, evaluate_robustness, parse_attack, radius
from .data import IndexedDataset, augment_batch, batch_iterator, split_holdout
from .errors import ConfigError, NaNLossError, ValidationError
from .guidance import (
    BudgetVector,
    GuidanceConfig,
    adjust_supervision,
    allocate_budgets,
    batch_accuracy,
    loss_terms,
    rank_confidence,
    relax_labels,
    smoothness_weights,
    soft_cross_entropy,
    uniform_budgets,
)
from .models import bn_stats_frozen, make_optimizer, save_checkpoint

log = logging.getLogger(__name__)

TRAINER_KINDS = ("ddg", "fgsm_rs", "uniform_guidance")
SELECTION_ATTACK = "pgd10"


@dataclass(frozen=True)
class TrainPlan:
    epochs: int = 110
    lr: float = 0.1
    milestones: tuple = (100, 105)
    lr_decay: float = 0.1
    batch_size: int = 128
    kind: str = "ddg"
    disable_pba: bool = False
    disable_ssa: bool = False
    disable_gs: bool = False
    pos_scale: float = 1.0
    neg_scale: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epsilon: float | None = None  # fgsm_rs radius; None means xi_base
    augment: bool = True
    eval_attacks: tuple = ("pgd10",)
    eval_epsilon: float = 8 / 255
    eval_batch_size: int = 256

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        object.__setattr__(self, "eval_attacks", tuple(self.eval_attacks))
        if self.kind not in TRAINER_KINDS:
            raise ConfigError(f"unknown trainer kind {self.kind!r}; choose from {TRAINER_KINDS}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError(f"milestones must be strictly increasing, got {ms}")
        if ms and (ms[0] < 1 or ms[-1] >= self.epochs):
            raise ConfigError(f"milestones must lie in [1, epochs), got {ms}")
        if self.pos_scale < 0 or self.neg_scale < 0:
            raise ConfigError("pos_scale and neg_scale must be >= 0")
        if self.epsilon is not None and not 0 <= self.epsilon <= 1:
            raise ConfigError("epsilon must lie in [0, 1]")
        for name in self.eval_attacks:
            parse_attack(name, self.eval_epsilon)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``; decays after each milestone epoch."""
        return self.lr * self.lr_decay ** sum(epoch > m for m in self.milestones)


def check_compatible(plan: TrainPlan, cfg: GuidanceConfig):
    if plan.kind == "ddg" and not plan.disable_pba and cfg.tau1 >= plan.batch_size:
        raise ConfigError(f"tau1={cfg.tau1} must be smaller than batch_size={plan.batch_size}")


@dataclass
class MetricsRecord:
    epoch: int
    lr: float
    train_loss: float
    train_ce: float
    train_smo: float
    train_acc: float
    clean_acc: float
    robust: dict
    co_flag: bool = False
    wallclock: float = field(default=0.0, compare=False)

    def to_json(self) -> str:
        """One line for the metrics stream. Wallclock is kept out so that
        repeated runs produce identical bytes; it goes to the timing stream."""
        d = asdict(self)
        d.pop("wallclock")
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        return cls(**json.loads(line))


def detect_co(history, key: str = SELECTION_ATTACK, floor: float = 0.20,
              ratio: float = 0.5) -> list:
    """Flag epoch e when the best robust accuracy before e is at least ``floor``
    and the accuracy at e has fallen below ``ratio`` times that best."""
    flags, best = [], -math.inf
    for rec in history:
        acc = rec.robust[key] if isinstance(rec, MetricsRecord) else rec
        flags.append(best >= floor and acc < ratio * best)
        best = max(best, acc)
    return flags


class PerturbationStore:
    """Per-example perturbations carried across optimisation steps."""

    def __init__(self, ids, image_shape, xi_init: float, seed=0, cap: float | None = None):
        self.ids = np.sort(np.asarray(ids, dtype=np.int64))
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValidationError("store ids must be unique")
        rng = np.random.default_rng(seed)
        n = len(self.ids)
        self.deltas = rng.uniform(-xi_init, xi_init, size=(n, *image_shape)).astype(np.float32)
        self.xi = np.full(n, float(xi_init))
        self.cap = float(cap if cap is not None else xi_init)

    def _rows(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        rows = np.searchsorted(self.ids, ids)
        if (rows >= len(self.ids)).any() or (self.ids[np.minimum(rows, len(self.ids) - 1)] != ids).any():
            raise ValidationError("unknown example id in perturbation store lookup")
        return rows

    def read(self, ids, budgets=None) -> torch.Tensor:
        """Stored deltas for ``ids``, clipped to ``budgets`` (default: the radius
        used at the last write)."""
        rows = self._rows(ids)
        d = torch.from_numpy(self.deltas[rows].copy())
        bound = self.xi[rows] if budgets is None else np.asarray(budgets, dtype=np.float64)
        b = radius(torch.from_numpy(np.asarray(bound, dtype=np.float64)), d)
        return torch.minimum(torch.maximum(d, -b), b)

    def write(self, ids, deltas: torch.Tensor, budgets):
        rows = self._rows(ids)
        xi = np.asarray(budgets, dtype=np.float64)
        d = deltas.detach().to(torch.float32).numpy()
        peak = np.abs(d).reshape(len(rows), -1).max(axis=1)
        if (peak > xi + 1e-7).any() or (peak > self.cap + 1e-7).any():
            raise ValidationError("perturbation exceeds its budget")
        self.deltas[rows] = d
        self.xi[rows] = xi


@dataclass
class StepStats:
    loss: float
    ce: float
    smo: float
    acc: float
    size: int
    budgets: BudgetVector | None = None


class GuidanceOverride:
    """Hook points used by the ablation tooling. The default does nothing."""

    max_budget: float = 0.0

    def budgets(self, xi: torch.Tensor, confidences: torch.Tensor) -> torch.Tensor:
        return xi

    def targets(self, targets, probs, labels, confidences):
        return targets


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: list
    best_epoch: int
    best_score: float
    store: PerturbationStore | None = None


def _seeds(seed):
    ss = np.random.SeedSequence(seed)
    store, shuffle, augment, noise = ss.spawn(4)
    return {
        "store": store,
        "shuffle": shuffle.generate_state(1)[0],
        "augment": np.random.default_rng(augment),
        "noise": int(noise.generate_state(1)[0]),
    }


class Trainer:
    """Holds the mutable state of one training run (model, optimiser, store)."""

    def __init__(self, model, train_data: IndexedDataset, plan: TrainPlan,
                 cfg: GuidanceConfig | None = None, seed: int = 0,
                 override: GuidanceOverride | None = None):
        self.cfg = cfg or GuidanceConfig(num_classes=train_data.num_classes)
        if self.cfg.num_classes != train_data.num_classes:
            raise ConfigError(
                f"guidance num_classes={self.cfg.num_classes} but data has {train_data.num_classes}"
            )
        check_compatible(plan, self.cfg)
        self.model = model
        self.data = train_data
        self.plan = plan
        self.seed = seed
        self.override = override or GuidanceOverride()
        self.opt = make_optimizer(model, plan.lr, plan.momentum, plan.weight_decay)
        s = _seeds(seed)
        self._shuffle_seed = int(s["shuffle"])
        self._aug_rng = s["augment"]
        self._noise = torch.Generator().manual_seed(s["noise"])
        self.store = None
        if plan.kind != "fgsm_rs":
            cap = max(self.cfg.max_budget, self.override.max_budget)
            self.store = PerturbationStore(train_data.ids, train_data.image_shape,
                                           self.cfg.xi_base, s["store"], cap=cap)

    # -- one optimisation step ---------------------------------------------

    def _attack_pass(self, x, y, delta_init, keep_graph):
        """Forward at x + delta_init with BN stats frozen. Returns the input
        gradient of the hard-label CE and the softmax probabilities."""
        x_init = (x + delta_init).clamp(0, 1).requires_grad_(True)
        with bn_stats_frozen(self.model):
            logits = self.model(x_init)
        loss = F.cross_entropy(logits, y, reduction="sum")
        (g,) = torch.autograd.grad(loss, x_init, retain_graph=keep_graph)
        probs = F.softmax(logits, dim=1)
        return g, (probs if keep_graph else probs.detach())

    def _budgets(self, probs, y) -> tuple[BudgetVector, torch.Tensor]:
        plan, cfg = self.plan, self.cfg
        B = y.shape[0]
        conf = probs.detach().gather(1, y[:, None]).squeeze(1)
        if plan.kind == "fgsm_rs":
            base = plan.epsilon if plan.epsilon is not None else cfg.xi_base
            budgets = uniform_budgets(B, base)
        elif plan.kind == "ddg" and not plan.disable_pba and B > cfg.tau1:
            budgets = allocate_budgets(rank_confidence(probs.detach(), y), cfg)
        else:
            # uniform guidance, PBA disabled, or a ragged batch no larger than tau1
            budgets = uniform_budgets(B, cfg.xi_base)
        xi = self.override.budgets(budgets.xi, conf)
        return BudgetVector(xi), conf

    def _finish(self, loss, ce, smo, acc, B, budgets, where):
        if not torch.isfinite(loss):
            snap = {**where, "loss": float(loss.detach()), "ce": float(ce.detach()),
                    "smo": float(smo.detach())}
            raise NaNLossError(f"non-finite loss at epoch {where.get('epoch')} "
                               f"batch {where.get('batch')}", snap)
        self.opt.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.optimizer.step()
        return StepStats(float(loss.detach()), float(ce.detach()), float(smo.detach()), acc, B, budgets)

    def step(self, ids, x, y, where=None) -> StepStats:
        where = where or {}
        self.model.train()
        if self.plan.kind == "fgsm_rs":
            return self._fgsm_rs_step(x, y, where)
        if self.plan.kind == "uniform_guidance":
            return self._uniform_step(ids, x, y, where)
        return self._ddg_step(ids, x, y, where)

    def _ddg_step(self, ids, x, y, where):
        plan, cfg = self.plan, self.cfg
        B, L = y.shape[0], cfg.num_classes
        use_gs = not plan.disable_gs
        delta_init = self.store.read(ids.numpy())
        g, init_probs = self._attack_pass(x, y, delta_init, keep_graph=use_gs)
        budgets, conf = self._budgets(init_probs, y)
        xi = budgets.xi.numpy()
        delta_init = self.store.read(ids.numpy(), xi)
        adv = ddg_single_step(self.model, x, y, delta_init, budgets, cfg.xi_base, grad=g,
                              compute_success=False)
        self.store.write(ids.numpy(), adv.deltas, xi)
        adv_probs = F.softmax(self.model(adv.adv_inputs), dim=1)
        acc = batch_accuracy(adv_probs, y)
        targets = relax_labels(y, cfg.gamma, L, dtype=adv_probs.dtype)
        if not plan.disable_ssa:
            targets = adjust_supervision(targets, y, adv_probs.detach(), cfg,
                                         plan.pos_scale, plan.neg_scale, acc=acc)
        targets = self.override.targets(targets, adv_probs.detach(), y, conf)
        if use_gs:
            wrong = adv_probs.detach().argmax(dim=1) != y
            weights = smoothness_weights(budgets, wrong, cfg).to(adv_probs.dtype)
            ce, smo = loss_terms(adv_probs, init_probs, targets, weights)
        else:
            ce, smo = soft_cross_entropy(adv_probs, targets), torch.zeros(())
        loss = ce + smo if use_gs else ce
        return self._finish(loss, ce, smo, acc, B, budgets, where)

    def _uniform_step(self, ids, x, y, where):
        cfg = self.cfg
        B = y.shape[0]
        delta_init = self.store.read(ids.numpy())
        g, init_probs = self._attack_pass(x, y, delta_init, keep_graph=False)
        budgets, conf = self._budgets(init_probs, y)
        xi = budgets.xi.numpy()
        delta_init = self.store.read(ids.numpy(), xi)
        adv = ddg_single_step(self.model, x, y, delta_init, budgets, cfg.xi_base, grad=g,
                              compute_success=False)
        self.store.write(ids.numpy(), adv.deltas, xi)
        adv_probs = F.softmax(self.model(adv.adv_inputs), dim=1)
        acc = batch_accuracy(adv_probs, y)
        targets = relax_labels(y, cfg.gamma, cfg.num_classes, dtype=adv_probs.dtype)
        targets = self.override.targets(targets, adv_probs.detach(), y, conf)
        ce = soft_cross_entropy(adv_probs, targets)
        return self._finish(ce, ce, torch.zeros(()), acc, B, budgets, where)

    def _fgsm_rs_step(self, x, y, where):
        B = y.shape[0]
        # confidences for the override hook come from the clean-input pass
        with torch.no_grad(), bn_stats_frozen(self.model):
            probs = F.softmax(self.model(x), dim=1) if self._needs_conf() else None
        if probs is None:
            base = self.plan.epsilon if self.plan.epsilon is not None else self.cfg.xi_base
            budgets = uniform_budgets(B, base)
        else:
            budgets, _ = self._budgets(probs, y)
        eps = radius(budgets.xi, x)
        delta_init = (torch.rand(x.shape, generator=self._noise, dtype=x.dtype) * 2 - 1) * eps
        g, _ = self._attack_pass(x, y, delta_init, keep_graph=False)
        delta = torch.minimum(torch.maximum(delta_init + eps * g.sign(), -eps), eps)
        logits = self.model((x + delta).clamp(0, 1))
        acc = float((logits.argmax(dim=1) == y).double().mean())
        ce = F.cross_entropy(logits, y)
        return self._finish(ce, ce, torch.zeros(()), acc, B, budgets, where)

    def _needs_conf(self):
        return type(self.override) is not GuidanceOverride

    # -- epochs --------------------------------------------------------------

    def run_epoch(self, epoch: int) -> dict:
        self.opt.set_lr(self.plan.lr_at(epoch))
        totals = {"loss": 0.0, "ce": 0.0, "smo": 0.0, "acc": 0.0}
        n = 0
        batches = batch_iterator(self.data, self.plan.batch_size, shuffle=True,
                                 seed=[self._shuffle_seed, epoch])
        for b, (ids, x, y) in enumerate(batches):
            if self.plan.augment:
                x = augment_batch(x, self._aug_rng)
            st = self.step(ids, x, y, {"epoch": epoch, "batch": b})
            for k in totals:
                totals[k] += getattr(st, k) * st.size
            n += st.size
        return {k: v / n for k, v in totals.items()}


def _eval_specs(plan: TrainPlan):
    names = list(plan.eval_attacks)
    if SELECTION_ATTACK not in names:
        names.insert(0, SELECTION_ATTACK)
    return [parse_attack(n, plan.eval_epsilon) for n in names]


def train(model, data: IndexedDataset, plan: TrainPlan, cfg: GuidanceConfig | None = None, *,
          holdout: IndexedDataset | None = None, holdout_fraction: float = 0.1, seed: int = 0,
          run_dir=None, override: GuidanceOverride | None = None, manifest: dict | None = None,
          on_epoch=None) -> TrainResult:
    """Train ``model`` with the trainer selected by ``plan.kind``.

    After every epoch the model is scored on the holdout split (clean and the
    configured attacks, PGD-10 always included); a ``MetricsRecord`` is
    appended to ``run_dir/metrics.jsonl`` and the best-by-PGD-10 and final
    checkpoints are written there.
    """
    if holdout is None:
        data, holdout = split_holdout(data, holdout_fraction, seed)
    if len(holdout) == 0:
        raise ConfigError("holdout split is empty; PGD-10 model selection needs data")
    trainer = Trainer(model, data, plan, cfg, seed=seed, override=override)
    specs = _eval_specs(plan)
    history, best_epoch, best_score = [], 0, -math.inf
    metrics_fh = timing_fh = None
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        metrics_fh = open(os.path.join(run_dir, "metrics.jsonl"), "w", encoding="utf-8")
        timing_fh = open(os.path.join(run_dir, "timings.jsonl"), "w", encoding="utf-8")
    extra = dict(manifest or {})
    try:
        for epoch in range(1, plan.epochs + 1):
            t0 = time.perf_counter()
            try:
                tr = trainer.run_epoch(epoch)
            except NaNLossError as exc:
                if run_dir is not None:
                    with open(os.path.join(run_dir, "nan_snapshot.json"), "w") as fh:
                        json.dump(exc.snapshot, fh, indent=2, sort_keys=True)
                raise
            scores = evaluate_robustness(model, holdout, specs, plan.eval_batch_size,
                                         seed=seed, epoch=epoch)
            rec = MetricsRecord(
                epoch=epoch, lr=trainer.opt.learning_rate, train_loss=tr["loss"],
                train_ce=tr["ce"], train_smo=tr["smo"], train_acc=tr["acc"],
                clean_acc=scores.pop("clean"), robust=scores,
                wallclock=time.perf_counter() - t0,
            )
            history.append(rec)
            rec.co_flag = detect_co(history)[-1]
            log.info("epoch %d  loss %.4f  clean %.4f  %s %.4f%s", epoch, rec.train_loss,
                     rec.clean_acc, SELECTION_ATTACK, rec.robust[SELECTION_ATTACK],
                     "  [CO]" if rec.co_flag else "")
            if metrics_fh is not None:
                metrics_fh.write(rec.to_json() + "\n")
                metrics_fh.flush()
                timing_fh.write(json.dumps({"epoch": epoch, "wallclock": rec.wallclock}) + "\n")
                timing_fh.flush()
            score = rec.robust[SELECTION_ATTACK]
            if score > best_score:
                best_epoch, best_score = epoch, score
                if run_dir is not None:
                    save_checkpoint(os.path.join(run_dir, "best.ckpt"), model, trainer.opt,
                                    epoch=epoch, tag="best", metrics=json.loads(rec.to_json()),
                                    **extra)
            if on_epoch is not None:
                on_epoch(rec)
        if run_dir is not None:
            save_checkpoint(os.path.join(run_dir, "final.ckpt"), model, trainer.opt,
                            epoch=plan.epochs, tag="final",
                            metrics=json.loads(history[-1].to_json()), **extra)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
            timing_fh.close()
    return TrainResult(model, history, best_epoch, best_score, trainer.store)


def train_ddg(model, data, plan: TrainPlan, cfg: GuidanceConfig, **kwargs) -> TrainResult:
    if plan.kind != "ddg":
        raise ConfigError(f"train_ddg needs plan.kind='ddg', got {plan.kind!r}")
    return train(model, data, plan, cfg, **kwargs)


def train_baseline(model, data, plan: TrainPlan, cfg: GuidanceConfig | None = None,
                   **kwargs) -> TrainResult:
    """FGSM-RS (fresh uniform start, step = radius, hard labels) or uniform
    guidance (inherited start, fixed xi_base, relaxed labels, no regulariser)."""
    if plan.kind not in ("fgsm_rs", "uniform_guidance"):
        raise ConfigError(f"train_baseline needs a baseline kind, got {plan.kind!r}")
    return train(model, data, plan, cfg, **kwargs)


def read_metrics(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [MetricsRecord.from_json(line) for line in fh if line.strip()]
