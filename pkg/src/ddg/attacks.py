"""L-inf attacks: the budget-clipped single-step training attack and the
FGSM / BIM / PGD / CW-margin evaluation battery."""
from __future__ import annotations

import re
import zlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ValidationError
from .guidance import BudgetVector
from .models import bn_stats_frozen

ATTACK_KINDS = ("fgsm", "bim", "pgd", "cw_pgd")


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    num_steps: int = 10
    random_start: bool = True
    name: str | None = None

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}; choose from {ATTACK_KINDS}")
        if self.kind == "fgsm" and self.num_steps != 1:
            raise ConfigError("fgsm takes exactly one step")
        if self.num_steps < 1:
            raise ConfigError("num_steps must be >= 1")
        if self.step_size <= 0:
            raise ConfigError("step_size must be > 0")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")

    @property
    def label(self) -> str:
        return self.name or f"{self.kind}{self.num_steps}"

    def describe(self) -> dict:
        return {"name": self.label, "kind": self.kind, "epsilon": self.epsilon,
                "step_size": self.step_size, "num_steps": self.num_steps,
                "random_start": self.random_start}


def parse_attack(name: str, epsilon: float = 8 / 255) -> AttackSpec:
    """Build a spec from a short name: ``fgsm``, ``bim``, ``pgd10``, ``cw``, ``cw20`` ...

    Single-step attacks use step ``epsilon``; iterative ones use ``epsilon / 4``
    (2/255 at the default 8/255).
    """
    key = name.strip().lower()
    if key == "fgsm":
        # a zero radius still needs a positive step; the projection zeroes it
        return AttackSpec("fgsm", epsilon, epsilon if epsilon > 0 else 8 / 255, 1, False,
                          name="fgsm")
    m = re.fullmatch(r"(bim|pgd|cw)(\d*)", key)
    if not m:
        raise ConfigError(f"cannot parse attack name {name!r}")
    family, steps = m.group(1), int(m.group(2) or 10)
    step = epsilon / 4 if epsilon > 0 else 2 / 255
    if family == "bim":
        return AttackSpec("bim", epsilon, step, steps, False, name=key)
    if family == "pgd":
        return AttackSpec("pgd", epsilon, step, steps, True, name=key)
    return AttackSpec("cw_pgd", epsilon, step, steps, True, name=key)


@dataclass
class AdversarialBatch:
    adv_inputs: torch.Tensor
    deltas: torch.Tensor
    success_mask: torch.Tensor | None = None


def _per_sample(v, x: torch.Tensor) -> torch.Tensor:
    v = torch.as_tensor(v, dtype=x.dtype)
    if v.ndim == 0:
        return v
    return v.view(-1, *([1] * (x.ndim - 1)))


def radius(eps, x: torch.Tensor) -> torch.Tensor:
    """``eps`` cast to ``x.dtype``, rounded toward zero so that the cast radius
    never exceeds the real-valued one; shaped to broadcast per sample."""
    exact = torch.as_tensor(eps, dtype=torch.float64)
    r = exact.to(x.dtype)
    r = torch.where(r.to(torch.float64) > exact, torch.nextafter(r, torch.zeros_like(r)), r)
    return _per_sample(r, x)


def project(delta, x, eps):
    """Clip ``delta`` into the eps-ball intersected with the pixel box."""
    eps = radius(eps, x)
    lo = torch.maximum(-eps, -x)
    hi = torch.minimum(eps, 1 - x)
    return torch.minimum(torch.maximum(delta, lo), hi)


def margin_loss(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Per-sample ``max_{c != y} z_c - z_y``."""
    true = logits.gather(1, y[:, None]).squeeze(1)
    other = logits.clone()
    other[torch.arange(y.shape[0]), y] = -torch.inf
    return other.max(dim=1).values - true


def attack_loss(kind: str, logits, y):
    if kind == "cw_pgd":
        return margin_loss(logits, y)
    return F.cross_entropy(logits, y, reduction="none")


def _grad(model, x_in, y, kind):
    x_in = x_in.detach().requires_grad_(True)
    with bn_stats_frozen(model):
        loss = attack_loss(kind, model(x_in), y).sum()
    (g,) = torch.autograd.grad(loss, x_in)
    return g


@torch.no_grad()
def _predict(model, x):
    with bn_stats_frozen(model):
        return model(x).argmax(dim=1)


def ddg_single_step(model, x, y, delta_init, budgets: BudgetVector | torch.Tensor,
                    xi_base: float, grad: torch.Tensor | None = None,
                    compute_success: bool = True) -> AdversarialBatch:
    """Budget-clipped single-step attack:

        delta = clip(delta_init + max(xi_i, xi_base) * sign(g), -xi_i, xi_i)
        x'    = clip(x + delta, 0, 1)

    ``g`` is the cross-entropy gradient at ``x + delta_init``; pass ``grad`` to
    reuse one already computed by the caller.
    """
    xi = budgets.xi if isinstance(budgets, BudgetVector) else torch.as_tensor(budgets)
    if xi.ndim != 1 or xi.shape[0] != x.shape[0]:
        raise ValidationError(f"budget vector length {tuple(xi.shape)} does not match batch {x.shape[0]}")
    if delta_init.shape != x.shape:
        raise ValidationError("delta_init must have the same shape as x")
    if grad is None:
        grad = _grad(model, (x + delta_init).clamp(0, 1), y, "fgsm")
    step = _per_sample(torch.clamp(xi.to(torch.float64), min=xi_base).to(x.dtype), x)
    bound = radius(xi, x)
    delta = torch.minimum(torch.maximum(delta_init + step * grad.sign(), -bound), bound)
    adv = (x + delta).clamp(0, 1)
    success = (_predict(model, adv) != y) if compute_success else None
    return AdversarialBatch(adv.detach(), delta.detach(), success)


def run_attack(model, x, y, spec: AttackSpec, init: torch.Tensor | None = None,
               generator: torch.Generator | None = None,
               trace: list | None = None) -> AdversarialBatch:
    """Run one evaluation attack.

    ``init`` is a tensor in [-1, 1] scaled by epsilon for the random start;
    without it the start is drawn from ``generator``. If ``trace`` is a list,
    the per-sample objective after every step is appended to it.
    """
    if spec.kind not in ATTACK_KINDS:
        raise ConfigError(f"unknown attack kind {spec.kind!r}")
    x = x.detach()
    eps = spec.epsilon
    if spec.random_start and spec.kind in ("pgd", "cw_pgd") and eps > 0:
        if init is None:
            init = torch.rand(x.shape, generator=generator, dtype=x.dtype) * 2 - 1
        delta = project(eps * init.to(x.dtype), x, eps)
    else:
        delta = torch.zeros_like(x)
    for _ in range(spec.num_steps):
        g = _grad(model, x + delta, y, spec.kind)
        delta = project(delta + spec.step_size * g.sign(), x, eps)
        if trace is not None:
            with torch.no_grad(), bn_stats_frozen(model):
                trace.append(attack_loss(spec.kind, model((x + delta).clamp(0, 1)), y))
    adv = (x + delta).clamp(0, 1)
    return AdversarialBatch(adv, delta, _predict(model, adv) != y)


def start_noise(shape, ids, seed: int, attack_name: str, epoch: int = 0) -> torch.Tensor:
    """Random-start noise in [-1, 1], seeded per (attack, epoch, sample id).

    Independent of batch composition, so results do not depend on eval batch size.
    """
    key = zlib.crc32(attack_name.encode())
    out = np.empty((len(ids), *shape), dtype=np.float64)
    for k, i in enumerate(ids):
        rng = np.random.default_rng([int(seed), key, int(epoch), int(i)])
        out[k] = rng.uniform(-1.0, 1.0, size=shape)
    return torch.from_numpy(out)


def evaluate_robustness(model, data, specs, batch_size: int = 256, seed: int = 0,
                        epoch: int = 0) -> dict:
    """Clean accuracy plus robust accuracy for every spec, keyed by attack label.

    ``data`` is an :class:`~ddg.data.IndexedDataset`. The model is evaluated
    in inference mode and its previous mode is restored afterwards.
    """
    if len(data) == 0:
        raise ValidationError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    correct = {"clean": 0}
    for s in specs:
        correct[s.label] = 0
    try:
        for start in range(0, len(data), batch_size):
            sl = slice(start, start + batch_size)
            x = torch.from_numpy(data.images[sl]).to(dtype)
            y = torch.from_numpy(data.labels[sl]).long()
            ids = data.ids[sl]
            correct["clean"] += int((_predict(model, x) == y).sum())
            for s in specs:
                init = None
                if s.random_start:
                    init = start_noise(x.shape[1:], ids, seed, s.label, epoch)
                adv = run_attack(model, x, y, s, init=init)
                correct[s.label] += int((~adv.success_mask).sum())
    finally:
        model.train(was_training)
    return {k: v / len(data) for k, v in correct.items()}
