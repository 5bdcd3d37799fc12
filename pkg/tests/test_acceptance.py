"""Acceptance suite: one ``criterion`` marker per acceptance item.

Run ``pytest tests/test_acceptance.py`` (or this file directly); the terminal
summary prints one PASS/FAIL line per criterion. The two desk-scale CIFAR-10
checks read the binary batches from ``$DDG_CIFAR10_DIR`` and fail when it is
unset or empty.
"""
import os
import sys
from dataclasses import asdict

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from ddg.ablation import expand_sweep, run_sweep
from ddg.attacks import AttackSpec, ddg_single_step, parse_attack, run_attack
from ddg.cli import main
from ddg.data import linear_margin_model, load_cifar10, make_synthetic, split_holdout
from ddg.guidance import (
    BudgetVector,
    GuidanceConfig,
    adjust_supervision,
    allocate_budgets,
    relax_labels,
    total_loss,
)
from ddg.models import LinearClassifier, build_model, input_gradient
from ddg.training import TrainPlan, train

CIFAR_ENV = "DDG_CIFAR10_DIR"
U = 1 / 255


# -- budget formula ---------------------------------------------------------------

@pytest.mark.criterion("budget formula fidelity")
def test_budget_interval_endpoints():
    cfg = GuidanceConfig()
    xi = allocate_budgets(torch.arange(1, 129), cfg).xi
    assert abs(float(xi.min()) - 4 * U) <= 1e-6 * U, f"min = {float(xi.min()) / U:.9f}/255"
    assert abs(float(xi.max()) - 12 * U) <= 1e-6 * U, f"max = {float(xi.max()) / U:.9f}/255"


# -- supervision algebra ----------------------------------------------------------

@pytest.mark.criterion("supervision algebra")
def test_supervision_row_sums():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(10_000):
        gamma = float(rng.uniform(1e-3, 1.0))
        L = int(rng.integers(2, 101))
        B = int(rng.integers(1, 9))
        labels = torch.from_numpy(rng.integers(0, L, size=B))
        relaxed = relax_labels(labels, gamma, L, torch.float64)
        probs = torch.softmax(torch.from_numpy(rng.standard_normal((B, L)) * 3), 1)
        acc = float((probs.argmax(1) == labels).double().mean())
        cfg = GuidanceConfig(gamma=gamma, num_classes=L)
        out = adjust_supervision(relaxed, labels, probs, cfg, acc=acc)
        wrong = probs.argmax(1) != labels
        want = torch.where(wrong, 1 + gamma * (1 - acc) - 1 / L, torch.ones(B, dtype=torch.float64))
        worst = max(worst, float((relaxed.sum(1) - 1).abs().max()),
                    float((out.sum(1) - want).abs().max()))
    assert worst <= 1e-9, worst


# -- gradient oracle ---------------------------------------------------------------

def _central_fd(f, x, h=1e-6):
    g = torch.zeros_like(x)
    flat = x.view(-1)
    with torch.no_grad():
        for k in range(flat.numel()):
            old = float(flat[k])
            flat[k] = old + h
            up = float(f(x))
            flat[k] = old - h
            down = float(f(x))
            flat[k] = old
            g.view(-1)[k] = (up - down) / (2 * h)
    return g


def _rel(a, b):
    return float((a - b).norm() / b.norm())


def _loss_grad_case(model, x, y, L):
    """Analytic and FD gradients of total_loss w.r.t. the adversarial input."""
    gen = torch.Generator().manual_seed(1)
    with torch.no_grad():
        init = torch.softmax(model(x + 0.01 * torch.randn(x.shape, generator=gen,
                                                             dtype=x.dtype)), 1)
    targets = relax_labels(y, 0.9, L, torch.float64)
    targets[0, (int(y[0]) + 1) % L] -= 1 / L
    w = 1 + torch.rand(x.shape[0], generator=gen, dtype=torch.float64)

    def f(z):
        with torch.no_grad():
            return total_loss(torch.softmax(model(z), 1), init, targets, w)

    z = x.clone().requires_grad_(True)
    (ga,) = torch.autograd.grad(total_loss(torch.softmax(model(z), 1), init, targets, w), z)
    return ga, _central_fd(f, x.clone())


@pytest.mark.criterion("gradient oracle")
def test_gradients_tiny_cnn():
    torch.manual_seed(0)
    model = build_model("tiny-cnn", 3, (1, 4, 4)).double().eval()
    x = torch.rand(4, 1, 4, 4, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 1])
    ce = lambda z: F.cross_entropy(model(z), y)  # noqa: E731
    assert _rel(input_gradient(model, x, y), _central_fd(ce, x.clone())) < 1e-4
    ga, fd = _loss_grad_case(model, x, y, 3)
    assert _rel(ga, fd) < 1e-4


@pytest.mark.criterion("gradient oracle")
def test_gradients_linear():
    torch.manual_seed(1)
    model = LinearClassifier(4, (1, 3, 3), weight=torch.randn(4, 9)).double()
    x = torch.rand(5, 1, 3, 3, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 3, 1])
    ce = lambda z: F.cross_entropy(model(z), y)  # noqa: E731
    assert _rel(input_gradient(model, x, y), _central_fd(ce, x.clone())) < 1e-6
    ga, fd = _loss_grad_case(model, x, y, 4)
    assert _rel(ga, fd) < 1e-6


# -- attack oracle -------------------------------------------------------------------

@pytest.fixture(scope="module")
def margin_data():
    return make_synthetic(200, 2, "linear_margin", seed=3, image_shape=(1, 6, 6),
                          margin=0.03, spread=0.06)


@pytest.mark.criterion("attack oracle")
def test_pgd_at_least_fgsm_closed_form(margin_data):
    model = linear_margin_model(margin_data)
    x = torch.from_numpy(margin_data.images).double()
    y = torch.from_numpy(margin_data.labels).long()
    W = torch.as_tensor(margin_data.meta["weight"])
    eps = 8 * U
    # closed form: every pixel moves eps along sign(w_other - w_y), then the box clip
    s = torch.sign(W[1 - y] - W[y]).view_as(x)
    x_fgsm = (x + eps * s).clamp(0, 1)
    fgsm_loss = F.cross_entropy(model(x_fgsm), y, reduction="none")
    gen = torch.Generator().manual_seed(0)
    adv = run_attack(model, x, y, parse_attack("pgd10", eps), generator=gen)
    with torch.no_grad():
        pgd_loss = F.cross_entropy(model(adv.adv_inputs), y, reduction="none")
    assert bool((pgd_loss >= fgsm_loss - 1e-9).all())


@pytest.mark.criterion("attack oracle")
@pytest.mark.parametrize("name", ["fgsm", "pgd10", "bim"])
def test_robust_accuracy_against_margin(margin_data, name):
    model = linear_margin_model(margin_data)
    x = torch.from_numpy(margin_data.images).double()
    y = torch.from_numpy(margin_data.labels).long()
    dist = margin_data.meta["distances"]
    lo, hi = margin_data.meta["margin"], margin_data.meta["max_margin"]
    gen = torch.Generator().manual_seed(0)
    below = 0.9 * lo
    adv = run_attack(model, x, y, parse_attack(name, below), generator=gen)
    assert float((~adv.success_mask).double().mean()) == 1.0
    for eps in (lo + 0.25 * (hi - lo), lo + 0.5 * (hi - lo), 1.1 * hi):
        spec = parse_attack(name, eps)
        if name != "fgsm":
            # enough iterations to reach the ball boundary from any start
            spec = AttackSpec(spec.kind, eps, eps / 4, 12, spec.random_start, name)
        adv = run_attack(model, x, y, spec, generator=gen)
        measured = float((~adv.success_mask).double().mean())
        assert measured == float((dist > eps).mean()), (name, eps)


# -- single-step semantics ----------------------------------------------------------

@pytest.mark.criterion("single-step floor and clip")
def test_single_step_floor_over_random_gradients():
    gen = torch.Generator().manual_seed(5)
    for trial in range(200):
        B = 6
        x = 0.1 + 0.8 * torch.rand(B, 3, 4, 4, generator=gen, dtype=torch.float64)
        grad = torch.randn(x.shape, generator=gen, dtype=torch.float64)
        xi = torch.full((B,), 4 * U, dtype=torch.float64)
        start = (torch.rand(x.shape, generator=gen, dtype=torch.float64) * 2 - 1) * 4 * U
        adv = ddg_single_step(None, x, torch.zeros(B, dtype=torch.long), start, BudgetVector(xi),
                              8 * U, grad=grad, compute_success=False)
        # the applied step is 8/255: start + 8/255*sign(g), clipped to 4/255
        want = (start + 8 * U * grad.sign()).clamp(-4 * U, 4 * U)
        assert torch.equal(adv.deltas, want), trial
        # with a 4/255 step some coordinates would stop short of the face
        assert torch.equal(adv.deltas, 4 * U * grad.sign())
        assert float(adv.deltas.abs().max()) <= 4 * U + 1e-9


# -- ablation mechanics --------------------------------------------------------------

@pytest.mark.criterion("ablation-mechanics equivalence")
def test_disabled_ddg_equals_uniform_first_epoch():
    data = make_synthetic(200, 4, seed=0, image_shape=(3, 8, 8))
    tr, ho = split_holdout(data, 0.1, seed=0)
    cfg = GuidanceConfig(kappa=0.0, gamma=1.0, lambda_w=0.0, alpha_w=0.0, num_classes=4)
    base = dict(epochs=1, milestones=(), batch_size=32, augment=True)
    plans = [TrainPlan(disable_pba=True, disable_ssa=True, disable_gs=True, **base),
             TrainPlan(kind="uniform_guidance", **base)]
    records = []
    for plan in plans:
        torch.manual_seed(9)
        model = build_model("tiny-cnn", 4, (3, 8, 8))
        rec = train(model, tr, plan, cfg, holdout=ho, seed=9).history[0]
        d = asdict(rec)
        d.pop("wallclock")
        records.append(d)
    assert records[0] == records[1]


# -- desk-scale CIFAR-10 ----------------------------------------------------------------

def _cifar_subset():
    root = os.environ.get(CIFAR_ENV)
    if not root or not os.path.isdir(root):
        pytest.fail(f"CIFAR-10 binaries not available: set {CIFAR_ENV} to the "
                    "cifar-10-batches-bin directory")
    data = load_cifar10(root, limit=5000)
    return split_holdout(data, 0.1, seed=0)


def _desk_plan(**kw):
    return TrainPlan(epochs=20, lr=0.1, milestones=(), batch_size=128, **kw)


@pytest.mark.slow
@pytest.mark.criterion("desk-scale CO reproduction")
def test_desk_co_reproduction():
    tr, ho = _cifar_subset()
    eps = 16 * U
    flags = {"fgsm_rs": [], "ddg": []}
    for seed in (0, 1, 2):
        for kind in flags:
            torch.manual_seed(seed)
            model = build_model("tiny-cnn", 10, (3, 32, 32))
            if kind == "fgsm_rs":
                plan, cfg = _desk_plan(kind=kind, epsilon=eps), GuidanceConfig()
            else:
                plan, cfg = _desk_plan(kind=kind), GuidanceConfig(xi_base=eps)
            hist = train(model, tr, plan, cfg, holdout=ho, seed=seed).history
            flags[kind].append(any(r.co_flag for r in hist))
    assert sum(flags["fgsm_rs"]) >= 2, flags
    assert sum(flags["ddg"]) == 0, flags


@pytest.mark.slow
@pytest.mark.criterion("desk-scale group sweep trend")
def test_desk_group_sweep_trend():
    tr, ho = _cifar_subset()
    entries = expand_sweep([{"num_groups": 4, "selected_group": "all",
                             "budget_override": 16 * U}])

    def factory():
        return build_model("tiny-cnn", 10, (3, 32, 32))

    rep = run_sweep(_desk_plan(kind="fgsm_rs"), entries, cfg=GuidanceConfig(), train_data=tr,
                    holdout=ho, model_factory=factory, seeds=(0, 1, 2))
    assert not rep.failed
    hits = {g: 0 for g in range(4)}
    for run in rep.runs:
        if any(t["co_flag"] for t in run.trajectory):
            hits[run.entry.group.selected_group] += 1
    # group 3 holds the least confident quarter
    assert hits[3] >= 2, hits
    assert hits[0] == hits[1] == hits[2] == 0, hits


# -- reproducibility ------------------------------------------------------------------------

REPRO_CFG = """
name: repro
seed: 4
train: {epochs: 2, milestones: [], batch_size: 32, lr: 0.05, augment: true}
data: {num_samples: 160, test_samples: 40, num_classes: 4}
"""


@pytest.mark.criterion("reproducibility")
def test_train_repeat_byte_identical(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(REPRO_CFG)
    for run in ("a", "b"):
        assert main(["train", str(cfg), "--out", str(tmp_path / run)]) == 0
    assert ((tmp_path / "a" / "metrics.jsonl").read_bytes()
            == (tmp_path / "b" / "metrics.jsonl").read_bytes())


@pytest.mark.criterion("reproducibility")
def test_ablate_repeat_byte_identical(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(REPRO_CFG)
    sweep = tmp_path / "s.yaml"
    sweep.write_text("- {num_groups: 4, selected_group: 3, budget_override: 16/255}\n"
                     "- {num_groups: 4, selected_group: 0, beta1: 0.1, beta2: -0.1}\n")
    for run in ("a", "b"):
        assert main(["ablate", str(cfg), "--sweep", str(sweep), "--out", str(tmp_path / run)]) == 0
    assert ((tmp_path / "a" / "sweep.jsonl").read_bytes()
            == (tmp_path / "b" / "sweep.jsonl").read_bytes())
    for label in ("g3of4_xi16_s4", "g0of4_b10.1_b2-0.1_s4"):
        rel = os.path.join("runs", label, "metrics.jsonl")
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
