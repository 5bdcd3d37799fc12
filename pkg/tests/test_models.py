import pytest
import torch
import torch.nn.functional as F

from ddg.errors import ConfigError, ValidationError
from ddg.models import (
    LinearClassifier,
    bn_stats_frozen,
    build_model,
    forward,
    input_gradient,
    load_checkpoint,
    make_optimizer,
    param_count,
    read_manifest,
    save_checkpoint,
    sgd_step,
)


def fd_input_grad(model, x, y, h=1e-6):
    g = torch.zeros_like(x)
    flat, gf = x.view(-1), g.view(-1)
    with torch.no_grad():
        for k in range(flat.numel()):
            old = float(flat[k])
            flat[k] = old + h
            up = float(F.cross_entropy(model(x), y))
            flat[k] = old - h
            down = float(F.cross_entropy(model(x), y))
            flat[k] = old
            gf[k] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return float((a - b).norm() / b.norm())


def test_zero_linear_is_uniform():
    model = LinearClassifier(7, (1, 2, 2))
    p = torch.softmax(forward(model, torch.rand(3, 1, 2, 2)), 1)
    assert torch.allclose(p, torch.full((3, 7), 1 / 7))


def test_duplicate_rows_identical_in_eval():
    torch.manual_seed(0)
    model = build_model("tiny-cnn", 10, (3, 8, 8)).eval()
    x = torch.rand(1, 3, 8, 8).repeat(4, 1, 1, 1)
    z = forward(model, x)
    assert all(torch.equal(z[0], z[i]) for i in range(4))


def test_tiny_cnn_softmax_normalised():
    torch.manual_seed(1)
    model = build_model("tiny-cnn", 10, (3, 32, 32))
    with torch.no_grad():
        p = torch.softmax(forward(model, torch.rand(5, 3, 32, 32)), 1)
    assert float((p.sum(1) - 1).abs().max()) < 1e-6


def test_forward_validation():
    model = build_model("tiny-cnn", 10, (3, 8, 8))
    with pytest.raises(ValidationError):
        forward(model, torch.rand(2, 1, 8, 8))
    with pytest.raises(ValidationError):
        forward(model, torch.rand(2, 3, 8, 8) + 1)
    with pytest.raises(ConfigError):
        build_model("vgg", 10, (3, 8, 8))
    with pytest.raises(ConfigError):
        build_model("tiny-cnn", 10, (3, 6, 6))


def test_param_budgets():
    assert param_count(build_model("tiny-cnn", 10, (3, 32, 32))) <= 100_000
    assert param_count(build_model("resnet18-lite", 10, (3, 32, 32))) <= 3_000_000
    z = build_model("resnet18-lite", 10, (3, 32, 32))(torch.rand(2, 3, 32, 32))
    assert z.shape == (2, 10)


def test_linear_gradient_closed_form():
    g = torch.Generator().manual_seed(0)
    W = torch.randn(3, 4, generator=g, dtype=torch.float64)
    model = LinearClassifier(3, (1, 2, 2), weight=W).double()
    x = torch.rand(5, 1, 2, 2, generator=g, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 1, 0])
    p = torch.softmax(x.flatten(1) @ W.T, 1)
    want = ((p - F.one_hot(y, 3).double()) @ W / 5).view_as(x)
    assert torch.allclose(input_gradient(model, x, y), want, atol=1e-14)


def test_zero_weight_gradient():
    model = LinearClassifier(3, (1, 2, 2)).double()
    x = torch.rand(2, 1, 2, 2, dtype=torch.float64)
    assert torch.all(input_gradient(model, x, torch.tensor([0, 2])) == 0)


def test_soft_target_gradient_fd():
    torch.manual_seed(2)
    model = LinearClassifier(3, (1, 2, 2), weight=torch.randn(3, 4)).double()
    x = torch.rand(2, 1, 2, 2, dtype=torch.float64)
    t = torch.softmax(torch.randn(2, 3, dtype=torch.float64), 1)
    ga = input_gradient(model, x, t)
    fd = torch.zeros_like(x)
    for k in range(x.numel()):
        e = torch.zeros_like(x).view(-1)
        e[k] = 1e-6
        e = e.view_as(x)
        with torch.no_grad():
            lp = -(t * F.log_softmax(model(x + e), 1)).sum(1).mean()
            lm = -(t * F.log_softmax(model(x - e), 1)).sum(1).mean()
        fd.view(-1)[k] = float(lp - lm) / 2e-6
    assert rel_err(ga, fd) < 1e-6


def test_grayscale_fd():
    torch.manual_seed(3)
    model = LinearClassifier(2, (1, 2, 2), weight=torch.randn(2, 4)).double()
    x = torch.rand(1, 1, 2, 2, dtype=torch.float64)
    y = torch.tensor([1])
    assert rel_err(input_gradient(model, x, y), fd_input_grad(model, x, y)) < 1e-6


def test_tiny_cnn_fd():
    torch.manual_seed(4)
    model = build_model("tiny-cnn", 3, (1, 4, 4)).double().eval()
    x = torch.rand(4, 1, 4, 4, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 0])
    assert rel_err(input_gradient(model, x, y), fd_input_grad(model, x, y)) < 1e-4


def test_gradient_pass_leaves_bn_stats():
    torch.manual_seed(5)
    model = build_model("tiny-cnn", 3, (1, 4, 4))
    before = {k: v.clone() for k, v in model.state_dict().items()}
    input_gradient(model, torch.rand(4, 1, 4, 4), torch.tensor([0, 1, 2, 0]))
    with bn_stats_frozen(model):
        model(torch.rand(4, 1, 4, 4))
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k]), k
    model(torch.rand(4, 1, 4, 4))
    assert not torch.equal(model.state_dict()["features.1.running_mean"],
                           before["features.1.running_mean"])


def _one_param_model(value=1.0):
    model = LinearClassifier(2, (1, 1, 1)).double()
    with torch.no_grad():
        model.fc.weight.fill_(value)
        model.fc.bias.fill_(value)
    return model


def test_sgd_plain_step():
    model = _one_param_model()
    opt = make_optimizer(model, lr=0.1, momentum=0.0, weight_decay=0.0)
    grads = [torch.full_like(p, 2.0) for p in model.parameters()]
    sgd_step(model, grads, opt)
    assert torch.allclose(model.fc.weight, torch.full_like(model.fc.weight, 0.8))


def test_sgd_momentum_two_steps():
    model = _one_param_model()
    m, lr, g = 0.9, 0.1, 0.5
    opt = make_optimizer(model, lr=lr, momentum=m, weight_decay=0.0)
    for _ in range(2):
        sgd_step(model, [torch.full_like(p, g) for p in model.parameters()], opt)
    want = 1.0 - lr * g * (2 + m)
    assert torch.allclose(model.fc.weight, torch.full_like(model.fc.weight, want), atol=1e-12)
    assert all(v.shape == p.shape for v, p in zip(opt.velocity, model.parameters()))


def test_sgd_weight_decay_shrinks():
    model = _one_param_model()
    lr, wd = 0.1, 0.05
    opt = make_optimizer(model, lr=lr, momentum=0.0, weight_decay=wd)
    for step in range(1, 4):
        sgd_step(model, [torch.zeros_like(p) for p in model.parameters()], opt)
        want = (1 - lr * wd) ** step
        assert torch.allclose(model.fc.weight, torch.full_like(model.fc.weight, want), atol=1e-12)


def test_sgd_shape_mismatch():
    model = _one_param_model()
    opt = make_optimizer(model, 0.1)
    with pytest.raises(ValidationError):
        sgd_step(model, [torch.zeros(3), torch.zeros(2)], opt)
    with pytest.raises(ValidationError):
        sgd_step(model, [torch.zeros(2, 1)], opt)


@pytest.mark.parametrize("arch", ["linear", "tiny-cnn", "resnet18-lite"])
def test_checkpoint_round_trip(tmp_path, arch):
    torch.manual_seed(6)
    model = build_model(arch, 10, (3, 8, 8)).eval()
    opt = make_optimizer(model, 0.05)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, opt, epoch=3, metrics={"pgd10": 0.4})
    man = read_manifest(path)
    assert man["arch"] == arch and man["epoch"] == 3 and man["num_classes"] == 10
    assert man["optimizer"] == {"learning_rate": 0.05, "momentum": 0.9, "weight_decay": 5e-4}
    loaded, man2, opt_state = load_checkpoint(path)
    loaded.eval()
    assert param_count(loaded) == param_count(model) == man2["param_count"]
    x = torch.rand(2, 3, 8, 8)
    assert torch.equal(loaded(x), model(x))
    assert opt_state is not None
