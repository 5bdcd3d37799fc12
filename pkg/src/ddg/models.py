"""Classifier backbones, input gradients, SGD and checkpoint containers."""
from __future__ import annotations

import contextlib
import io
import json
import zipfile
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ValidationError

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2471, 0.2435, 0.2616)


class InputNormalize(nn.Module):
    def __init__(self, mean, std):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


class Classifier(nn.Module):
    """Common contract: ``forward(x[B,C,H,W]) -> logits[B,L]``."""

    arch_id = "base"

    def __init__(self, num_classes, input_shape, normalize=None):
        super().__init__()
        self.num_classes = int(num_classes)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.normalize = (InputNormalize(*normalize) if normalize is not None
                          else nn.Identity())

    def extra_manifest(self):
        return {}


class LinearClassifier(Classifier):
    arch_id = "linear"

    def __init__(self, num_classes, input_shape, weight=None, bias=None, normalize=None):
        super().__init__(num_classes, input_shape, normalize)
        d = 1
        for s in self.input_shape:
            d *= s
        self.fc = nn.Linear(d, self.num_classes)
        with torch.no_grad():
            if weight is None:
                self.fc.weight.zero_()
            else:
                self.fc.weight.copy_(torch.as_tensor(weight))
            if bias is None:
                self.fc.bias.zero_()
            else:
                self.fc.bias.copy_(torch.as_tensor(bias))

    def forward(self, x):
        return self.fc(self.normalize(x).flatten(1))


class TinyCNN(Classifier):
    """Two conv-BN-ReLU-pool blocks and a linear head."""

    arch_id = "tiny-cnn"

    def __init__(self, num_classes, input_shape, width=32, normalize=None):
        super().__init__(num_classes, input_shape, normalize)
        c, h, w = self.input_shape
        if h % 4 or w % 4:
            raise ConfigError(f"tiny-cnn needs spatial dims divisible by 4, got {h}x{w}")
        self.features = nn.Sequential(
            nn.Conv2d(c, width, 3, padding=1),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, 3, padding=1),
            nn.BatchNorm2d(2 * width),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
        )
        self.head = nn.Linear(2 * width * (h // 4) * (w // 4), self.num_classes)

    def forward(self, x):
        return self.head(self.features(self.normalize(x)).flatten(1))


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet18(Classifier):
    """CIFAR-style ResNet-18 (3x3 stem, four stages of two basic blocks).

    ``width=64`` is the standard network; ``resnet18-lite`` uses 16.
    """

    arch_id = "resnet18"

    def __init__(self, num_classes, input_shape, width=64, normalize=None):
        super().__init__(num_classes, input_shape, normalize)
        self.width = width
        c = self.input_shape[0]
        self.conv1 = nn.Conv2d(c, width, 3, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        layers, in_planes = [], width
        for i, stride in enumerate((1, 2, 2, 2)):
            planes = width * 2 ** i
            layers += [BasicBlock(in_planes, planes, stride), BasicBlock(planes, planes, 1)]
            in_planes = planes
        self.layers = nn.Sequential(*layers)
        self.linear = nn.Linear(in_planes, self.num_classes)

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(self.normalize(x))))
        out = self.layers(out)
        out = F.adaptive_avg_pool2d(out, 1).flatten(1)
        return self.linear(out)


class ResNet18Lite(ResNet18):
    arch_id = "resnet18-lite"

    def __init__(self, num_classes, input_shape, width=16, normalize=None):
        super().__init__(num_classes, input_shape, width=width, normalize=normalize)


ARCHITECTURES = {
    cls.arch_id: cls for cls in (LinearClassifier, TinyCNN, ResNet18Lite, ResNet18)
}


def build_model(arch: str, num_classes: int, input_shape, normalize: bool = False) -> Classifier:
    try:
        cls = ARCHITECTURES[arch]
    except KeyError:
        raise ConfigError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
    stats = None
    if normalize:
        if input_shape[0] != 3:
            raise ConfigError("normalize=True assumes 3-channel CIFAR statistics")
        stats = (CIFAR10_MEAN, CIFAR10_STD)
    return cls(num_classes, input_shape, normalize=stats)


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def forward(model: Classifier, x: torch.Tensor) -> torch.Tensor:
    """Validated forward pass returning logits."""
    if x.ndim != 4 or tuple(x.shape[1:]) != model.input_shape:
        raise ValidationError(
            f"expected input of shape (B, {', '.join(map(str, model.input_shape))}), "
            f"got {tuple(x.shape)}"
        )
    if x.numel() and (float(x.min()) < 0 or float(x.max()) > 1):
        raise ValidationError("inputs must lie in [0, 1]")
    return model(x)


@contextlib.contextmanager
def bn_stats_frozen(model: nn.Module):
    """Batch-norm layers keep their mode but stop updating running stats."""
    saved = []
    for m in model.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            saved.append((m, m.momentum, m.num_batches_tracked.clone()))
            m.momentum = 0.0
    try:
        yield model
    finally:
        for m, mom, nbt in saved:
            m.momentum = mom
            m.num_batches_tracked.copy_(nbt)


def cross_entropy(logits: torch.Tensor, target: torch.Tensor, reduction="mean") -> torch.Tensor:
    """Cross-entropy against hard labels (integer vector) or soft targets (matrix)."""
    if target.ndim == 1:
        return F.cross_entropy(logits, target, reduction=reduction)
    per = -(target.to(logits.dtype) * F.log_softmax(logits, dim=1)).sum(dim=1)
    return per.sum() if reduction == "sum" else per.mean()


def input_gradient(model: nn.Module, x: torch.Tensor, target: torch.Tensor,
                   reduction: str = "mean") -> torch.Tensor:
    """Gradient of the cross-entropy w.r.t. the input batch.

    Running BN statistics are not touched.
    """
    x = x.detach().clone().requires_grad_(True)
    with bn_stats_frozen(model):
        loss = cross_entropy(model(x), target, reduction=reduction)
    (g,) = torch.autograd.grad(loss, x)
    return g


@dataclass
class OptimizerState:
    """SGD with momentum and coupled L2 weight decay.

    v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v
    """

    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    optimizer: torch.optim.SGD | None = field(default=None, repr=False)

    @property
    def velocity(self):
        return [self.optimizer.state[p].get("momentum_buffer") for p in self._params()]

    def _params(self):
        return [p for g in self.optimizer.param_groups for p in g["params"]]

    def set_lr(self, lr: float):
        self.learning_rate = lr
        for g in self.optimizer.param_groups:
            g["lr"] = lr


def make_optimizer(model: nn.Module, lr: float, momentum: float = 0.9,
                   weight_decay: float = 5e-4) -> OptimizerState:
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum,
                          weight_decay=weight_decay)
    return OptimizerState(lr, momentum, weight_decay, opt)


def sgd_step(model: nn.Module, grads, opt: OptimizerState):
    """Apply one SGD update with explicitly supplied gradients.

    ``grads=None`` uses whatever ``.grad`` fields backward() populated.
    """
    params = list(model.parameters())
    if grads is not None:
        grads = list(grads)
        if len(grads) != len(params):
            raise ValidationError(f"expected {len(params)} gradients, got {len(grads)}")
        for p, g in zip(params, grads):
            if g.shape != p.shape:
                raise ValidationError(f"gradient shape {tuple(g.shape)} != parameter {tuple(p.shape)}")
            p.grad = g.detach().to(p.dtype).clone()
    opt.optimizer.step()
    return model, opt


# -- checkpoints -----------------------------------------------------------
# A checkpoint is a zip archive: manifest.json (readable on its own) and
# state.pt (model + optimizer state dicts).

def save_checkpoint(path, model: Classifier, opt: OptimizerState | None = None,
                    **manifest_fields) -> dict:
    manifest = {
        "arch": model.arch_id,
        "num_classes": model.num_classes,
        "input_shape": list(model.input_shape),
        "normalize": not isinstance(model.normalize, nn.Identity),
        "param_count": param_count(model),
    }
    if opt is not None:
        manifest["optimizer"] = {
            "learning_rate": opt.learning_rate,
            "momentum": opt.momentum,
            "weight_decay": opt.weight_decay,
        }
    manifest.update(manifest_fields)
    buf = io.BytesIO()
    torch.save({
        "model": model.state_dict(),
        "optimizer": opt.optimizer.state_dict() if opt is not None else None,
    }, buf)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        zf.writestr("state.pt", buf.getvalue())
    return manifest


def read_manifest(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("manifest.json"))


def load_checkpoint(path, map_location="cpu"):
    """Return ``(model, manifest, optimizer_state_dict)``."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        state = torch.load(io.BytesIO(zf.read("state.pt")), map_location=map_location,
                           weights_only=True)
    model = build_model(manifest["arch"], manifest["num_classes"], manifest["input_shape"],
                        normalize=manifest.get("normalize", False))
    model.load_state_dict(state["model"])
    return model, manifest, state["optimizer"]
