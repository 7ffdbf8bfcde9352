"""Desk-scale differentiable classifiers and the quantities derived from them.

Every model is an ``nn.Module`` that maps a batch ``(N, C, H, W)`` to logits
``(N, K)``; posteriors are the softmax of the logits. Class labels are
0-based indices.
"""

from __future__ import annotations

import copy
import hashlib
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ContractError, NumericalError

CHECKPOINT_VERSION = 1


class LinearSoftmax(nn.Module):
    """Multinomial logistic regression on flattened pixels."""

    arch = "linear"

    def __init__(self, in_shape=(1, 28, 28), num_classes=10):
        super().__init__()
        self.config = {"in_shape": list(in_shape), "num_classes": num_classes}
        self.fc = nn.Linear(int(np.prod(in_shape)), num_classes)

    def forward(self, x):
        return self.fc(x.flatten(1))


class MLP(nn.Module):
    arch = "mlp"

    def __init__(self, in_shape=(1, 28, 28), num_classes=10, hidden=(128, 64)):
        super().__init__()
        self.config = {"in_shape": list(in_shape), "num_classes": num_classes, "hidden": list(hidden)}
        layers, width = [], int(np.prod(in_shape))
        for h in hidden:
            layers += [nn.Linear(width, h), nn.ReLU()]
            width = h
        layers.append(nn.Linear(width, num_classes))
        self.net = nn.Sequential(*layers)
        _relu_init(self)

    def forward(self, x):
        return self.net(x.flatten(1))


class SmallCNN(nn.Module):
    """Two 3x3 conv/ReLU/max-pool stages followed by two dense layers."""

    arch = "cnn"

    def __init__(self, in_shape=(1, 28, 28), num_classes=10, channels=(16, 32), hidden=64):
        super().__init__()
        self.config = {
            "in_shape": list(in_shape),
            "num_classes": num_classes,
            "channels": list(channels),
            "hidden": hidden,
        }
        c, h, w = in_shape
        c1, c2 = channels
        self.features = nn.Sequential(
            nn.Conv2d(c, c1, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(c1, c2, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
        )
        self.classifier = nn.Sequential(
            nn.Linear(c2 * (h // 4) * (w // 4), hidden),
            nn.ReLU(),
            nn.Linear(hidden, num_classes),
        )
        _relu_init(self)

    def forward(self, x):
        return self.classifier(self.features(x).flatten(1))


def _relu_init(module: nn.Module) -> None:
    # He-normal weights keep ReLU activations from shrinking layer to layer
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            nn.init.zeros_(m.bias)


MODELS = {cls.arch: cls for cls in (LinearSoftmax, MLP, SmallCNN)}


def build_model(arch: str, seed: int | None = None, **kwargs) -> nn.Module:
    """Instantiate a registered architecture, optionally with seeded init."""
    if arch not in MODELS:
        raise ContractError(f"unknown architecture {arch!r}; choose from {sorted(MODELS)}")
    if seed is None:
        return MODELS[arch](**kwargs)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MODELS[arch](**kwargs)


@dataclass
class Prediction:
    """Predicted labels, posteriors and decision values for a batch."""

    label: torch.Tensor
    posteriors: torch.Tensor
    decision_value: torch.Tensor


def posteriors(model: nn.Module, x: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        probs = F.softmax(model(x), dim=1)
    if not torch.isfinite(probs).all():
        raise NumericalError("model produced non-finite posteriors")
    return probs


def margin(probs: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """``p_label - max_{i != label} p_i`` per row."""
    picked = probs.gather(1, label[:, None]).squeeze(1)
    others = probs.scatter(1, label[:, None], float("-inf"))
    return picked - others.max(dim=1).values


def predict(model: nn.Module, x: torch.Tensor) -> Prediction:
    """Argmax prediction; ties resolve to the lowest class index."""
    probs = posteriors(model, x)
    # torch.argmax returns the first maximal index
    label = probs.argmax(dim=1)
    return Prediction(label, probs, margin(probs, label))


def decision_value(model: nn.Module, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Margin of the true class; positive iff ``x`` is classified as ``y``."""
    return margin(posteriors(model, x), y)


def pseudo_label(model: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """The model's own prediction ``C(x)``, detached from the graph."""
    return predict(model, x).label


def loss(model: nn.Module, x: torch.Tensor, y: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    return F.cross_entropy(model(x), y, reduction=reduction)


def input_gradient(model: nn.Module, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Gradient of the summed cross-entropy with respect to the inputs."""
    x = x.detach().clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(loss(model, x, y, reduction="sum"), x)
    if not torch.isfinite(grad).all():
        raise NumericalError("non-finite input gradient")
    return grad


def parameter_gradient(model: nn.Module, x: torch.Tensor, y: torch.Tensor) -> list[torch.Tensor]:
    """Gradients of the mean cross-entropy with respect to each parameter."""
    params = [p for p in model.parameters() if p.requires_grad]
    return list(torch.autograd.grad(loss(model, x, y), params))


def gradient_check(
    model: nn.Module,
    x: torch.Tensor,
    y: torch.Tensor,
    h: float = 1e-4,
    n_coords: int = 32,
    seed: int = 0,
) -> float:
    """Compare :func:`input_gradient` against central finite differences.

    The finite differences run on a float64 copy of the model, so the check
    measures the analytic gradient at the model's own precision. The error is
    ``max |analytic - numeric|`` divided by the largest gradient magnitude
    among the probed coordinates; when every probed gradient is below 1e-12
    the absolute error is returned instead.
    """
    if h <= 0:
        raise ContractError("h must be positive")
    x = x if x.dim() == 4 else x.unsqueeze(0)
    y = torch.as_tensor(y).reshape(-1)
    analytic = input_gradient(model, x, y).flatten()
    ref = copy.deepcopy(model).double()
    xd = x.detach().double().flatten()
    rng = np.random.default_rng(seed)
    coords = rng.choice(xd.numel(), size=min(n_coords, xd.numel()), replace=False)
    numeric = np.empty(len(coords))
    with torch.no_grad():
        for j, c in enumerate(coords):
            plus, minus = xd.clone(), xd.clone()
            plus[c] += h
            minus[c] -= h
            lp = loss(ref, plus.view_as(x), y, reduction="sum").item()
            lm = loss(ref, minus.view_as(x), y, reduction="sum").item()
            numeric[j] = (lp - lm) / (2 * h)
    a = analytic[torch.as_tensor(coords)].double().numpy()
    err = float(np.max(np.abs(a - numeric)))
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(numeric))))
    return err if scale < 1e-12 else err / scale


def parameter_hash(model: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()[:16]


def save_checkpoint(model: nn.Module, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "arch": model.arch,
        "config": model.config,
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path: str | Path, arch: str | None = None) -> nn.Module:
    """Rebuild a model from :func:`save_checkpoint`; ``arch`` guards mismatches."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {payload.get('version')!r}")
    if arch is not None and payload["arch"] != arch:
        raise ContractError(f"checkpoint holds a {payload['arch']!r} model, expected {arch!r}")
    model = build_model(payload["arch"], **payload["config"])
    model.load_state_dict(payload["state_dict"])
    return model
