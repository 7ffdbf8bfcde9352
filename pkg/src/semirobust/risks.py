"""Standard, adversarial and robust 0/1 risks.

Exact (``mode="enumerated"``) risks are computed by classifying every point
of a finite neighborhood: the spatial grid, or for tiny images a discretized
pixel ball. Continuous pixel neighborhoods only admit attack-based estimates
(``mode="attack_bound"``), which can under-report the true adversarial risk.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np
import torch

from . import neighborhood as nbh
from .attacks import AttackConfig, run_attack
from .exceptions import ContractError
from .models import predict
from .neighborhood import NeighborhoodSpec


@dataclass(frozen=True)
class SampleRisk:
    standard: int
    adversarial: int
    robust: int
    mode: str = "enumerated"


@dataclass
class RiskReport:
    dataset_standard: float
    dataset_adversarial: float
    dataset_robust: float
    n_samples: int
    mode: str
    spec: NeighborhoodSpec | None = None
    per_sample: dict[str, np.ndarray] | None = None
    queries: int = 0

    def as_dict(self) -> dict:
        return {
            "standard": self.dataset_standard,
            "adversarial": self.dataset_adversarial,
            "robust": self.dataset_robust,
            "n_samples": self.n_samples,
            "mode": self.mode,
        }


def _check_nonempty(x):
    if x is None or len(x) == 0:
        raise ContractError("dataset must be non-empty")


def _batches(n, size):
    for i in range(0, n, size):
        yield slice(i, min(n, i + size))


def predictions(model, x: torch.Tensor, batch_size: int = 1024) -> torch.Tensor:
    return torch.cat([predict(model, x[s]).label for s in _batches(len(x), batch_size)])


def standard_risk(model, x: torch.Tensor, y: torch.Tensor) -> float:
    """Fraction of samples with ``C(x) != y``."""
    _check_nonempty(x)
    return float((predictions(model, x) != y).float().mean())


def pixel_ball_grid(shape, epsilon: float, levels: int = 3, max_points: int = 100_000) -> torch.Tensor:
    """All deltas whose components take ``levels`` equally spaced values in
    ``[-eps, eps]``; only sensible for images with a handful of pixels."""
    d = int(np.prod(shape))
    if levels ** d > max_points:
        raise ContractError(f"{levels}**{d} grid points exceed max_points={max_points}")
    values = np.linspace(-epsilon, epsilon, levels) if levels > 1 else np.zeros(1)
    pts = np.array(list(itertools.product(values, repeat=d)), dtype=np.float32)
    return torch.from_numpy(pts).view(-1, *shape)


def neighborhood_predictions(
    model, x: torch.Tensor, spec: NeighborhoodSpec, pixel_levels: int | None = None, chunk_size: int = 8192
) -> torch.Tensor:
    """Predicted labels on every enumerated neighbor, shape ``(N, G)``.

    Column 0 is always the benign image itself.
    """
    if spec.kind == "spatial":
        rot, trans = nbh.grid_tensors(spec)
        g = rot.shape[0]

        def transform(xs, j0, j1):
            m = xs.shape[0] // (j1 - j0)
            return nbh.apply_spatial(
                xs, rot[j0:j1].repeat_interleave(m), trans[j0:j1].repeat_interleave(m, dim=0)
            )
    elif spec.kind == "pixel" and pixel_levels is not None:
        deltas = pixel_ball_grid(x.shape[1:], spec.epsilon_pixel, pixel_levels)
        g = deltas.shape[0]

        def transform(xs, j0, j1):
            m = xs.shape[0] // (j1 - j0)
            return (xs + deltas[j0:j1].repeat_interleave(m, dim=0)).clamp(0, 1)
    else:
        raise ContractError("neighborhood is not enumerable; use an attack-based estimate")
    n = x.shape[0]
    cols = [predictions(model, x)[:, None]]
    per_block = max(1, chunk_size // max(n, 1))
    with torch.no_grad():
        for j0 in range(0, g, per_block):
            j1 = min(g, j0 + per_block)
            # candidate-major layout: rows j*n .. (j+1)*n-1 belong to candidate j
            xs = x.repeat(j1 - j0, 1, 1, 1)
            labels = model(transform(xs, j0, j1)).argmax(1)
            cols.append(labels.view(j1 - j0, n).T)
    return torch.cat(cols, dim=1)


def _indicators(preds: torch.Tensor, y: torch.Tensor | None):
    benign = preds[:, 0]
    robust = (preds != benign[:, None]).any(1)
    if y is None:
        return None, None, robust
    standard = benign != y
    adversarial = (preds != y[:, None]).any(1)
    return standard, adversarial, robust


def _report(standard, adversarial, robust, mode, spec):
    n = int(robust.shape[0]) if robust is not None else int(adversarial.shape[0])
    mean = lambda v: float(v.float().mean()) if v is not None else float("nan")
    per_sample = {
        k: v.numpy().astype(np.int64)
        for k, v in (("standard", standard), ("adversarial", adversarial), ("robust", robust))
        if v is not None
    }
    return RiskReport(mean(standard), mean(adversarial), mean(robust), n, mode, spec, per_sample)


def enumerated_risks(model, x, y, spec: NeighborhoodSpec, pixel_levels: int | None = None) -> RiskReport:
    """All three risks from one shared enumeration of the neighborhood."""
    _check_nonempty(x)
    preds = neighborhood_predictions(model, x, spec, pixel_levels)
    return _report(*_indicators(preds, y), "enumerated", spec)


def adversarial_risk_enumerated(model, x, y, spec: NeighborhoodSpec, pixel_levels: int | None = None) -> RiskReport:
    if y is None:
        raise ContractError("adversarial risk needs labels")
    return enumerated_risks(model, x, y, spec, pixel_levels)


def robust_risk_enumerated(model, x, spec: NeighborhoodSpec, y=None, pixel_levels: int | None = None) -> RiskReport:
    """Label-free robust risk; labels, when given, also fill the other fields."""
    return enumerated_risks(model, x, y, spec, pixel_levels)


def adversarial_risk_attack(
    model, x, y, cfg: AttackConfig, rng: np.random.Generator | None = None, batch_size: int = 256
) -> RiskReport:
    """Attack-success estimate of the adversarial risk (a lower bound).

    The robust column is estimated the same way with a pseudo-label attack.
    """
    _check_nonempty(x)
    if cfg.target_mode != "true_label":
        raise ContractError("adversarial risk attacks must target the true label")
    rng = rng or np.random.default_rng(0)
    standard = predictions(model, x) != y
    results = [run_attack(model, x[s], y[s], cfg, rng) for s in _batches(len(x), batch_size)]
    adversarial = torch.cat([r.success for r in results])
    # the benign point belongs to every neighborhood
    adversarial |= standard
    report = _report(standard, adversarial, None, "attack_bound", cfg.spec)
    report.queries = sum(r.total_queries for r in results)
    return report


def robust_risk_attack(
    model, x, cfg: AttackConfig, rng: np.random.Generator | None = None, batch_size: int = 256
) -> RiskReport:
    """Label-free attack estimate: the solver targets the benign prediction."""
    _check_nonempty(x)
    cfg = replace(cfg, target_mode="pseudo_label")
    rng = rng or np.random.default_rng(0)
    results = [run_attack(model, x[s], None, cfg, rng) for s in _batches(len(x), batch_size)]
    report = _report(None, None, torch.cat([r.success for r in results]), "attack_bound", cfg.spec)
    report.queries = sum(r.total_queries for r in results)
    return report


def check_risk_identity(model, x: torch.Tensor, y: torch.Tensor, spec: NeighborhoodSpec, pixel_levels: int | None = None):
    """Check ``adv = stand + (1 - stand) * rob`` for one sample, in integers."""
    preds = neighborhood_predictions(model, x[None], spec, pixel_levels)
    standard, adversarial, robust = (int(v[0]) for v in _indicators(preds, torch.as_tensor(y).reshape(1)))
    risk = SampleRisk(standard, adversarial, robust)
    return risk, risk_identity_holds(risk)


def risk_identity_holds(risk: SampleRisk) -> bool:
    return risk.adversarial == risk.standard + (1 - risk.standard) * risk.robust


def risk_bound_gap(model, x, y, spec: NeighborhoodSpec, pixel_levels: int | None = None) -> float:
    """``R_stand + R_rob - R_adv`` over a dataset; never negative."""
    report = enumerated_risks(model, x, y, spec, pixel_levels)
    ps = report.per_sample
    # integer counts keep the comparison exact
    gap = int(ps["standard"].sum() + ps["robust"].sum() - ps["adversarial"].sum())
    return gap / report.n_samples


# names used by the public contract
lemma1_verify = check_risk_identity
lemma1_holds = risk_identity_holds
theorem1_gap = risk_bound_gap
