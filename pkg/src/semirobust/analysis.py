"""Decision/loss surfaces, robustness tables and unlabeled-data sweeps.

Outputs are plain data (grids and tables) with text and JSON writers;
plotting is left to the scripts under ``demos/``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import neighborhood as nbh
from .attacks import AttackConfig, run_attack
from .data import Dataset
from .exceptions import ContractError
from .models import input_gradient, margin, parameter_hash
from .neighborhood import NeighborhoodSpec
from .risks import predictions
from .training import TrainPlan, train


@dataclass
class SurfaceGrid:
    """Cell ``values[i, j]`` is measured at ``axis1.values[i]``, ``axis2.values[j]``."""

    axis1: dict
    axis2: dict
    values: np.ndarray
    quantity: str
    center_sample_id: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def center(self) -> float:
        i = len(self.axis1["values"]) // 2
        j = len(self.axis2["values"]) // 2
        return float(self.values[i, j])


def _pixel_directions(model, x, y, seed):
    grad = input_gradient(model, x[None], y.reshape(1))[0].double()
    d1 = grad / grad.norm() if grad.norm() > 0 else torch.zeros_like(grad)
    rng = np.random.default_rng(seed)
    r = torch.from_numpy(rng.standard_normal(tuple(x.shape)))
    r = r - (r * d1).sum() * d1
    d2 = r / r.norm()

    def linf_unit(d):
        peak = d.abs().max()
        return d / peak if peak > 0 else d

    return linf_unit(d1).to(x.dtype), linf_unit(d2).to(x.dtype)


def _surface_inputs(model, x, y, mode, spec: NeighborhoodSpec, resolution, seed):
    if resolution < 1 or resolution % 2 == 0:
        raise ContractError("grid_resolution must be a positive odd number so the center is a grid cell")
    if mode == "pixel":
        a = np.linspace(-spec.epsilon_pixel, spec.epsilon_pixel, resolution)
        d1, d2 = _pixel_directions(model, x, y, seed)
        coef1 = torch.from_numpy(a).to(x.dtype)
        pts = x[None, None] + coef1[:, None, None, None, None] * d1 + coef1[None, :, None, None, None] * d2
        pts = pts.clamp(0, 1).reshape(resolution * resolution, *x.shape)
        # the center cell must be exactly the benign image
        pts[(resolution * resolution) // 2] = x
        axis1 = {"direction": "loss gradient (l_inf-normalized)", "values": a.tolist()}
        axis2 = {"direction": f"random orthogonal to gradient (seed {seed}, l_inf-normalized)", "values": a.tolist()}
    elif mode == "spatial":
        rot = np.linspace(-spec.epsilon_rot, spec.epsilon_rot, resolution)
        shift = np.linspace(-spec.epsilon_trans, spec.epsilon_trans, resolution)
        rr, ss = np.meshgrid(rot, shift, indexing="ij")
        trans = np.stack([ss.ravel(), ss.ravel()], 1)
        pts = nbh.apply_spatial(x[None].expand(rr.size, *x.shape), torch.from_numpy(rr.ravel()), torch.from_numpy(trans))
        axis1 = {"direction": "rotation (degrees)", "values": rot.tolist()}
        axis2 = {"direction": "diagonal translation (dx = dy, pixels)", "values": shift.tolist()}
    else:
        raise ContractError(f"unknown surface mode {mode!r}")
    return pts, axis1, axis2


def _surface(model, x, y, mode, spec, resolution, seed, quantity, sample_id):
    y = torch.as_tensor(y).reshape(())
    pts, axis1, axis2 = _surface_inputs(model, x, y, mode, spec, resolution, seed)
    with torch.no_grad():
        logits = model(pts)
        target = y.expand(pts.shape[0])
        if quantity == "decision":
            vals = margin(F.softmax(logits, 1), target)
        else:
            vals = F.cross_entropy(logits, target, reduction="none")
    grid = vals.double().numpy().reshape(resolution, resolution)
    meta = {"mode": mode, "seed": seed, "model_hash": parameter_hash(model)}
    return SurfaceGrid(axis1, axis2, grid, quantity, sample_id, meta)


def decision_surface(model, x, y, mode: str, spec: NeighborhoodSpec, grid_resolution: int = 21, seed: int = 0, sample_id: int = 0) -> SurfaceGrid:
    """Margin ``p_y - max_{i != y} p_i`` over a 2-D slice of the neighborhood."""
    return _surface(model, x, y, mode, spec, grid_resolution, seed, "decision", sample_id)


def loss_surface(model, x, y, mode: str, spec: NeighborhoodSpec, grid_resolution: int = 21, seed: int = 0, sample_id: int = 0) -> SurfaceGrid:
    """Cross-entropy over the same slice as :func:`decision_surface`."""
    return _surface(model, x, y, mode, spec, grid_resolution, seed, "loss", sample_id)


def write_surface(grid: SurfaceGrid, path: str | Path) -> Path:
    """Tab-separated ``axis1 axis2 value`` rows under a ``#`` JSON header."""
    path = Path(path)
    header = {
        "quantity": grid.quantity,
        "center_sample_id": grid.center_sample_id,
        "axis1": grid.axis1["direction"],
        "axis2": grid.axis2["direction"],
        **grid.meta,
    }
    lines = ["# " + json.dumps(header, sort_keys=True), "axis1\taxis2\tvalue"]
    for i, a in enumerate(grid.axis1["values"]):
        for j, b in enumerate(grid.axis2["values"]):
            lines.append(f"{a:.6g}\t{b:.6g}\t{grid.values[i, j]:.8g}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_surface(path: str | Path) -> SurfaceGrid:
    text = Path(path).read_text().splitlines()
    header = json.loads(text[0][2:])
    rows = np.array([[float(v) for v in line.split("\t")] for line in text[2:]])
    a = np.unique(rows[:, 0])
    b = np.unique(rows[:, 1])
    values = rows[:, 2].reshape(len(a), len(b))
    meta = {k: header[k] for k in header if k not in ("quantity", "center_sample_id", "axis1", "axis2")}
    return SurfaceGrid(
        {"direction": header["axis1"], "values": a.tolist()},
        {"direction": header["axis2"], "values": b.tolist()},
        values,
        header["quantity"],
        header["center_sample_id"],
        meta,
    )


@dataclass
class Table:
    """Rows of named columns; numbers are stored exactly as reported."""

    columns: list[str]
    rows: list[dict]
    float_format: str = ".2f"

    def to_tsv(self) -> str:
        lines = ["\t".join(self.columns)]
        for row in self.rows:
            lines.append("\t".join(_fmt(row[c], self.float_format) for c in self.columns))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"columns": self.columns, "rows": self.rows, "float_format": self.float_format}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Table":
        obj = json.loads(text)
        return cls(obj["columns"], obj["rows"], obj.get("float_format", ".2f"))

    def write(self, stem: str | Path) -> tuple[Path, Path]:
        stem = Path(stem)
        tsv, js = stem.with_suffix(".tsv"), stem.with_suffix(".json")
        tsv.write_text(self.to_tsv())
        js.write_text(self.to_json() + "\n")
        return tsv, js

    def column(self, name: str) -> list:
        return [row[name] for row in self.rows]


def _fmt(v, spec=".2f"):
    if v is None:
        return "NA"
    if isinstance(v, float):
        return format(v, spec)
    return str(v)


def _pct(x: float) -> float:
    return round(100.0 * x, 2)


def attack_accuracy(model, x, y, cfg: AttackConfig, seed: int = 0, batch_size: int = 500) -> float:
    """Fraction of samples that are correctly classified with no successful attack."""
    rng = np.random.default_rng(seed)
    cfg = replace(cfg, target_mode="true_label")
    correct = predictions(model, x) == y
    for s in range(0, len(x), batch_size):
        sl = slice(s, s + batch_size)
        correct[sl] &= ~run_attack(model, x[sl], y[sl], cfg, rng).success
    return float(correct.float().mean())


def robustness_table(
    models, attacks: Mapping[str, AttackConfig] | Sequence[tuple[str, AttackConfig]], x, y, seed: int = 0
) -> Table:
    """Clean and per-attack accuracy (percent, 2 decimals), one row per model.

    ``models`` is a single model or a mapping ``name -> model``.
    """
    items = list(attacks.items()) if isinstance(attacks, Mapping) else list(attacks)
    if not items:
        raise ContractError("at least one attack is required")
    if not isinstance(models, Mapping):
        models = {"model": models}
    columns = ["model", "clean"] + [name for name, _ in items]
    rows = []
    for name, model in models.items():
        row = {"model": name, "clean": _pct(float((predictions(model, x) == y).float().mean()))}
        for attack_name, cfg in items:
            row[attack_name] = _pct(attack_accuracy(model, x, y, cfg, seed))
        rows.append(row)
    return Table(columns, rows)


def unlabeled_sweep(
    plan_template: TrainPlan,
    model_factory: Callable[[], torch.nn.Module],
    labeled: Dataset,
    unlabeled_pool: Dataset,
    sizes: Sequence[int],
    eval_set: Dataset,
    eval_attack: AttackConfig,
    seed: int = 0,
    pretrained: Mapping[int, torch.nn.Module] | None = None,
) -> tuple[Table, dict]:
    """Train one SRT model per unlabeled-set size and evaluate it.

    The first ``size`` samples of ``unlabeled_pool`` are used, so the sets are
    nested. Models in ``pretrained`` (keyed by size) are evaluated instead of
    retrained. Returns the table and the models keyed by size.
    """
    sizes = list(sizes)
    if sizes != sorted(sizes) or (sizes and sizes[-1] > len(unlabeled_pool)):
        raise ContractError("sizes must be ascending and no larger than the pool")
    plan = replace(plan_template, objective="srt") if plan_template.objective not in ("srt", "fast_srt", "srt_plus") else plan_template
    rows, trained = [], {}
    for size in sizes:
        if pretrained and size in pretrained:
            model = pretrained[size]
        else:
            model, _ = train(plan, model_factory(), labeled, unlabeled_pool.subset(np.arange(size)))
        trained[size] = model
        rows.append(
            {
                "unlabeled": size,
                "clean": _pct(float((predictions(model, eval_set.x) == eval_set.y).float().mean())),
                "attack": _pct(attack_accuracy(model, eval_set.x, eval_set.y, eval_attack, seed)),
            }
        )
    return Table(["unlabeled", "clean", "attack"], rows), trained
