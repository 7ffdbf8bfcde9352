"""Inner-maximization solvers.

Pixel solvers (FGSM, PGD, MI-FGSM) run projected signed-gradient ascent on
the cross-entropy inside the l_inf ball intersected with ``[0, 1]``. Spatial
solvers (Worst-of-k, grid search) evaluate candidate rotation/translation
pairs and keep the loss maximizer. Compound solvers chain the two.

All solvers are batched: ``x`` is ``(N, C, H, W)`` and ``target`` is ``(N,)``.
``success[i]`` is True when any point the solver evaluated for sample ``i``
was classified differently from its target; every evaluated point lies in the
neighborhood, so this is a valid witness of adversarial (or robust) risk.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from . import neighborhood as nbh
from .exceptions import ContractError, NumericalError
from .models import pseudo_label
from .neighborhood import NeighborhoodSpec, TransformParams

PIXEL_SOLVERS = ("fgsm", "pgd", "mifgsm")
SPATIAL_SOLVERS = ("worst_of_k", "grid")
COMPOUND_SOLVERS = ("pgd_plus", "gridadv_plus")
SOLVERS = PIXEL_SOLVERS + SPATIAL_SOLVERS + COMPOUND_SOLVERS
_SOLVER_KIND = {
    **{s: "pixel" for s in PIXEL_SOLVERS},
    **{s: "spatial" for s in SPATIAL_SOLVERS},
    **{s: "compound" for s in COMPOUND_SOLVERS},
}


@dataclass(frozen=True)
class AttackConfig:
    """Solver choice and its parameters.

    ``signed=False`` switches the pixel solvers to raw-gradient ascent.
    ``spatial_search`` picks the spatial stage of compound solvers
    (``"grid"`` or ``"worst_of_k"``). ``track_best`` makes pixel solvers
    return the highest-loss iterate instead of the last one.
    """

    solver: str
    spec: NeighborhoodSpec
    step_size: float = 0.01
    iterations: int = 10
    k_samples: int = 10
    momentum: float = 1.0
    random_init: bool = False
    target_mode: str = "true_label"
    signed: bool = True
    track_best: bool = True
    early_exit: bool = False
    spatial_search: str = "grid"
    chunk_size: int = 8192

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ContractError(f"unknown solver {self.solver!r}")
        if _SOLVER_KIND[self.solver] != self.spec.kind:
            raise ContractError(
                f"solver {self.solver!r} requires a {_SOLVER_KIND[self.solver]} neighborhood, got {self.spec.kind!r}"
            )
        if self.iterations < 1:
            raise ContractError("iterations must be >= 1")
        if self.k_samples < 1:
            raise ContractError("k_samples must be >= 1")
        if self.momentum < 0:
            raise ContractError("momentum must be >= 0")
        if self.target_mode not in ("true_label", "pseudo_label"):
            raise ContractError(f"unknown target_mode {self.target_mode!r}")
        if self.spatial_search not in ("grid", "worst_of_k"):
            raise ContractError(f"unknown spatial_search {self.spatial_search!r}")
        uses_pixel = self.spec.has_pixel
        if uses_pixel and self.step_size <= 0:
            raise ContractError("step_size must be > 0")
        eps = self.spec.epsilon_pixel
        if uses_pixel and eps > 0 and self.step_size > 2 * eps + 1e-12:
            raise ContractError("step_size must not exceed 2 * epsilon_pixel")

    @property
    def analytic_queries(self) -> int:
        """Per-sample model evaluations the solver spends in full mode."""
        grid = self.spec.grid_size if self.spec.has_spatial else 0
        spatial = grid if self.spatial_search == "grid" else self.k_samples
        return {
            "fgsm": 1,
            "pgd": self.iterations,
            "mifgsm": self.iterations,
            "worst_of_k": self.k_samples,
            "grid": grid,
            "pgd_plus": self.iterations + spatial,
            "gridadv_plus": grid + self.iterations,
        }[self.solver]


@dataclass
class AttackResult:
    adversarial: torch.Tensor
    loss: torch.Tensor
    success: torch.Tensor
    queries: torch.Tensor
    params: list[TransformParams] | None = field(default=None, repr=False)

    @property
    def total_queries(self) -> int:
        return int(self.queries.sum())


def resolve_target(model, x: torch.Tensor, y: torch.Tensor | None, cfg: AttackConfig) -> torch.Tensor:
    if cfg.target_mode == "pseudo_label":
        return pseudo_label(model, x)
    if y is None:
        raise ContractError("true_label attacks need labels")
    return y


def _ce(logits, target):
    return F.cross_entropy(logits, target, reduction="none")


def _record(best, best_loss, success, cand, logits, target, track_best):
    with torch.no_grad():
        losses = _ce(logits, target)
        success |= logits.argmax(1) != target
        if track_best:
            better = losses > best_loss
        else:
            better = torch.ones_like(success)
        best[better] = cand[better]
        best_loss[better] = losses[better]


def _pixel_ascent(model, x, target, cfg: AttackConfig, start: torch.Tensor, momentum: float | None):
    """Projected ascent from ``start``; returns (adv, loss, success, queries)."""
    eps = cfg.spec.epsilon_pixel
    lo = (x - eps).clamp(0.0, 1.0)
    hi = (x + eps).clamp(0.0, 1.0)
    adv = torch.max(torch.min(start, hi), lo).detach()
    n = x.shape[0]
    best = adv.clone()
    best_loss = torch.full((n,), float("-inf"), dtype=x.dtype)
    success = torch.zeros(n, dtype=torch.bool)
    velocity = torch.zeros_like(x)
    for _ in range(cfg.iterations):
        adv.requires_grad_(True)
        logits = model(adv)
        (grad,) = torch.autograd.grad(_ce(logits, target).sum(), adv)
        if not torch.isfinite(grad).all():
            raise NumericalError("non-finite input gradient during attack")
        adv = adv.detach()
        _record(best, best_loss, success, adv, logits.detach(), target, cfg.track_best)
        if momentum is not None:
            norm = grad.abs().flatten(1).sum(1).view(-1, *([1] * (x.dim() - 1)))
            grad = torch.where(norm > 0, grad / norm.clamp_min(1e-30), grad)
            velocity = momentum * velocity + grad
            grad = velocity
        step = grad.sign() if cfg.signed else grad
        adv = torch.max(torch.min(adv + cfg.step_size * step, hi), lo)
    with torch.no_grad():
        _record(best, best_loss, success, adv, model(adv), target, cfg.track_best)
    queries = torch.full((n,), cfg.iterations, dtype=torch.int64)
    return best, best_loss, success, queries


def _pixel_params(delta: torch.Tensor) -> list[TransformParams]:
    return [TransformParams.pixel(d) for d in delta]


def fgsm(model, x, target, cfg: AttackConfig, rng: np.random.Generator | None = None) -> AttackResult:
    """Single signed-gradient step, optionally from a uniform random start."""
    cfg = replace(cfg, iterations=1)
    start = x
    if cfg.random_init:
        rng = rng or np.random.default_rng()
        eps = cfg.spec.epsilon_pixel
        start = x + torch.from_numpy(rng.uniform(-eps, eps, size=tuple(x.shape))).to(x.dtype)
    adv, l, s, q = _pixel_ascent(model, x, target, cfg, start, momentum=None)
    return AttackResult(adv, l, s, q, _pixel_params(adv - x))


def _gaussian_start(x, cfg, rng):
    if not cfg.random_init:
        return x
    rng = rng or np.random.default_rng()
    sigma = cfg.spec.epsilon_pixel / 2
    return x + torch.from_numpy(rng.normal(0.0, sigma, size=tuple(x.shape))).to(x.dtype)


def pgd(model, x, target, cfg: AttackConfig, rng: np.random.Generator | None = None) -> AttackResult:
    """K-step projected gradient ascent."""
    adv, l, s, q = _pixel_ascent(model, x, target, cfg, _gaussian_start(x, cfg, rng), momentum=None)
    return AttackResult(adv, l, s, q, _pixel_params(adv - x))


def mi_fgsm(model, x, target, cfg: AttackConfig, rng: np.random.Generator | None = None) -> AttackResult:
    """Momentum iterative FGSM with l1-normalized gradient accumulation."""
    adv, l, s, q = _pixel_ascent(model, x, target, cfg, _gaussian_start(x, cfg, rng), momentum=cfg.momentum)
    return AttackResult(adv, l, s, q, _pixel_params(adv - x))


def _spatial_search(model, x, target, rot: torch.Tensor, trans: torch.Tensor, early_exit: bool, chunk_size: int):
    """Evaluate per-sample candidates ``rot (N, G)``, ``trans (N, G, 2)``.

    The first candidate is the incumbent; later ones replace it only on a
    strictly larger loss. Returns the winning candidate index per sample.
    """
    n, g = rot.shape
    best_idx = torch.zeros(n, dtype=torch.int64)
    best_loss = torch.full((n,), float("-inf"), dtype=x.dtype)
    success = torch.zeros(n, dtype=torch.bool)
    queries = torch.zeros(n, dtype=torch.int64)
    per_block = max(1, chunk_size // max(n, 1))
    with torch.no_grad():
        for j0 in range(0, g, per_block):
            active = torch.nonzero(~success).squeeze(1) if early_exit else torch.arange(n)
            if active.numel() == 0:
                break
            j1 = min(g, j0 + per_block)
            c = j1 - j0
            xa = x[active]
            m = xa.shape[0]
            xs = xa.repeat(c, 1, 1, 1)
            r = rot[active, j0:j1].T.reshape(-1)
            t = trans[active, j0:j1].permute(1, 0, 2).reshape(-1, 2)
            logits = model(nbh.apply_spatial(xs, r, t))
            tgt = target[active].repeat(c)
            losses = _ce(logits, tgt).view(c, m)
            wrong = (logits.argmax(1) != tgt).view(c, m)
            for k in range(c):
                if early_exit:
                    # first misclassification wins; stop evaluating that sample.
                    live = ~success[active]
                    if not live.any():
                        break
                    idx = active[live]
                    queries[idx] += 1
                    better = (losses[k, live] > best_loss[idx]) | wrong[k, live]
                    best_idx[idx[better]] = j0 + k
                    best_loss[idx[better]] = losses[k, live][better]
                    success[idx] |= wrong[k, live]
                else:
                    better = losses[k] > best_loss[active]
                    best_idx[active[better]] = j0 + k
                    best_loss[active[better]] = losses[k][better]
                    success[active] |= wrong[k]
            if not early_exit:
                queries[active] += c
    return best_idx, best_loss, success, queries


def _grid_candidates(spec: NeighborhoodSpec, n: int):
    rot, trans = nbh.grid_tensors(spec)
    # evaluate the identity first when it is on the grid so that it wins ties
    ident = torch.nonzero((rot == 0) & (trans == 0).all(1)).squeeze(1)
    order = torch.arange(rot.shape[0])
    if ident.numel():
        first = int(ident[0])
        order = torch.cat([order[first : first + 1], order[:first], order[first + 1 :]])
    rot, trans = rot[order], trans[order]
    return rot.expand(n, -1), trans.expand(n, -1, -1)


def _spatial_result(model, x, target, spec, rot, trans, early_exit, chunk_size):
    idx, loss_val, success, queries = _spatial_search(model, x, target, rot, trans, early_exit, chunk_size)
    rows = torch.arange(x.shape[0])
    best_rot, best_trans = rot[rows, idx], trans[rows, idx]
    adv = nbh.apply_spatial(x, best_rot, best_trans)
    params = [
        TransformParams.spatial(float(r), int(t[0]), int(t[1])) for r, t in zip(best_rot, best_trans)
    ]
    return AttackResult(adv, loss_val, success, queries, params)


def worst_of_k(
    model,
    x,
    target,
    cfg: AttackConfig,
    rng: np.random.Generator | None = None,
    candidates: list[TransformParams] | None = None,
) -> AttackResult:
    """Loss maximizer among ``k_samples`` uniform grid draws per sample.

    ``candidates`` replaces the random draws with a fixed list shared by all
    samples (used to compare against exhaustive search).
    """
    spec = cfg.spec.spatial_part()
    n = x.shape[0]
    if candidates is not None:
        rot = torch.tensor([p.rotation_deg for p in candidates], dtype=torch.float64).expand(n, -1)
        trans = torch.tensor([p.translate_px for p in candidates], dtype=torch.int64).expand(n, -1, -1)
    else:
        rng = rng or np.random.default_rng()
        r, t = nbh.sample_spatial_batch(spec, rng, n * cfg.k_samples)
        rot, trans = r.view(n, cfg.k_samples), t.view(n, cfg.k_samples, 2)
    return _spatial_result(model, x, target, spec, rot, trans, False, cfg.chunk_size)


def grid_attack(model, x, target, cfg: AttackConfig, rng: np.random.Generator | None = None) -> AttackResult:
    """Exhaustive search over the spatial grid.

    With ``cfg.early_exit`` each sample stops at its first misclassified grid
    point; the success flags are the same in both modes.
    """
    spec = cfg.spec.spatial_part()
    rot, trans = _grid_candidates(spec, x.shape[0])
    return _spatial_result(model, x, target, spec, rot, trans, cfg.early_exit, cfg.chunk_size)


def _spatial_stage(model, x, target, cfg: AttackConfig, rng):
    if cfg.spatial_search == "grid":
        return grid_attack(model, x, target, cfg, rng)
    return worst_of_k(model, x, target, cfg, rng)


def pgd_plus(model, x, target, cfg: AttackConfig, rng: np.random.Generator | None = None) -> AttackResult:
    """PGD in pixel space, then spatial search on the perturbed image."""
    pixel_cfg = replace(cfg, solver="pgd", spec=cfg.spec.pixel_part())
    px = pgd(model, x, target, pixel_cfg, rng)
    sp = _spatial_stage(model, px.adversarial, target, replace(cfg, solver="grid", spec=cfg.spec.spatial_part()), rng)
    delta = px.adversarial - x
    params = [
        TransformParams("compound", pixel_delta=d, rotation_deg=s.rotation_deg, translate_px=s.translate_px)
        for d, s in zip(delta, sp.params)
    ]
    return AttackResult(sp.adversarial, sp.loss, px.success | sp.success, px.queries + sp.queries, params)


def gridadv_plus(model, x, target, cfg: AttackConfig, rng: np.random.Generator | None = None) -> AttackResult:
    """Spatial search first, then PGD around the worst transformed image."""
    sp = _spatial_stage(model, x, target, replace(cfg, solver="grid", spec=cfg.spec.spatial_part()), rng)
    pixel_cfg = replace(cfg, solver="pgd", spec=cfg.spec.pixel_part())
    px = pgd(model, sp.adversarial, target, pixel_cfg, rng)
    delta = px.adversarial - sp.adversarial
    params = [
        TransformParams(
            "compound", pixel_delta=d, rotation_deg=s.rotation_deg, translate_px=s.translate_px, order="spatial_first"
        )
        for d, s in zip(delta, sp.params)
    ]
    return AttackResult(px.adversarial, px.loss, px.success | sp.success, px.queries + sp.queries, params)


_DISPATCH = {
    "fgsm": fgsm,
    "pgd": pgd,
    "mifgsm": mi_fgsm,
    "worst_of_k": worst_of_k,
    "grid": grid_attack,
    "pgd_plus": pgd_plus,
    "gridadv_plus": gridadv_plus,
}


def run_attack(model, x, y, cfg: AttackConfig, rng: np.random.Generator | None = None) -> AttackResult:
    """Resolve the target per ``cfg.target_mode`` and run the configured solver."""
    target = resolve_target(model, x, y, cfg)
    return _DISPATCH[cfg.solver](model, x, target, cfg, rng)


def attack_target(model, x, target: torch.Tensor, cfg: AttackConfig, rng: np.random.Generator | None = None) -> AttackResult:
    """Run the configured solver against an already resolved ``target``."""
    return _DISPATCH[cfg.solver](model, x, target, cfg, rng)


def is_feasible(x: torch.Tensor, result: AttackResult, spec: NeighborhoodSpec, pixel_tol: float = 1e-6) -> torch.Tensor:
    """Per-sample neighborhood membership of an attack result.

    Checks the [0, 1] range, the distance budget of the reported params, and
    that applying the params to ``x`` reproduces the adversarial image.
    """
    adv = result.adversarial
    in_range = ((adv >= 0) & (adv <= 1)).flatten(1).all(1)
    ok = torch.zeros(x.shape[0], dtype=torch.bool)
    for i, p in enumerate(result.params):
        member = nbh.within_budget(spec, p, pixel_tol)
        if member:
            member = bool((nbh.apply(x[i], p) - adv[i]).abs().max() <= 1e-5)
        ok[i] = member and bool(in_range[i])
    return ok
