"""Training objectives and the alternating inner/outer optimization loop.

Objectives:

``standard``   cross-entropy on benign labeled images.
``at``         cross-entropy on adversarial labeled images, true-label targets.
``rt``         ``CE(f(x), y) + lam * CE(f(x'), C(x))`` on labeled data only.
``srt``        as ``rt`` with the robust term over labeled and unlabeled data.
``fast_srt``   ``srt`` with a single-step FGSM inner solver (step 1.25 eps,
               uniform random start) for pixel neighborhoods; use a cyclic
               learning-rate schedule with it.
``at_plus``    ``at`` with a compound inner solver (pixel attack, then spatial).
``srt_plus``   ``srt`` with the same compound inner solver.
``at_avg``     mean of per-type adversarial losses over several attack types.
``at_max``     per-sample worst adversarial loss over several attack types.

``C(x)`` is the prediction of the current model before the update and is
treated as a constant target.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .attacks import AttackConfig, attack_target, run_attack
from .data import Dataset, augment
from .exceptions import ContractError, NumericalError
from .models import predict, pseudo_label, save_checkpoint

log = logging.getLogger(__name__)

OBJECTIVES = ("standard", "at", "rt", "srt", "fast_srt", "at_plus", "srt_plus", "at_avg", "at_max")
SEMI_SUPERVISED = ("srt", "fast_srt", "srt_plus")
PSEUDO_LABEL_OBJECTIVES = ("rt", "srt", "fast_srt", "srt_plus")
MULTI_TYPE = ("at_avg", "at_max")


def cyclic_lr(step: int, total: int, peak_lr: float, peak_fraction: float) -> float:
    """Triangular schedule: 0 -> peak over ``peak_fraction * total`` steps, then back to 0."""
    if not 0 <= step <= total:
        raise ContractError("step must lie in [0, total]")
    peak_step = peak_fraction * total
    if step <= peak_step:
        return peak_lr * step / peak_step if peak_step > 0 else peak_lr
    return peak_lr * (total - step) / (total - peak_step)


@dataclass(frozen=True)
class LRSchedule:
    """``constant``, ``step`` (decay by ``gamma`` at fractional ``milestones``)
    or ``cyclic`` (triangular, peaking at ``peak_fraction``)."""

    kind: str = "constant"
    lr: float = 0.05
    milestones: tuple[float, ...] = (0.5, 0.75)
    gamma: float = 0.1
    peak_fraction: float = 0.4

    def __post_init__(self):
        if self.kind not in ("constant", "step", "cyclic"):
            raise ContractError(f"unknown lr schedule {self.kind!r}")
        if self.lr < 0:
            raise ContractError("lr must be >= 0")
        if not 0 <= self.peak_fraction <= 1:
            raise ContractError("peak_fraction must lie in [0, 1]")

    def at(self, step: int, total: int) -> float:
        if self.kind == "constant":
            return self.lr
        if self.kind == "step":
            passed = sum(step >= m * total for m in self.milestones)
            return self.lr * self.gamma**passed
        return cyclic_lr(step, total, self.lr, self.peak_fraction)


@dataclass(frozen=True)
class TrainPlan:
    """Objective, inner solver(s) and optimization settings.

    ``attacks[0]`` is the inner solver; ``at_avg``/``at_max`` use all of
    ``attacks``, one per perturbation type. Attack target modes are set from
    the objective.
    """

    objective: str
    attacks: tuple[AttackConfig, ...] = ()
    lam: float = 1.0
    epochs: int = 10
    batch_size: int = 128
    schedule: LRSchedule = field(default_factory=LRSchedule)
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    augment: bool = False
    checkpoint_every: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 50

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ContractError(f"unknown objective {self.objective!r}")
        if self.lam < 0:
            raise ContractError("lambda must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be >= 1")
        if isinstance(self.attacks, AttackConfig):
            object.__setattr__(self, "attacks", (self.attacks,))
        if self.objective != "standard" and not self.attacks:
            raise ContractError(f"objective {self.objective!r} needs an inner attack")
        if self.objective in MULTI_TYPE and len(self.attacks) < 2:
            raise ContractError(f"objective {self.objective!r} needs at least two perturbation types")
        if self.objective in ("at_plus", "srt_plus") and self.attacks[0].spec.kind != "compound":
            raise ContractError(f"objective {self.objective!r} needs a compound neighborhood")
        mode = "pseudo_label" if self.objective in PSEUDO_LABEL_OBJECTIVES else "true_label"
        attacks = tuple(replace(a, target_mode=mode) for a in self.attacks)
        if self.objective == "fast_srt" and attacks[0].spec.kind == "pixel":
            eps = attacks[0].spec.epsilon_pixel
            attacks = (replace(attacks[0], solver="fgsm", step_size=1.25 * eps, random_init=True, iterations=1),)
        object.__setattr__(self, "attacks", attacks)

    @property
    def attack(self) -> AttackConfig | None:
        return self.attacks[0] if self.attacks else None

    @property
    def uses_unlabeled(self) -> bool:
        return self.objective in SEMI_SUPERVISED


@dataclass(frozen=True)
class BatchComposition:
    labeled_count: int
    unlabeled_count: int


def compose_batch(n_labeled: int, n_unlabeled: int, m: int) -> BatchComposition:
    """Split a batch of ``m`` proportionally to the dataset sizes.

    The labeled count is rounded to nearest (halves up) and clamped to
    ``[1, m - 1]`` when both sets are non-empty; the rest is unlabeled.
    A batch of one holds a single labeled sample.
    """
    if m < 1:
        raise ContractError("batch size must be >= 1")
    total = n_labeled + n_unlabeled
    if n_labeled < 1:
        raise ContractError("need at least one labeled sample")
    if m > total:
        raise ContractError(f"batch size {m} exceeds the {total} available samples")
    if n_unlabeled == 0 or m == 1:
        return BatchComposition(m, 0)
    labeled = math.floor(m * n_labeled / total + 0.5)
    labeled = min(max(labeled, 1), m - 1)
    return BatchComposition(labeled, m - labeled)


def _epoch_indices(n: int, needed: int, rng: np.random.Generator) -> np.ndarray:
    """``needed`` indices: fresh permutations of ``range(n)`` concatenated."""
    if needed == 0:
        return np.zeros(0, dtype=np.int64)
    reps = -(-needed // n)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:needed]


@dataclass
class Perturbed:
    """Output of the inner step: adversarial inputs, their targets, query count."""

    adversarial: list[torch.Tensor]
    targets: torch.Tensor | None
    queries: int


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    inner_queries: int = 0
    outer_samples: int = 0
    labeled_per_epoch: int = 0
    unlabeled_per_epoch: int = 0
    aborted: bool = False
    wall_clock: float = 0.0

    def term_history(self, key: str) -> np.ndarray:
        return np.array([s[key] for s in self.steps])


def expected_gradient_evaluations(plan: TrainPlan, log: TrainLog) -> int:
    """Closed-form count of the instrumented gradient evaluations.

    ``N * I_o`` outer evaluations for standard training, otherwise
    ``(N + M) * I_i * I_o`` inner evaluations with ``M = 0`` for supervised
    objectives, where ``N``/``M`` are the labeled/unlabeled samples drawn per
    epoch, ``I_i`` the per-sample solver cost and ``I_o`` the epoch count.
    """
    n, m, epochs = log.labeled_per_epoch, log.unlabeled_per_epoch, plan.epochs
    if plan.objective == "standard":
        return n * epochs
    inner = sum(a.analytic_queries for a in plan.attacks)
    return (n + m) * inner * epochs


def measured_gradient_evaluations(plan: TrainPlan, log: TrainLog) -> int:
    return log.outer_samples if plan.objective == "standard" else log.inner_queries


def _ce_mean(model, x, y):
    return F.cross_entropy(model(x), y)


def srt_loss(model, xl, yl, x_adv, targets, lam: float):
    """``mean CE(f(xl), yl) + lam * mean CE(f(x_adv), targets)``.

    ``x_adv``/``targets`` cover the labeled and unlabeled batch members.
    Returns the scalar loss and its two terms (as floats).
    """
    if xl.shape[0] == 0:
        raise ContractError("the labeled batch must be non-empty")
    standard = _ce_mean(model, xl, yl)
    if lam == 0:
        robust = torch.zeros((), dtype=standard.dtype)
        with torch.no_grad():
            robust_value = float(_ce_mean(model, x_adv, targets)) if x_adv.shape[0] else 0.0
        return standard, {"standard": float(standard.detach()), "robust": robust_value}
    robust = _ce_mean(model, x_adv, targets)
    return standard + lam * robust, {"standard": float(standard.detach()), "robust": float(robust.detach())}


def at_multi_loss(model, perturbed: list[torch.Tensor], y: torch.Tensor, mode: str) -> torch.Tensor:
    """Combine per-type adversarial losses: ``average`` over types or per-sample ``max``."""
    if mode not in ("average", "max"):
        raise ContractError(f"unknown multi-type mode {mode!r}")
    per_type = torch.stack([F.cross_entropy(model(xa), y, reduction="none") for xa in perturbed])
    if mode == "average":
        return per_type.mean(0).mean()
    return per_type.max(0).values.mean()


def inner_step(model, xl, yl, xu, plan: TrainPlan, rng: np.random.Generator) -> Perturbed:
    """Generate the perturbed examples the outer objective needs."""
    if plan.objective == "standard":
        return Perturbed([], None, 0)
    if plan.objective in PSEUDO_LABEL_OBJECTIVES:
        x_all = torch.cat([xl, xu]) if xu is not None and xu.shape[0] else xl
        targets = pseudo_label(model, x_all)
        res = attack_target(model, x_all, targets, plan.attack, rng)
        return Perturbed([res.adversarial.detach()], targets, res.total_queries)
    results = [run_attack(model, xl, yl, cfg, rng) for cfg in (plan.attacks if plan.objective in MULTI_TYPE else plan.attacks[:1])]
    return Perturbed([r.adversarial.detach() for r in results], yl, sum(r.total_queries for r in results))


def objective_loss(model, xl, yl, perturbed: Perturbed, plan: TrainPlan):
    """The plan's outer objective on one batch; returns (loss, components)."""
    obj = plan.objective
    if obj == "standard":
        loss = _ce_mean(model, xl, yl)
        return loss, {"standard": float(loss.detach()), "robust": 0.0}
    if obj in PSEUDO_LABEL_OBJECTIVES:
        return srt_loss(model, xl, yl, perturbed.adversarial[0], perturbed.targets, plan.lam)
    if obj in MULTI_TYPE:
        loss = at_multi_loss(model, perturbed.adversarial, yl, "average" if obj == "at_avg" else "max")
    else:
        loss = _ce_mean(model, perturbed.adversarial[0], yl)
    return loss, {"standard": 0.0, "robust": float(loss.detach())}


def outer_step(model, optimizer, xl, yl, perturbed: Perturbed, plan: TrainPlan, lr: float):
    """One SGD update on the plan's objective; returns (loss value, components)."""
    loss, parts = objective_loss(model, xl, yl, perturbed, plan)
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite training loss {float(loss)}")
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach()), parts


def make_optimizer(model, plan: TrainPlan) -> torch.optim.Optimizer:
    return torch.optim.SGD(
        model.parameters(), lr=plan.schedule.lr, momentum=plan.momentum, weight_decay=plan.weight_decay
    )


def _accuracy(model, x, y):
    return float((predict(model, x).label == y).float().mean())


def _probe(model, probe: Dataset | None, probe_attack: AttackConfig | None, seed: int) -> dict:
    if probe is None:
        return {}
    out = {"clean_acc": _accuracy(model, probe.x, probe.y)}
    if probe_attack is not None:
        res = run_attack(model, probe.x, probe.y, replace(probe_attack, target_mode="true_label"), np.random.default_rng(seed))
        out["attack_acc"] = float(1 - res.success.float().mean())
    return out


class TrainingAborted(NumericalError):
    def __init__(self, message: str, log: TrainLog):
        super().__init__(message)
        self.log = log


def train(
    plan: TrainPlan,
    model,
    labeled: Dataset,
    unlabeled: Dataset | None = None,
    probe: Dataset | None = None,
    probe_attack: AttackConfig | None = None,
    out_dir: str | Path | None = None,
) -> tuple[torch.nn.Module, TrainLog]:
    """Alternate inner maximization and SGD updates for ``plan.epochs`` epochs.

    One epoch is one pass over whichever set needs more batches at the
    proportional composition; the other set is recycled. Runs are
    deterministic given ``plan.seed`` and the model's initial weights.
    """
    if labeled.y is None:
        raise ContractError("the labeled set has no labels")
    n_lab = len(labeled)
    n_unl = len(unlabeled) if (unlabeled is not None and plan.uses_unlabeled) else 0
    comp = compose_batch(n_lab, n_unl, plan.batch_size)
    n_batches = -(-n_lab // comp.labeled_count)
    if comp.unlabeled_count:
        n_batches = max(n_batches, -(-n_unl // comp.unlabeled_count))
    total_steps = n_batches * plan.epochs

    rngs = np.random.default_rng(plan.seed).spawn(3)
    order_rng, attack_rng, aug_rng = rngs
    optimizer = make_optimizer(model, plan)
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.jsonl", "a", encoding="utf-8")

    tlog = TrainLog(labeled_per_epoch=n_batches * comp.labeled_count, unlabeled_per_epoch=n_batches * comp.unlabeled_count)
    last_good = copy.deepcopy(model.state_dict())
    natural = plan.augment and labeled.kind == "natural"
    initial_loss, over = None, 0
    step = 0
    start = time.perf_counter()

    def emit(record):
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")

    def abort(message):
        model.load_state_dict(last_good)
        tlog.aborted = True
        if out is not None:
            save_checkpoint(model, out / "checkpoint_last_good.pt", {"aborted": True})
        raise TrainingAborted(message, tlog)

    try:
        for epoch in range(plan.epochs):
            t_epoch = time.perf_counter()
            lab_order = _epoch_indices(n_lab, n_batches * comp.labeled_count, order_rng)
            unl_order = _epoch_indices(n_unl, n_batches * comp.unlabeled_count, order_rng)
            for b in range(n_batches):
                li = torch.from_numpy(lab_order[b * comp.labeled_count : (b + 1) * comp.labeled_count])
                xl, yl = labeled.x[li], labeled.y[li]
                xu = None
                if comp.unlabeled_count:
                    ui = torch.from_numpy(unl_order[b * comp.unlabeled_count : (b + 1) * comp.unlabeled_count])
                    xu = unlabeled.x[ui]
                if natural:
                    xl = augment(xl, aug_rng)
                    xu = augment(xu, aug_rng) if xu is not None else None
                lr = plan.schedule.at(step, total_steps)
                perturbed = inner_step(model, xl, yl, xu, plan, attack_rng)
                try:
                    loss_value, parts = outer_step(model, optimizer, xl, yl, perturbed, plan, lr)
                except NumericalError as exc:
                    abort(str(exc))
                tlog.inner_queries += perturbed.queries
                tlog.outer_samples += int(xl.shape[0])
                record = {"step": step, "epoch": epoch, "loss": loss_value, **parts, "lr": lr, "inner_queries": perturbed.queries}
                tlog.steps.append(record)
                emit(record)
                if initial_loss is None:
                    initial_loss = loss_value
                over = over + 1 if loss_value > plan.divergence_factor * max(initial_loss, 1e-12) else 0
                if over >= plan.divergence_patience:
                    abort(f"loss exceeded {plan.divergence_factor}x its initial value for {over} steps")
                step += 1
            summary = {"epoch": epoch, "seconds": time.perf_counter() - t_epoch, **_probe(model, probe, probe_attack, plan.seed)}
            tlog.epochs.append(summary)
            emit({"epoch_summary": summary})
            log.debug("epoch %d %s", epoch, summary)
            last_good = copy.deepcopy(model.state_dict())
            if out is not None and plan.checkpoint_every and (epoch + 1) % plan.checkpoint_every == 0:
                save_checkpoint(model, out / f"checkpoint_epoch{epoch + 1}.pt", {"epoch": epoch + 1})
    except KeyboardInterrupt:
        model.load_state_dict(last_good)
        if out is not None:
            save_checkpoint(model, out / "checkpoint_last_good.pt", {"interrupted": True})
        raise
    finally:
        tlog.wall_clock = time.perf_counter() - start
        if log_file is not None:
            log_file.close()
    if out is not None:
        save_checkpoint(model, out / "model.pt", {"objective": plan.objective, "epochs": plan.epochs})
    return model, tlog
