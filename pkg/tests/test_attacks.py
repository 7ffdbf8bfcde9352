import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from conftest import FixedLogits, PixelLinear
from semirobust import neighborhood as nbh
from semirobust.attacks import (
    AttackConfig,
    fgsm,
    grid_attack,
    gridadv_plus,
    is_feasible,
    mi_fgsm,
    pgd,
    pgd_plus,
    run_attack,
    worst_of_k,
)
from semirobust.exceptions import ContractError, NumericalError
from semirobust.models import build_model, loss
from semirobust.neighborhood import NeighborhoodSpec

PIX = NeighborhoodSpec("pixel", epsilon_pixel=0.1)
SPAT = NeighborhoodSpec("spatial", epsilon_rot=30, epsilon_trans=3)


def _ce(model, x, y):
    return loss(model, x, y, reduction="none").detach()


def test_config_validation():
    with pytest.raises(ContractError):
        AttackConfig("pgd", SPAT)
    with pytest.raises(ContractError):
        AttackConfig("grid", PIX)
    with pytest.raises(ContractError):
        AttackConfig("pgd", PIX, step_size=0.25)
    with pytest.raises(ContractError):
        AttackConfig("pgd", PIX, iterations=0)
    with pytest.raises(ContractError):
        AttackConfig("worst_of_k", SPAT, k_samples=0)
    with pytest.raises(ContractError):
        AttackConfig("nope", PIX)


def test_zero_gradient_model_leaves_input():
    m = FixedLogits(torch.tensor([1.0, 0.0]))
    x = torch.rand(3, 1, 4, 4)
    y = torch.zeros(3, dtype=torch.long)
    res = fgsm(m, x, y, AttackConfig("fgsm", PIX, step_size=0.1))
    assert torch.equal(res.adversarial, x)
    cfg = AttackConfig("fgsm", PIX, step_size=0.1, random_init=True)
    res = fgsm(m, x, y, cfg, np.random.default_rng(7))
    u = np.random.default_rng(7).uniform(-0.1, 0.1, size=tuple(x.shape))
    expected = (x + torch.from_numpy(u).float()).clamp(0, 1)
    assert torch.allclose(res.adversarial, expected, atol=1e-7)


def test_fgsm_one_pixel_toy():
    # loss = log(1 + exp(-w x)) for class 0; pick w < 0 with dL/dx = +2 at x = 0.5
    w = -brentq(lambda u: u / (1 + np.exp(-u / 2)) - 2.0, 0.1, 50)
    m = PixelLinear(w)
    x = torch.full((1, 1, 1, 1), 0.5, requires_grad=True)
    y = torch.zeros(1, dtype=torch.long)
    (g,) = torch.autograd.grad(loss(m, x, y, reduction="sum"), x)
    assert float(g) == pytest.approx(2.0, rel=1e-5)
    res = fgsm(m, x.detach(), y, AttackConfig("fgsm", PIX, step_size=0.1))
    assert float(res.adversarial) == pytest.approx(0.6, abs=1e-7)


def test_fast_step_size_saturates_budget():
    eps = 0.1
    m = PixelLinear(-3.0)
    g = np.random.default_rng(0)
    x = torch.from_numpy(g.uniform(0.2, 0.8, (20, 1, 6, 6)).astype(np.float32))
    y = torch.zeros(20, dtype=torch.long)
    cfg = AttackConfig("fgsm", PIX, step_size=1.25 * eps, random_init=True)
    res = fgsm(m, x, y, cfg, np.random.default_rng(1))
    norms = (res.adversarial - x).abs().flatten(1).max(1).values
    assert torch.allclose(norms, torch.full_like(norms, eps), atol=1e-6)


def test_pgd_single_step_equals_fgsm(trained_cnn, digits_small):
    x, y = digits_small[1].x[:20], digits_small[1].y[:20]
    a = pgd(trained_cnn, x, y, AttackConfig("pgd", PIX, step_size=0.05, iterations=1))
    b = fgsm(trained_cnn, x, y, AttackConfig("fgsm", PIX, step_size=0.05))
    assert torch.equal(a.adversarial, b.adversarial)


def test_pgd_scalar_recursion():
    # loss increasing in x: 0 -> 0.2 -> 0.3 (projection binds) -> 0.3
    m = PixelLinear(-1.0)
    x = torch.zeros(1, 1, 1, 1)
    y = torch.zeros(1, dtype=torch.long)
    spec = NeighborhoodSpec("pixel", epsilon_pixel=0.3)
    trajectory = [float(pgd(m, x, y, AttackConfig("pgd", spec, step_size=0.2, iterations=k, track_best=False)).adversarial) for k in (1, 2, 3)]
    assert trajectory == pytest.approx([0.2, 0.3, 0.3], abs=1e-7)


def test_pgd_descending_loss_is_clipped_at_zero():
    # a loss that falls with x (like (x - 1)^2 at x = 0) pushes the iterate below 0; the clip keeps it at 0
    m = PixelLinear(1.0)
    x = torch.zeros(1, 1, 1, 1)
    res = pgd(m, x, torch.zeros(1, dtype=torch.long), AttackConfig("pgd", NeighborhoodSpec("pixel", epsilon_pixel=0.3), step_size=0.2, iterations=3))
    assert float(res.adversarial) == 0.0


def test_pgd_never_lowers_loss(trained_cnn, digits_small):
    x, y = digits_small[1].x[:50], digits_small[1].y[:50]
    res = pgd(trained_cnn, x, y, AttackConfig("pgd", PIX, step_size=0.02, iterations=10))
    assert (_ce(trained_cnn, res.adversarial, y) >= _ce(trained_cnn, x, y) - 1e-6).all()
    assert torch.allclose(res.loss, _ce(trained_cnn, res.adversarial, y), atol=1e-5)
    assert (res.queries == 10).all()


def test_mifgsm_without_momentum_equals_pgd(trained_cnn, digits_small):
    x, y = digits_small[1].x[:20], digits_small[1].y[:20]
    a = pgd(trained_cnn, x, y, AttackConfig("pgd", PIX, step_size=0.02, iterations=7))
    b = mi_fgsm(trained_cnn, x, y, AttackConfig("mifgsm", PIX, step_size=0.02, iterations=7, momentum=0.0))
    assert torch.equal(a.adversarial, b.adversarial)


def test_mifgsm_reaches_boundary_no_later_than_pgd():
    m = PixelLinear(-2.0)
    x = torch.full((1, 1, 1, 1), 0.5)
    y = torch.zeros(1, dtype=torch.long)
    spec = NeighborhoodSpec("pixel", epsilon_pixel=0.3)

    def first_hit(solver, fn):
        for k in range(1, 10):
            cfg = AttackConfig(solver, spec, step_size=0.07, iterations=k, track_best=False)
            if abs(float(fn(m, x, y, cfg).adversarial) - 0.8) < 1e-7:
                return k
        return 99

    assert first_hit("mifgsm", mi_fgsm) <= first_hit("pgd", pgd)


def test_mifgsm_zero_gradient_is_finite():
    m = FixedLogits(torch.tensor([0.0, 1.0]))
    x = torch.rand(2, 1, 3, 3)
    res = mi_fgsm(m, x, torch.zeros(2, dtype=torch.long), AttackConfig("mifgsm", PIX, step_size=0.05, iterations=3))
    assert torch.isfinite(res.adversarial).all()


def test_nonfinite_gradient_raises():
    class Bad(torch.nn.Module):
        def forward(self, x):
            s = x.flatten(1).sum(1)
            return torch.stack([s * float("nan"), s], 1)

    with pytest.raises(NumericalError):
        pgd(Bad(), torch.rand(1, 1, 2, 2), torch.zeros(1, dtype=torch.long), AttackConfig("pgd", PIX))


def test_worst_of_k_single_draw_is_random_sample(trained_cnn, digits_small):
    x, y = digits_small[1].x[:10], digits_small[1].y[:10]
    res = worst_of_k(trained_cnn, x, y, AttackConfig("worst_of_k", SPAT, k_samples=1), np.random.default_rng(3))
    rot, trans = nbh.sample_spatial_batch(SPAT, np.random.default_rng(3), 10)
    assert [p.spatial_key for p in res.params] == [(float(r), int(t[0]), int(t[1])) for r, t in zip(rot, trans)]
    assert (res.queries == 1).all()


def test_worst_of_k_argmax(trained_cnn, digits_small):
    x, y = digits_small[1].x[:8], digits_small[1].y[:8]
    cands = nbh.enumerate_grid(SPAT)[::37]
    res = worst_of_k(trained_cnn, x, y, AttackConfig("worst_of_k", SPAT, k_samples=len(cands)), candidates=cands)
    for i in range(8):
        losses = torch.stack([_ce(trained_cnn, nbh.apply(x[i], p)[None], y[i : i + 1])[0] for p in cands])
        assert float(res.loss[i]) >= float(losses.max()) - 1e-5


def test_exhaustive_worst_of_k_equals_grid(trained_cnn, digits_small):
    x, y = digits_small[1].x[:6], digits_small[1].y[:6]
    grid = nbh.enumerate_grid(SPAT)
    a = worst_of_k(trained_cnn, x, y, AttackConfig("worst_of_k", SPAT, k_samples=len(grid)), candidates=grid)
    b = grid_attack(trained_cnn, x, y, AttackConfig("grid", SPAT))
    assert torch.allclose(a.loss, b.loss, atol=1e-6)


def test_grid_constant_model_returns_identity():
    m = FixedLogits(torch.tensor([0.3, 0.1, 0.2]))
    x = torch.rand(4, 1, 8, 8)
    res = grid_attack(m, x, torch.zeros(4, dtype=torch.long), AttackConfig("grid", SPAT))
    assert all(p.spatial_key == (0.0, 0, 0) for p in res.params)
    assert (res.queries == 775).all()
    assert torch.allclose(res.adversarial, x, atol=1e-6)


def test_grid_early_exit_keeps_success(trained_cnn, digits_small):
    x, y = digits_small[1].x[:40], digits_small[1].y[:40]
    spec = NeighborhoodSpec("spatial", epsilon_rot=30, epsilon_trans=3, grid_counts=(11, 5))
    full = grid_attack(trained_cnn, x, y, AttackConfig("grid", spec))
    fast = grid_attack(trained_cnn, x, y, AttackConfig("grid", spec, early_exit=True))
    assert torch.equal(full.success, fast.success)
    assert (fast.queries <= full.queries).all()


def test_pgd_plus_degenerate_budgets(trained_cnn, digits_small):
    x, y = digits_small[1].x[:10], digits_small[1].y[:10]
    no_pixel = NeighborhoodSpec("compound", 0.0, 30, 3)
    a = pgd_plus(trained_cnn, x, y, AttackConfig("pgd_plus", no_pixel, step_size=0.01))
    b = grid_attack(trained_cnn, x, y, AttackConfig("grid", SPAT))
    assert torch.allclose(a.adversarial, b.adversarial, atol=1e-6)
    no_spatial = NeighborhoodSpec("compound", 0.1, 0, 0, grid_counts=(1, 1))
    c = pgd_plus(trained_cnn, x, y, AttackConfig("pgd_plus", no_spatial, step_size=0.02))
    d = pgd(trained_cnn, x, y, AttackConfig("pgd", PIX, step_size=0.02))
    assert torch.allclose(c.adversarial, d.adversarial, atol=1e-6)


def test_gridadv_plus_degenerate_budgets(trained_cnn, digits_small):
    x, y = digits_small[1].x[:10], digits_small[1].y[:10]
    a = gridadv_plus(trained_cnn, x, y, AttackConfig("gridadv_plus", NeighborhoodSpec("compound", 0.0, 30, 3), step_size=0.01))
    b = grid_attack(trained_cnn, x, y, AttackConfig("grid", SPAT))
    assert torch.allclose(a.adversarial, b.adversarial, atol=1e-6)
    ident = NeighborhoodSpec("compound", 0.1, 0, 0, grid_counts=(1, 1))
    c = gridadv_plus(trained_cnn, x, y, AttackConfig("gridadv_plus", ident, step_size=0.02))
    d = pgd(trained_cnn, x, y, AttackConfig("pgd", PIX, step_size=0.02))
    assert torch.allclose(c.adversarial, d.adversarial, atol=1e-6)


def test_pgd_plus_dominates_components(trained_cnn, digits_small):
    x, y = digits_small[1].x[:200], digits_small[1].y[:200]
    small_px = NeighborhoodSpec("pixel", epsilon_pixel=0.05)
    small_sp = NeighborhoodSpec("spatial", epsilon_rot=10, epsilon_trans=1, grid_counts=(11, 3))
    comp = NeighborhoodSpec("compound", 0.05, 10, 1, grid_counts=(11, 3))
    p = pgd(trained_cnn, x, y, AttackConfig("pgd", small_px, step_size=0.01, iterations=10)).success.float().mean()
    g = grid_attack(trained_cnn, x, y, AttackConfig("grid", small_sp, early_exit=True)).success.float().mean()
    c = pgd_plus(trained_cnn, x, y, AttackConfig("pgd_plus", comp, step_size=0.01, iterations=10, early_exit=True)).success.float().mean()
    assert c >= max(p, g)


def test_gridadv_plus_feasible(trained_cnn, digits_small):
    x, y = digits_small[1].x[:200], digits_small[1].y[:200]
    comp = NeighborhoodSpec("compound", 0.1, 30, 3)
    res = gridadv_plus(trained_cnn, x, y, AttackConfig("gridadv_plus", comp, step_size=0.02, iterations=3, early_exit=True))
    assert is_feasible(x, res, comp).all()


@pytest.mark.parametrize(
    "solver,spec",
    [
        ("fgsm", PIX),
        ("pgd", PIX),
        ("mifgsm", PIX),
        ("worst_of_k", SPAT),
        ("grid", SPAT),
        ("pgd_plus", NeighborhoodSpec("compound", 0.1, 30, 3)),
        ("gridadv_plus", NeighborhoodSpec("compound", 0.1, 30, 3)),
    ],
)
def test_query_accounting(solver, spec, trained_cnn, digits_small):
    x, y = digits_small[1].x[:4], digits_small[1].y[:4]
    cfg = AttackConfig(solver, spec, step_size=0.02, iterations=5, k_samples=7)
    res = run_attack(trained_cnn, x, y, cfg, np.random.default_rng(0))
    assert (res.queries == cfg.analytic_queries).all()
    assert is_feasible(x, res, spec).all()


def test_pseudo_label_target(trained_cnn, digits_small):
    x = digits_small[1].x[:10]
    cfg = AttackConfig("pgd", PIX, target_mode="pseudo_label")
    res = run_attack(trained_cnn, x, None, cfg)
    assert res.adversarial.shape == x.shape
    with pytest.raises(ContractError):
        run_attack(trained_cnn, x, None, AttackConfig("pgd", PIX))


SOLVER_SPECS = [
    ("fgsm", "pixel"),
    ("pgd", "pixel"),
    ("mifgsm", "pixel"),
    ("worst_of_k", "spatial"),
    ("grid", "spatial"),
    ("pgd_plus", "compound"),
    ("gridadv_plus", "compound"),
]


@settings(max_examples=40, deadline=None)
@given(
    which=st.integers(0, len(SOLVER_SPECS) - 1),
    eps=st.floats(0.0, 0.3),
    rot=st.sampled_from([0.0, 5.0, 30.0]),
    trans=st.integers(0, 3),
    init=st.booleans(),
    seed=st.integers(0, 10_000),
)
def test_feasibility_property(which, eps, rot, trans, init, seed):
    solver, kind = SOLVER_SPECS[which]
    spec = NeighborhoodSpec(kind, eps, rot, trans, grid_counts=(5, 3))
    step = max(eps, 1e-3) if kind != "spatial" else 0.01
    cfg = AttackConfig(solver, spec, step_size=min(step, 2 * eps) if eps > 0 else step, iterations=3, random_init=init, k_samples=4)
    m = build_model("mlp", seed=seed % 5, in_shape=(1, 6, 6), num_classes=3, hidden=(16,))
    g = np.random.default_rng(seed)
    x = torch.from_numpy(g.random((5, 1, 6, 6)).astype(np.float32))
    y = torch.from_numpy(g.integers(0, 3, 5))
    res = run_attack(m, x, y, cfg, g)
    assert res.adversarial.min() >= 0 and res.adversarial.max() <= 1
    assert is_feasible(x, res, spec).all()
