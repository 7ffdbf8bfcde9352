import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import FixedLogits
from semirobust.analysis import (
    SurfaceGrid,
    Table,
    attack_accuracy,
    decision_surface,
    loss_surface,
    read_surface,
    robustness_table,
    unlabeled_sweep,
    write_surface,
)
from semirobust.attacks import AttackConfig
from semirobust.data import make_blobs, split, SplitSpec
from semirobust.exceptions import ContractError
from semirobust.models import build_model, decision_value, predict
from semirobust.neighborhood import NeighborhoodSpec
from semirobust.risks import standard_risk
from semirobust.training import LRSchedule, TrainPlan

PIX = NeighborhoodSpec("pixel", epsilon_pixel=0.1)
SPAT = NeighborhoodSpec("spatial", epsilon_rot=30, epsilon_trans=3)


@pytest.mark.parametrize("mode,spec", [("pixel", PIX), ("spatial", SPAT)])
def test_surface_center_and_shape(trained_cnn, digits_small, mode, spec):
    x, y = digits_small[1].x[0], digits_small[1].y[0]
    d = decision_surface(trained_cnn, x, y, mode, spec, grid_resolution=11)
    l = loss_surface(trained_cnn, x, y, mode, spec, grid_resolution=11)
    assert d.values.shape == (11, 11) == l.values.shape
    assert d.center == pytest.approx(float(decision_value(trained_cnn, x[None], y[None])[0]), abs=1e-6)
    with torch.no_grad():
        ce = float(F.cross_entropy(trained_cnn(x[None]), y[None]))
    assert l.center == pytest.approx(ce, abs=1e-6)
    assert (l.values >= 0).all()
    assert d.axis1["values"][0] == -d.axis1["values"][-1]


def test_surface_sign_semantics(trained_cnn, digits_small):
    x, y = digits_small[1].x[1], digits_small[1].y[1]
    d = decision_surface(trained_cnn, x, y, "spatial", SPAT, grid_resolution=9)
    from semirobust import neighborhood as nbh

    rot = np.repeat(d.axis1["values"], 9)
    shift = np.tile(d.axis2["values"], 9)
    pts = nbh.apply_spatial(x[None].expand(81, *x.shape), torch.tensor(rot), torch.tensor(np.stack([shift, shift], 1)))
    correct = (predict(trained_cnn, pts).label == y).numpy().reshape(9, 9)
    assert np.array_equal(d.values > 0, correct)


def test_correct_sample_has_positive_center(trained_cnn, digits_small):
    x, y = digits_small[1].x, digits_small[1].y
    idx = int(torch.nonzero(predict(trained_cnn, x).label == y)[0])
    assert decision_surface(trained_cnn, x[idx], y[idx], "pixel", PIX, 5).center > 0


def test_constant_classifier_flat_surface():
    const = FixedLogits(torch.zeros(10))
    x = torch.rand(1, 28, 28)
    for mode, spec in (("pixel", PIX), ("spatial", SPAT)):
        g = decision_surface(const, x, torch.tensor(3), mode, spec, 7)
        assert np.allclose(g.values, 0.0)


def test_even_resolution_rejected(trained_cnn, digits_small):
    with pytest.raises(ContractError):
        decision_surface(trained_cnn, digits_small[1].x[0], digits_small[1].y[0], "pixel", PIX, 10)


def test_loss_peak_has_low_decision_value(trained_cnn, digits_small):
    test = digits_small[1]
    violations = 0
    for i in range(20):
        d = decision_surface(trained_cnn, test.x[i], test.y[i], "pixel", PIX, 11, seed=i)
        l = loss_surface(trained_cnn, test.x[i], test.y[i], "pixel", PIX, 11, seed=i)
        peak = np.unravel_index(np.argmax(l.values), l.values.shape)
        violations += d.values[peak] > d.center
    assert violations <= 2


def test_pixel_directions_are_seeded(trained_cnn, digits_small):
    x, y = digits_small[1].x[2], digits_small[1].y[2]
    a = decision_surface(trained_cnn, x, y, "pixel", PIX, 5, seed=1).values
    b = decision_surface(trained_cnn, x, y, "pixel", PIX, 5, seed=1).values
    c = decision_surface(trained_cnn, x, y, "pixel", PIX, 5, seed=2).values
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_surface_file_round_trip(trained_cnn, digits_small, tmp_path):
    g = loss_surface(trained_cnn, digits_small[1].x[0], digits_small[1].y[0], "spatial", SPAT, 5, sample_id=7)
    back = read_surface(write_surface(g, tmp_path / "s.tsv"))
    assert back.center_sample_id == 7 and back.quantity == "loss"
    assert back.meta["model_hash"] == g.meta["model_hash"]
    assert np.allclose(back.values, g.values, rtol=1e-7)
    assert back.axis2["direction"] == g.axis2["direction"]


def test_table_round_trip(tmp_path):
    t = Table(["model", "clean", "pgd"], [{"model": "a", "clean": 91.25, "pgd": None}, {"model": "b", "clean": 80.0, "pgd": 12.5}])
    tsv, js = t.write(tmp_path / "t")
    back = Table.from_json(js.read_text())
    assert back == t
    assert tsv.read_text().splitlines()[1] == "a\t91.25\tNA"


def test_robustness_table_columns(trained_cnn, digits_small):
    test = digits_small[1]
    x, y = test.x[:100], test.y[:100]
    attacks = [
        ("grid", AttackConfig("grid", SPAT, early_exit=True)),
        ("random", AttackConfig("worst_of_k", SPAT, k_samples=1)),
    ]
    t = robustness_table({"std": trained_cnn}, attacks, x, y)
    row = t.rows[0]
    assert t.columns == ["model", "clean", "grid", "random"]
    assert row["clean"] == round(100 * (1 - standard_risk(trained_cnn, x, y)), 2)
    assert row["grid"] <= row["random"] + 0.5
    with pytest.raises(ContractError):
        robustness_table(trained_cnn, [], x, y)


def test_attack_accuracy_zero_budget(trained_cnn, digits_small):
    x, y = digits_small[1].x[:50], digits_small[1].y[:50]
    cfg = AttackConfig("pgd", NeighborhoodSpec("pixel", epsilon_pixel=0.0), step_size=0.01)
    assert attack_accuracy(trained_cnn, x, y, cfg) == pytest.approx(1 - standard_risk(trained_cnn, x, y))


def test_unlabeled_sweep_rows_and_reduction():
    blobs = make_blobs(300, seed=2)
    lab, pool = split(blobs, SplitSpec(40, 200, seed=0))
    cfg = AttackConfig("pgd", NeighborhoodSpec("pixel", epsilon_pixel=0.05), step_size=0.02, iterations=3)
    plan = TrainPlan("rt", cfg, epochs=2, batch_size=20, schedule=LRSchedule("constant", lr=0.2))
    factory = lambda: build_model("linear", seed=0, in_shape=(1, 1, 2), num_classes=2)
    table, models = unlabeled_sweep(plan, factory, lab, pool, [0, 50, 200], blobs, cfg)
    assert table.column("unlabeled") == [0, 50, 200]
    from semirobust.training import train

    rt, _ = train(plan, factory(), lab)
    assert all(torch.equal(a, b) for a, b in zip(rt.parameters(), models[0].parameters()))
    with pytest.raises(ContractError):
        unlabeled_sweep(plan, factory, lab, pool, [50, 0], blobs, cfg)
