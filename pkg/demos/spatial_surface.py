"""Decision surfaces of a standard and a spatially robust model.

Each cell is the margin p_y - max_{i != y} p_i after rotating by the row
angle and shifting diagonally by the column offset; '#' marks a correct
prediction and '.' an error. The undefended model is correct on a narrow
band around the identity, the robust one on most of the grid.

    python demos/spatial_surface.py [epochs]
"""

import sys

import torch

from semirobust.analysis import decision_surface
from semirobust.attacks import AttackConfig
from semirobust.data import SplitSpec, make_digits, split
from semirobust.models import build_model
from semirobust.neighborhood import NeighborhoodSpec
from semirobust.training import LRSchedule, TrainPlan, train

torch.set_num_threads(1)
epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10

train_set, test = make_digits(5000, 500, seed=0)
labeled, unlabeled = split(train_set, SplitSpec(1000, 4000, seed=0))
spec = NeighborhoodSpec("spatial", epsilon_rot=30, epsilon_trans=3)
sched = LRSchedule("step", lr=0.01)

standard, _ = train(TrainPlan("standard", epochs=epochs, batch_size=50, schedule=sched), build_model("cnn", seed=0), labeled)
robust, _ = train(
    TrainPlan("srt", AttackConfig("worst_of_k", spec, k_samples=10), epochs=epochs, batch_size=50, schedule=sched),
    build_model("cnn", seed=0), labeled, unlabeled,
)


def show(name, model, i=0):
    grid = decision_surface(model, test.x[i], test.y[i], "spatial", spec, grid_resolution=13)
    rot, shift = grid.axis1["values"], grid.axis2["values"]
    print(f"{name}  (rows: rotation {rot[0]:.0f}..{rot[-1]:.0f} deg, columns: diagonal shift {shift[0]:.1f}..{shift[-1]:.1f} px)")
    for r, row in zip(rot, grid.values):
        print(f"{r:6.1f}  " + "".join("#" if v > 0 else "." for v in row))
    print(f"center margin {grid.center:+.3f}, correct on {(grid.values > 0).mean():.0%} of the slice\n")


for i in range(3):
    show("standard", standard, i)
    show("srt", robust, i)
