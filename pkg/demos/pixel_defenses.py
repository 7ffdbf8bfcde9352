"""Standard training vs RT vs SRT against an l_inf PGD adversary.

1000 labeled digits plus 4000 unlabeled ones. RT regularizes prediction
stability on the labeled images only; SRT spends the same term on the
unlabeled pool as well, with the model's own predictions as targets.

    python demos/pixel_defenses.py [epochs]

The default of 20 epochs takes roughly 15 minutes on one CPU core.
"""

import sys

import torch

from semirobust.analysis import robustness_table
from semirobust.attacks import AttackConfig
from semirobust.data import SplitSpec, make_digits, split
from semirobust.models import build_model
from semirobust.neighborhood import NeighborhoodSpec
from semirobust.training import LRSchedule, TrainPlan, train

torch.set_num_threads(1)
epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 20

train_set, test = make_digits(5000, 500, seed=0)
labeled, unlabeled = split(train_set, SplitSpec(1000, 4000, seed=0))
spec = NeighborhoodSpec("pixel", epsilon_pixel=0.1)
inner = AttackConfig("pgd", spec, step_size=0.02, iterations=10)

models = {}
for objective in ("standard", "rt", "srt"):
    plan = TrainPlan(
        objective, () if objective == "standard" else inner,
        epochs=epochs, batch_size=50, schedule=LRSchedule("step", lr=0.01),
    )
    models[objective], log = train(plan, build_model("cnn", seed=0), labeled, unlabeled)
    print(f"{objective:>8}: {len(log.steps)} steps, {log.wall_clock:.0f}s")

attacks = {
    "fgsm": AttackConfig("fgsm", spec, step_size=0.1),
    "pgd20": AttackConfig("pgd", spec, step_size=0.01, iterations=20),
}
print()
print(robustness_table(models, attacks, test.x, test.y).to_tsv())
