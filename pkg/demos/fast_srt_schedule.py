"""Single-step SRT with a cyclic learning rate vs ten-step SRT.

The fast variant replaces PGD-10 in the inner step with one FGSM step of
size 1.25 eps from a uniform random start. The script prints the cyclic
schedule, per-epoch times, and PGD-20 accuracy of both models.

    python demos/fast_srt_schedule.py [epochs]
"""

import sys

import numpy as np
import torch

from semirobust.analysis import attack_accuracy
from semirobust.attacks import AttackConfig
from semirobust.data import SplitSpec, make_digits, split
from semirobust.models import build_model
from semirobust.neighborhood import NeighborhoodSpec
from semirobust.training import LRSchedule, TrainPlan, cyclic_lr, train

torch.set_num_threads(1)
epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10

print("cyclic schedule, peak 0.01 at 40% of training:")
print("  " + " ".join(f"{cyclic_lr(t, 100, 0.01, 0.4):.3f}" for t in range(0, 101, 10)))

train_set, test = make_digits(5000, 500, seed=0)
labeled, unlabeled = split(train_set, SplitSpec(1000, 4000, seed=0))
spec = NeighborhoodSpec("pixel", epsilon_pixel=0.1)
inner = AttackConfig("pgd", spec, step_size=0.02, iterations=10)
evaluation = AttackConfig("pgd", spec, step_size=0.01, iterations=20)

runs = {
    "srt (pgd-10, step lr)": TrainPlan("srt", inner, epochs=epochs, batch_size=50, schedule=LRSchedule("step", lr=0.01)),
    "fast srt (fgsm, cyclic lr)": TrainPlan("fast_srt", inner, epochs=epochs, batch_size=50, schedule=LRSchedule("cyclic", lr=0.01)),
}
for name, plan in runs.items():
    model, log = train(plan, build_model("cnn", seed=0), labeled, unlabeled)
    per_epoch = np.mean([e["seconds"] for e in log.epochs])
    acc = attack_accuracy(model, test.x, test.y, evaluation)
    print(f"{name:28s} {per_epoch:6.2f}s/epoch  inner queries {log.inner_queries:>8d}  pgd-20 accuracy {acc:.3f}")
