"""Command line entry point: ``semirobust {train,attack,evaluate,surface,sweep}``.

Every run writes into its own output directory: a ``manifest.jsonl`` with
one start and one end record, plus the subcommand's artifacts.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .analysis import Table, decision_surface, loss_surface, unlabeled_sweep, write_surface
from .attacks import SOLVERS, AttackConfig, run_attack
from .data import Dataset, SplitSpec, load_dataset, make_blobs, make_digits, split
from .exceptions import ConfigError, ContractError, DataError, NumericalError
from .models import MODELS, build_model, load_checkpoint, parameter_hash
from .neighborhood import NeighborhoodSpec
from .risks import adversarial_risk_attack, enumerated_risks, robust_risk_attack, standard_risk
from .training import OBJECTIVES, LRSchedule, TrainPlan, train

log = logging.getLogger("semirobust")

SCHEMA = "semirobust/v1"
OUT_ENV = "SEMIROBUST_OUT"
EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_INTERRUPTED = 2, 3, 4, 130

DEFAULTS = {
    "schema": SCHEMA,
    "seed": 0,
    "data": {
        "format": "digits",
        "train_images": None,
        "train_labels": None,
        "test_images": None,
        "test_labels": None,
        "num_classes": 10,
        "n_train": 5000,
        "n_test": 500,
        "size": 28,
        "data_seed": 0,
        "labeled": 1000,
        "unlabeled": None,
        "split_seed": None,
    },
    "model": {"arch": "cnn", "checkpoint": None},
    "neighborhood": {
        "kind": "pixel",
        "epsilon_pixel": 0.1,
        "epsilon_rot": 0.0,
        "epsilon_trans": 0,
        "grid_counts": [31, 5],
    },
    "attack": {
        "solver": "pgd",
        "step_size": 0.02,
        "iterations": 10,
        "k_samples": 10,
        "momentum": 1.0,
        "random_init": False,
        "signed": True,
        "track_best": True,
        "early_exit": False,
        "spatial_search": "grid",
    },
    "train": {
        "objective": "standard",
        "lambda": 1.0,
        "epochs": 10,
        "batch_size": 100,
        "schedule": {"kind": "step", "lr": 0.05, "milestones": [0.5, 0.75], "gamma": 0.1, "peak_fraction": 0.4},
        "momentum": 0.9,
        "weight_decay": 0.0,
        "augment": False,
        "checkpoint_every": 0,
        "extra_attacks": [],
    },
    "evaluate": {"attacks": [], "enumerate": True, "max_samples": None},
    "surface": {"mode": "pixel", "resolution": 21, "sample": 0, "direction_seed": 0},
    "sweep": {"sizes": [0, 1000, 4000]},
}

# keys of an attack entry that are not AttackConfig fields
_ATTACK_EXTRA = ("name", "neighborhood")


@dataclass
class ExperimentConfig:
    """Fully defaulted and validated configuration; ``raw`` is the snapshot."""

    raw: dict
    spec: NeighborhoodSpec
    attack: AttackConfig
    plan: TrainPlan
    eval_attacks: list[tuple[str, AttackConfig]] = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.raw["seed"]


def _merge(defaults: dict, given: dict, where: str) -> dict:
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"{where}{unknown[0]}: unknown key")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{key}: must be a mapping")
            out[key] = _merge(defaults[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _spec(d: dict, where: str) -> NeighborhoodSpec:
    d = _merge(DEFAULTS["neighborhood"], d, where)
    for key in ("epsilon_pixel", "epsilon_rot", "epsilon_trans"):
        if d[key] < 0:
            raise ConfigError(f"{where}{key}: budget must be ≥ 0")
    try:
        return NeighborhoodSpec(
            d["kind"], float(d["epsilon_pixel"]), float(d["epsilon_rot"]), int(d["epsilon_trans"]), tuple(d["grid_counts"])
        )
    except ContractError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _attack(d: dict, spec: NeighborhoodSpec, where: str) -> AttackConfig:
    fields = {k: v for k, v in d.items() if k not in _ATTACK_EXTRA}
    unknown = sorted(set(fields) - set(DEFAULTS["attack"]))
    if unknown:
        raise ConfigError(f"{where}{unknown[0]}: unknown key")
    fields = {**DEFAULTS["attack"], **fields}
    if fields["solver"] not in SOLVERS:
        raise ConfigError(f"{where}solver: must be one of {list(SOLVERS)}")
    try:
        return AttackConfig(spec=spec, **fields)
    except ContractError as exc:
        raise ConfigError(f"{where}solver: {fields['solver']!r} is incompatible with this neighborhood ({exc})") from exc


def validate_config(given: dict) -> ExperimentConfig:
    if not isinstance(given, dict):
        raise ConfigError("config: top level must be a mapping")
    schema = given.get("schema", SCHEMA)
    if schema != SCHEMA:
        raise ConfigError(f"schema: expected {SCHEMA!r}, got {schema!r}")
    raw = _merge(DEFAULTS, given, "")
    if raw["data"]["split_seed"] is None:
        raw["data"]["split_seed"] = raw["seed"]
    if raw["model"]["arch"] not in MODELS:
        raise ConfigError(f"model.arch: must be one of {sorted(MODELS)}")
    tr = raw["train"]
    if tr["lambda"] < 0:
        raise ConfigError("train.lambda: lambda must be ≥ 0")
    if tr["objective"] not in OBJECTIVES:
        raise ConfigError(f"train.objective: must be one of {list(OBJECTIVES)}")
    spec = _spec(raw["neighborhood"], "neighborhood.")
    attack = _attack(raw["attack"], spec, "attack.")
    extra = []
    for i, entry in enumerate(tr["extra_attacks"]):
        where = f"train.extra_attacks[{i}]."
        extra.append(_attack(entry, _spec(entry.get("neighborhood", {}), where + "neighborhood."), where))
    try:
        sched = LRSchedule(**{**tr["schedule"], "milestones": tuple(tr["schedule"]["milestones"])})
        plan = TrainPlan(
            tr["objective"],
            attacks=(attack, *extra),
            lam=float(tr["lambda"]),
            epochs=int(tr["epochs"]),
            batch_size=int(tr["batch_size"]),
            schedule=sched,
            momentum=float(tr["momentum"]),
            weight_decay=float(tr["weight_decay"]),
            seed=int(raw["seed"]),
            augment=bool(tr["augment"]),
            checkpoint_every=int(tr["checkpoint_every"]),
        )
    except ContractError as exc:
        raise ConfigError(f"train: {exc}") from exc
    evals = []
    for i, entry in enumerate(raw["evaluate"]["attacks"]):
        where = f"evaluate.attacks[{i}]."
        nb = entry.get("neighborhood")
        espec = spec if nb is None else _spec(nb, where + "neighborhood.")
        evals.append((entry.get("name", entry.get("solver", f"attack{i}")), _attack(entry, espec, where)))
    if not evals:
        evals = [(attack.solver, attack)]
    return ExperimentConfig(raw, spec, attack, plan, evals)


def parse_config(path: str | Path | None, overrides: dict | None = None) -> ExperimentConfig:
    """Read a YAML config (or start from defaults) and validate everything."""
    given: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            given = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    for key, value in (overrides or {}).items():
        node = given
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return validate_config(given)


def code_version() -> str:
    digest = hashlib.sha256()
    for src in sorted(Path(__file__).parent.glob("*.py")):
        digest.update(src.read_bytes())
    return f"{__version__}+{digest.hexdigest()[:12]}"


class Manifest:
    """Append-only run record: a start line, then one end line."""

    def __init__(self, out: Path, command: str, cfg: ExperimentConfig):
        self.path = out / "manifest.jsonl"
        self.out = out
        self.artifacts: list[str] = []
        self.queries = 0
        self._write({
            "event": "start",
            "command": command,
            "config": cfg.raw,
            "seed": cfg.seed,
            "code_version": code_version(),
            "started": time.time(),
        })

    def _write(self, record):
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def add(self, *paths):
        for p in paths:
            rel = str(Path(p).relative_to(self.out))
            if rel not in self.artifacts:
                self.artifacts.append(rel)

    def finish(self, status: str, error: str | None = None):
        missing = [a for a in self.artifacts if not (self.out / a).exists()]
        self._write({
            "event": "end",
            "status": status,
            "error": error,
            "ended": time.time(),
            "artifacts": [a for a in self.artifacts if a not in missing],
            "attack_queries": self.queries,
        })


def read_manifest(out: str | Path) -> list[dict]:
    return [json.loads(line) for line in (Path(out) / "manifest.jsonl").read_text().splitlines() if line]


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.raw["data"]
    fmt = d["format"]
    if fmt == "digits":
        return make_digits(d["n_train"], d["n_test"], seed=d["data_seed"], size=d["size"])
    if fmt == "blobs":
        return make_blobs(d["n_train"], seed=d["data_seed"], num_classes=d["num_classes"]), make_blobs(
            d["n_test"], seed=d["data_seed"] + 1, num_classes=d["num_classes"]
        )
    if fmt in ("idx", "imagedir"):
        if d["train_images"] is None or (d["test_images"] is None):
            raise ConfigError("data.train_images: idx/imagedir formats need train_images and test_images paths")
        tr = load_dataset(d["train_images"], fmt, d["train_labels"], d["num_classes"])
        te = load_dataset(d["test_images"], fmt, d["test_labels"], d["num_classes"])
        return tr, te
    raise ConfigError(f"data.format: unknown format {fmt!r}")


def _model_from(cfg: ExperimentConfig, shape, num_classes, checkpoint=None):
    ckpt = checkpoint or cfg.raw["model"]["checkpoint"]
    if ckpt is not None:
        if not Path(ckpt).exists():
            raise DataError(f"checkpoint {ckpt} does not exist")
        return load_checkpoint(ckpt)
    return build_model(cfg.raw["model"]["arch"], seed=cfg.seed, in_shape=tuple(shape), num_classes=num_classes)


def _require_checkpoint(cfg, args):
    ckpt = args.checkpoint or cfg.raw["model"]["checkpoint"]
    if ckpt is None:
        raise ConfigError("model.checkpoint: this subcommand needs a trained checkpoint (--checkpoint)")
    return _model_from(cfg, None, None, ckpt)


def _eval_set(cfg, test: Dataset, args) -> Dataset:
    if test.y is None:
        raise DataError("the evaluation set has no labels")
    sl = getattr(args, "slice", None)
    if sl:
        a, _, b = sl.partition(":")
        idx = np.arange(len(test))[slice(int(a) if a else None, int(b) if b else None)]
        return test.subset(idx)
    cap = cfg.raw["evaluate"]["max_samples"]
    return test.subset(np.arange(min(cap, len(test)))) if cap else test


def cmd_train(cfg: ExperimentConfig, out: Path, manifest: Manifest, args) -> None:
    train_set, _ = load_data(cfg)
    d = cfg.raw["data"]
    labeled, unlabeled = split(train_set, SplitSpec(d["labeled"], d["unlabeled"], seed=d["split_seed"]))
    model = _model_from(cfg, train_set.x.shape[1:], train_set.num_classes)
    manifest.add(out / "train_log.jsonl")
    try:
        _, tlog = train(cfg.plan, model, labeled, unlabeled, out_dir=out)
    finally:
        for name in ("checkpoint_last_good.pt", *(p.name for p in out.glob("checkpoint_epoch*.pt"))):
            if (out / name).exists():
                manifest.add(out / name)
    manifest.queries += tlog.inner_queries
    manifest.add(out / "model.pt")
    summary = {
        "objective": cfg.plan.objective,
        "steps": len(tlog.steps),
        "inner_queries": tlog.inner_queries,
        "outer_samples": tlog.outer_samples,
        "final_loss": tlog.steps[-1]["loss"] if tlog.steps else None,
        "model_hash": parameter_hash(model),
    }
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    manifest.add(out / "train_summary.json")


def cmd_attack(cfg: ExperimentConfig, out: Path, manifest: Manifest, args) -> None:
    _, test = load_data(cfg)
    data = _eval_set(cfg, test, args)
    model = _require_checkpoint(cfg, args)
    rng = np.random.default_rng(cfg.seed)
    res = run_attack(model, data.x, data.y, cfg.attack, rng)
    manifest.queries += res.total_queries
    rows = [
        {"index": i, "label": int(data.y[i]), "success": int(res.success[i]), "loss": round(float(res.loss[i]), 6), "queries": int(res.queries[i])}
        for i in range(len(data))
    ]
    table = Table(["index", "label", "success", "loss", "queries"], rows, float_format=".6g")
    manifest.add(*table.write(out / "attack"))
    torch.save(res.adversarial, out / "adversarial.pt")
    manifest.add(out / "adversarial.pt")


def cmd_evaluate(cfg: ExperimentConfig, out: Path, manifest: Manifest, args) -> None:
    _, test = load_data(cfg)
    data = _eval_set(cfg, test, args)
    model = _require_checkpoint(cfg, args)
    std = standard_risk(model, data.x, data.y)
    rows = [_risk_row("clean", "standard", std, std, float("nan"), len(data), 0)]
    for name, acfg in cfg.eval_attacks:
        rng = np.random.default_rng(cfg.seed)
        rep = adversarial_risk_attack(model, data.x, data.y, acfg, rng)
        rob = robust_risk_attack(model, data.x, acfg, np.random.default_rng(cfg.seed))
        queries = rep.queries + rob.queries
        manifest.queries += queries
        rows.append(_risk_row(name, "attack_bound", std, rep.dataset_adversarial, rob.dataset_robust, len(data), queries))
    specs = {cfg.spec.kind: cfg.spec, **{a.spec.kind: a.spec for _, a in cfg.eval_attacks}}
    if cfg.raw["evaluate"]["enumerate"] and "spatial" in specs:
        rep = enumerated_risks(model, data.x, data.y, specs["spatial"])
        rows.append(_risk_row("spatial_grid", "enumerated", std, rep.dataset_adversarial, rep.dataset_robust, len(data), specs["spatial"].grid_size * len(data)))
    table = Table(["row", "mode", "standard_risk", "adversarial_risk", "robust_risk", "accuracy", "n_samples", "queries"], rows, float_format=".6g")
    manifest.add(*table.write(out / "evaluate"))


def _risk_row(name, mode, std, adv, rob, n, queries):
    r6 = lambda v: None if v != v else round(v, 6)
    return {
        "row": name,
        "mode": mode,
        "standard_risk": r6(std),
        "adversarial_risk": r6(adv),
        "robust_risk": r6(rob),
        "accuracy": round(100 * (1 - adv), 2),
        "n_samples": n,
        "queries": queries,
    }


def cmd_surface(cfg: ExperimentConfig, out: Path, manifest: Manifest, args) -> None:
    _, test = load_data(cfg)
    s = cfg.raw["surface"]
    idx = s["sample"]
    if not 0 <= idx < len(test):
        raise DataError(f"surface.sample {idx} is outside the evaluation set")
    model = _require_checkpoint(cfg, args)
    spec = cfg.spec
    kw = dict(mode=s["mode"], spec=spec, grid_resolution=s["resolution"], seed=s["direction_seed"], sample_id=idx)
    try:
        grids = [decision_surface(model, test.x[idx], test.y[idx], **kw), loss_surface(model, test.x[idx], test.y[idx], **kw)]
    except ContractError as exc:
        raise ConfigError(f"surface: {exc}") from exc
    for g in grids:
        manifest.add(write_surface(g, out / f"surface_{g.quantity}.tsv"))


def cmd_sweep(cfg: ExperimentConfig, out: Path, manifest: Manifest, args) -> None:
    train_set, test = load_data(cfg)
    d = cfg.raw["data"]
    sizes = cfg.raw["sweep"]["sizes"]
    labeled, pool = split(train_set, SplitSpec(d["labeled"], d["unlabeled"], seed=d["split_seed"]))
    factory = lambda: build_model(cfg.raw["model"]["arch"], seed=cfg.seed, in_shape=tuple(train_set.x.shape[1:]), num_classes=train_set.num_classes)
    _, eval_attack = cfg.eval_attacks[0]
    try:
        table, _ = unlabeled_sweep(cfg.plan, factory, labeled, pool, sizes, _eval_set(cfg, test, args), eval_attack, seed=cfg.seed)
    except ContractError as exc:
        raise ConfigError(f"sweep.sizes: {exc}") from exc
    manifest.add(*table.write(out / "sweep"))


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "evaluate": cmd_evaluate, "surface": cmd_surface, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    common.add_argument("--checkpoint", help="trained model for attack/evaluate/surface")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="semirobust", description="Robust and semi-supervised robust training experiments.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model")
    atk = sub.add_parser("attack", parents=[common], help="attack a checkpoint, one row per sample")
    atk.add_argument("--solver", choices=SOLVERS)
    atk.add_argument("--kind", choices=("pixel", "spatial", "compound"), help="neighborhood kind")
    atk.add_argument("--eps", type=float, help="pixel budget")
    atk.add_argument("--eps-rot", type=float, help="rotation budget in degrees")
    atk.add_argument("--eps-trans", type=int, help="translation budget in pixels")
    atk.add_argument("--alpha", type=float, help="step size")
    atk.add_argument("--iterations", type=int)
    atk.add_argument("--k", type=int, help="samples for worst_of_k")
    atk.add_argument("--slice", help="evaluation samples as start:stop")
    ev = sub.add_parser("evaluate", parents=[common], help="risk report for a checkpoint")
    ev.add_argument("--slice", help="evaluation samples as start:stop")
    sub.add_parser("surface", parents=[common], help="decision and loss surfaces around one sample")
    sw = sub.add_parser("sweep", parents=[common], help="SRT accuracy versus unlabeled-set size")
    sw.add_argument("--slice", help="evaluation samples as start:stop")
    return parser


_FLAG_KEYS = {
    "solver": "attack.solver",
    "kind": "neighborhood.kind",
    "eps": "neighborhood.epsilon_pixel",
    "eps_rot": "neighborhood.epsilon_rot",
    "eps_trans": "neighborhood.epsilon_trans",
    "alpha": "attack.step_size",
    "iterations": "attack.iterations",
    "k": "attack.k_samples",
    "seed": "seed",
}


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / args.command


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    torch.set_num_threads(max(1, args.threads))
    overrides = {key: getattr(args, flag) for flag, key in _FLAG_KEYS.items() if getattr(args, flag, None) is not None}
    if args.command == "attack":
        # flags redefine the single attack; evaluation entries are irrelevant here
        overrides["evaluate.attacks"] = []
    try:
        cfg = parse_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    if (out / "manifest.jsonl").exists():
        print(f"config error: {out} already holds a run; choose a fresh --out", file=sys.stderr)
        return EXIT_CONFIG
    manifest = Manifest(out, args.command, cfg)
    try:
        COMMANDS[args.command](cfg, out, manifest, args)
    except KeyboardInterrupt:
        manifest.finish("incomplete", "interrupted")
        print("interrupted; partial artifacts kept", file=sys.stderr)
        return EXIT_INTERRUPTED
    except ConfigError as exc:
        manifest.finish("failed", str(exc))
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        manifest.finish("failed", str(exc))
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        manifest.finish("failed", str(exc))
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractError as exc:
        manifest.finish("failed", str(exc))
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    manifest.finish("complete")
    log.info("run written to %s", out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
