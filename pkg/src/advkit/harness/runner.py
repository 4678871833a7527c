"""
Configuration-driven experiment grid.

For every architecture and split fold a target model is trained once and
scored on the fold's test epochs (one baseline row). Each attack and epsilon
then adds one cell holding the clean, random-noise and attacked accuracies
plus the SNR of the attacked set. Cells that raise are recorded in the
manifest and left blank in the CSV; the rest of the grid still runs.

Child seeds derive from the master seed as the first 4 bytes (big endian)
of ``sha256(f"{master}/{role}")``, so every seed in a run is fixed by the
master seed alone.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..attack import (AttackSpec, random_noise, substitute_arch, ufgsm_blackbox, ufgsm_graybox,
                      fgsm, ufgsm_whitebox)
from ..epochs import EpochSet
from ..metrics import bca, rca
from ..models import ArchSpec, build_model, load_model, predict, save_model
from ..train import SplitPlan, TrainConfig, make_splits, train_model
from .container import read_container, write_container
from .synth import SynthSpec, synth_dataset

log = logging.getLogger(__name__)

COLUMNS = ("dataset", "arch", "split", "attack", "epsilon", "clean_rca", "clean_bca",
           "noisy_rca", "noisy_bca", "adv_rca", "adv_bca", "snr_db")


class ConfigError(ValueError):
    pass


def child_seed(master: int, role: str) -> int:
    digest = hashlib.sha256(f"{master}/{role}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


@dataclass
class ExperimentConfig:
    architectures: list
    attacks: list
    epsilons: list = field(default_factory=lambda: [0.1])
    dataset: str | None = None
    synth: dict | None = None
    split: dict = field(default_factory=lambda: {"kind": "mixed"})
    train: dict = field(default_factory=dict)
    substitute_train: dict | None = None
    out_dir: str = "advkit_run"
    seed: int = 0
    name: str | None = None

    def __post_init__(self):
        if isinstance(self.architectures, str):
            self.architectures = [self.architectures]
        if not self.architectures:
            raise ConfigError("at least one architecture is required")
        self.attacks = [a if isinstance(a, dict) else {"kind": a} for a in self.attacks]
        if not self.attacks:
            raise ConfigError("at least one attack is required")
        self.epsilons = [float(e) for e in self.epsilons]
        if not self.epsilons or any(not e >= 0 for e in self.epsilons):
            raise ConfigError("epsilon list must be non-empty with values >= 0")
        # validate the nested specs early so errors surface before any training
        try:
            for a in self.attacks:
                AttackSpec(**{**a, "epsilon": self.epsilons[0]})
            SplitPlan(**self.split)
            TrainConfig(**self.train)
            for fam in self.architectures:
                ArchSpec(fam, 1, 1, 2)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        if self.dataset is None and self.synth is None:
            self.synth = {}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def dataset_name(self) -> str:
        if self.name:
            return self.name
        return Path(self.dataset).stem if self.dataset else "synthetic"


@dataclass
class ReportBundle:
    rows: list
    csv_path: Path
    manifest_path: Path
    manifest: dict

    def cells(self) -> list:
        return [r for r in self.rows if r["attack"] != "none"]

    def baselines(self) -> list:
        return [r for r in self.rows if r["attack"] == "none"]


def load_dataset(cfg: ExperimentConfig) -> tuple[EpochSet, np.ndarray | None]:
    if cfg.dataset:
        ep = read_container(cfg.dataset)
        keys = ep.provenance.get("group_keys")
        return ep, None if keys is None else np.asarray(keys)
    spec = SynthSpec(**{"seed": child_seed(cfg.seed, "synth"), **cfg.synth})
    return synth_dataset(spec)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    v = float(v)
    return "inf" if math.isinf(v) else repr(v)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in COLUMNS])
    return buf.getvalue()


def read_report(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _eps_tag(eps: float) -> str:
    return repr(float(eps)).replace(".", "p")


def _attack_label(spec: AttackSpec) -> str:
    return f"{spec.kind}:{spec.substitute}" if spec.substitute else spec.kind


def _run_attack(spec: AttackSpec, ctx: dict, seed: int):
    target, test, train = ctx["model"], ctx["test"], ctx["train"]
    eps = spec.epsilon
    sub_cfg = ctx["sub_cfg"]
    if spec.kind == "fgsm":
        return fgsm(target, test, eps)
    if spec.kind == "whitebox":
        return ufgsm_whitebox(target, test, eps)
    if spec.kind == "noise":
        return random_noise(test, eps, seed, target)
    arch = substitute_arch(spec.substitute, train, target.n_classes)
    if spec.kind == "graybox":
        return ufgsm_graybox(train, arch, target, test, eps, sub_cfg, seed=seed)
    seed_set = ctx["attacker"]
    return ufgsm_blackbox(target, seed_set.with_labels(np.full(len(seed_set), -1)), arch,
                          spec.lam, spec.n_iter, eps, test, sub_cfg, seed=seed,
                          query_budget=spec.query_budget)


def _run_unit(cfg: ExperimentConfig, epochs: EpochSet, family: str, split, out: Path):
    """Train one target and run every attack cell for it."""
    role = f"{family}/{split.name}"
    seeds = {"target": child_seed(cfg.seed, f"train/{role}")}
    train, val, test = epochs.subset(split.train), epochs.subset(split.val), epochs.subset(split.test)
    attacker = epochs.subset(split.attacker) if len(split.attacker) else val
    arch = ArchSpec(family, epochs.n_channels, epochs.n_samples, epochs.n_classes, epochs.fs)
    tcfg = TrainConfig(**{**cfg.train, "seed": seeds["target"]})
    sub_cfg = TrainConfig(**(cfg.substitute_train if cfg.substitute_train is not None else cfg.train))
    dataset = cfg.dataset_name()
    base = {"dataset": dataset, "arch": family, "split": split.name}
    rows, cells = [], []
    model = build_model(arch, seeds["target"], train_data=train)
    model, hist = train_model(model, train, val, tcfg)
    model_path = out / "models" / f"{family}_{split.name}.adwt"
    model_path.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, model_path)
    hist.to_csv(out / "models" / f"{family}_{split.name}_history.csv")
    test_path = write_container(test, out / "data" / f"test_{split.name}.eegb")
    pred, _ = predict(model, test)
    clean = (rca(pred, test.labels), bca(pred, test.labels))
    rows.append({**base, "attack": "none", "epsilon": None, "clean_rca": clean[0], "clean_bca": clean[1]})
    ctx = {"model": model, "train": train, "test": test, "attacker": attacker, "sub_cfg": sub_cfg}
    for a in cfg.attacks:
        for eps in cfg.epsilons:
            spec = AttackSpec(**{**a, "epsilon": eps})
            cell_role = f"{role}/{spec.kind}/{spec.substitute}/{eps!r}"
            row = {**base, "attack": _attack_label(spec), "epsilon": eps}
            cell = {"row": dict(row), "seeds": {}, "status": "ok"}
            try:
                nseed = child_seed(cfg.seed, f"noise/{cell_role}")
                aseed = child_seed(cfg.seed, f"attack/{cell_role}")
                cell["seeds"] = {"noise": nseed, "attack": aseed, "target": seeds["target"]}
                noisy = random_noise(test, eps, nseed, model)
                res = _run_attack(spec, ctx, aseed)
                row.update(clean_rca=clean[0], clean_bca=clean[1], noisy_rca=noisy.adv_rca,
                           noisy_bca=noisy.adv_bca, adv_rca=res.adv_rca, adv_bca=res.adv_bca,
                           snr_db=res.snr_db)
                adv = res.adversarial
                adv.provenance.update(attack=spec.kind, epsilon=eps, seed=aseed, arch=family,
                                      split=split.name)
                adv_path = out / "adversarial" / f"{family}_{split.name}_{row['attack'].replace(':', '-')}_{_eps_tag(eps)}.eegb"
                write_container(adv, adv_path)
                cell.update(adversarial=str(adv_path.relative_to(out)),
                            max_deviation=float(res.max_deviation.max(initial=0.0)),
                            meta={k: v for k, v in res.meta.items() if k != "substitute_model"})
            except Exception as exc:  # per-cell isolation
                log.warning("cell %s failed: %s", cell_role, exc)
                cell.update(status="error", error=f"{type(exc).__name__}: {exc}")
            rows.append(row)
            cells.append(cell)
    unit = {"arch": family, "split": split.name, "seeds": seeds,
            "model": str(model_path.relative_to(out)), "test_set": str(test_path.relative_to(out)),
            "best_epoch": hist.best_epoch, "stopped_epoch": hist.stopped_epoch,
            "clean_rca": clean[0], "clean_bca": clean[1], "cells": cells}
    return rows, unit


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("ADVKIT_THREADS", "1")))
    except ValueError:
        return 1


def run_experiment(cfg: ExperimentConfig) -> ReportBundle:
    """Run the grid and write ``report.csv`` and ``manifest.json`` under ``cfg.out_dir``."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    epochs, _ = load_dataset(cfg)
    split_seed = child_seed(cfg.seed, "split")
    splits = make_splits(epochs, SplitPlan(**cfg.split), split_seed)
    units = [(fam, sp) for fam in cfg.architectures for sp in splits]

    def run(u):
        fam, sp = u
        try:
            return _run_unit(cfg, epochs, fam, sp, out)
        except Exception as exc:
            log.warning("training %s/%s failed: %s", fam, sp.name, exc)
            base = {"dataset": cfg.dataset_name(), "arch": fam, "split": sp.name}
            rows = [{**base, "attack": "none", "epsilon": None}]
            rows += [{**base, "attack": _attack_label(AttackSpec(**{**a, "epsilon": e})), "epsilon": e}
                     for a in cfg.attacks for e in cfg.epsilons]
            return rows, {"arch": fam, "split": sp.name, "status": "error",
                          "error": f"{type(exc).__name__}: {exc}", "cells": []}

    with ThreadPoolExecutor(max_workers=_workers()) as pool:
        results = list(pool.map(run, units))
    rows = [r for rs, _ in results for r in rs]
    manifest = {
        "config": cfg.to_dict(),
        "master_seed": cfg.seed,
        "seed_derivation": "sha256(f'{master}/{role}')[:4] big-endian",
        "split_seed": split_seed,
        "columns": list(COLUMNS),
        "units": [u for _, u in results],
    }
    csv_path = out / "report.csv"
    csv_path.write_text(rows_to_csv(rows))
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default))
    return ReportBundle(rows, csv_path, manifest_path, manifest)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def verify_run(out_dir, tol: float = 1e-6) -> list[str]:
    """Reload every persisted model and adversarial set and recompute the recorded metrics.

    Returns a list of discrepancy messages (empty when everything re-validates).
    """
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    rows = read_report(out / "report.csv")
    problems = []
    for unit in manifest["units"]:
        if unit.get("status") == "error":
            continue
        model = load_model(out / unit["model"])
        test = read_container(out / unit["test_set"])
        pred, _ = predict(model, test)
        if abs(rca(pred, test.labels) - unit["clean_rca"]) > tol:
            problems.append(f"{unit['arch']}/{unit['split']}: clean RCA does not reproduce")
        for cell in unit["cells"]:
            if cell["status"] != "ok":
                continue
            adv = read_container(out / cell["adversarial"])
            pred, _ = predict(model, adv)
            match = [r for r in rows if r["arch"] == unit["arch"] and r["split"] == unit["split"]
                     and r["attack"] == cell["row"]["attack"]
                     and r["epsilon"] and float(r["epsilon"]) == cell["row"]["epsilon"]]
            if not match:
                problems.append(f"{cell['adversarial']}: no report row")
                continue
            if abs(rca(pred, test.labels) - float(match[0]["adv_rca"])) > tol:
                problems.append(f"{cell['adversarial']}: attacked RCA does not reproduce")
            if np.abs(adv.data.astype(np.float64) - test.data).max(initial=0) > cell["row"]["epsilon"] + tol:
                problems.append(f"{cell['adversarial']}: deviation exceeds epsilon")
    return problems
