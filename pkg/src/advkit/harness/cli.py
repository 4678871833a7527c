"""
Command line entry point: ``advkit <subcommand> [flags]``.

Exit codes: 0 success, 1 usage or configuration error (usage text goes to
stderr), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .. import diffcore as dc
from ..attack import ATTACK_KINDS
from ..metrics import metric_report, perturbation_tfr_report, snr_db
from ..models import ArchSpec, FAMILIES, build_model, load_model, predict, save_model
from ..train import SplitPlan, TrainConfig, make_splits, train_model
from .container import read_container, write_container
from .runner import ConfigError, ExperimentConfig, child_seed, load_dataset, read_report, run_experiment
from .synth import SynthSpec, synth_dataset

log = logging.getLogger("advkit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="advkit", description="Sign-gradient adversarial attacks on EEG classifiers.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="JSON config file")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--out", help="output file or directory")

    s = sub.add_parser("synth", help="write a synthetic EEGB container")
    common(s)

    s = sub.add_parser("train", help="train target model(s) from an experiment config")
    common(s, True)
    s.add_argument("--arch", action="append", help="architecture family (repeatable)")

    for name, helptext in (("attack", "run one attack kind over the config's grid"),
                           ("sweep", "run the full architecture x attack x epsilon grid")):
        s = sub.add_parser(name, help=helptext)
        common(s, True)
        s.add_argument("--arch", action="append")
        s.add_argument("--attack", choices=ATTACK_KINDS)
        s.add_argument("--epsilon", type=float, action="append")

    s = sub.add_parser("eval", help="score a saved model on an EEGB container")
    common(s)
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--clean", help="clean reference container, for SNR")

    s = sub.add_parser("report", help="summarize a finished run directory")
    common(s)
    s.add_argument("--run", required=True, help="run directory holding report.csv")
    s.add_argument("--channel", type=int, default=0)

    s = sub.add_parser("gradcheck", help="finite-difference check of an architecture")
    common(s)
    s.add_argument("--arch", default="eegnet", choices=sorted(FAMILIES))
    s.add_argument("--classes", type=int, default=2)
    s.add_argument("--channels", type=int, default=8)
    s.add_argument("--samples", type=int, default=64)
    s.add_argument("--tol", type=float, default=None)
    return p


def _load_config(args) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.from_json(args.config)
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}\n") from exc
    except (ConfigError, ValueError) as exc:
        raise UsageError(f"invalid config {args.config}: {exc}\n") from exc
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out:
        changes["out_dir"] = args.out
    if getattr(args, "arch", None):
        changes["architectures"] = args.arch
    if getattr(args, "epsilon", None):
        changes["epsilons"] = args.epsilon
    if getattr(args, "attack", None):
        matching = [a for a in cfg.attacks if a["kind"] == args.attack]
        changes["attacks"] = matching or [{"kind": args.attack}]
    try:
        return replace(cfg, **changes)
    except (ConfigError, ValueError) as exc:
        raise UsageError(f"invalid options: {exc}\n") from exc


def cmd_synth(args) -> int:
    fields = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.seed is not None:
        fields["seed"] = args.seed
    try:
        spec = SynthSpec(**fields)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synth spec: {exc}\n") from exc
    epochs, keys = synth_dataset(spec)
    if spec.group_size > 1:
        epochs.provenance["group_keys"] = keys.tolist()
    out = write_container(epochs, args.out or "synthetic.eegb")
    print(f"wrote {epochs.n_epochs} epochs to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out_dir)
    epochs, _ = load_dataset(cfg)
    splits = make_splits(epochs, SplitPlan(**cfg.split), child_seed(cfg.seed, "split"))
    summary = []
    for fam in cfg.architectures:
        for sp in splits:
            seed = child_seed(cfg.seed, f"train/{fam}/{sp.name}")
            arch = ArchSpec(fam, epochs.n_channels, epochs.n_samples, epochs.n_classes, epochs.fs)
            train, val, test = epochs.subset(sp.train), epochs.subset(sp.val), epochs.subset(sp.test)
            model = build_model(arch, seed, train_data=train)
            model, hist = train_model(model, train, val, TrainConfig(**{**cfg.train, "seed": seed}))
            path = out / "models" / f"{fam}_{sp.name}.adwt"
            path.parent.mkdir(parents=True, exist_ok=True)
            save_model(model, path)
            hist.to_csv(out / "models" / f"{fam}_{sp.name}_history.csv")
            pred, _ = predict(model, test)
            rep = metric_report(pred, test.labels, model.n_classes)
            summary.append({"arch": fam, "split": sp.name, "model": str(path), "seed": seed,
                            "test": json.loads(rep.to_json())})
            print(f"{fam}/{sp.name}: test rca={rep.rca:.4f} bca={rep.bca:.4f} -> {path}")
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_grid(args) -> int:
    cfg = _load_config(args)
    bundle = run_experiment(cfg)
    failed = 0
    for unit in bundle.manifest["units"]:
        failed += unit.get("status") == "error"
        failed += sum(c["status"] != "ok" for c in unit["cells"])
    sys.stdout.write(bundle.csv_path.read_text())
    print(f"report: {bundle.csv_path}  manifest: {bundle.manifest_path}")
    if failed:
        print(f"{failed} cell(s) failed; see manifest", file=sys.stderr)
    return 2 if failed else 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    data = read_container(args.data)
    pred, _ = predict(model, data)
    snr = None
    if args.clean:
        snr = snr_db(read_container(args.clean), data)
    rep = metric_report(pred, data.labels, model.n_classes, snr)
    text = rep.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_report(args) -> int:
    run = Path(args.run)
    rows = read_report(run / "report.csv")
    cols = ("arch", "split", "attack", "epsilon", "clean_rca", "noisy_rca", "adv_rca", "snr_db")
    print("  ".join(f"{c:>10}" for c in cols))
    for r in rows:
        cells = []
        for c in cols:
            v = r[c]
            try:
                v = f"{float(v):.4f}" if c not in ("arch", "split", "attack") and v else v
            except ValueError:
                pass
            cells.append(f"{v:>10}")
        print("  ".join(cells))
    manifest = json.loads((run / "manifest.json").read_text())
    out = Path(args.out) if args.out else run / "tfr"
    for unit in manifest["units"]:
        if unit.get("status") == "error":
            continue
        for cell in unit["cells"]:
            if cell["status"] != "ok" or not cell["row"]["attack"].startswith("whitebox"):
                continue
            model = load_model(run / unit["model"])
            if model.n_classes != 2:
                continue
            clean = read_container(run / unit["test_set"])
            adv = read_container(run / cell["adversarial"])
            try:
                rep = perturbation_tfr_report(model, clean, adv, channel=args.channel)
            except ValueError as exc:
                print(f"skipping {cell['adversarial']}: {exc}", file=sys.stderr)
                continue
            d = out / Path(cell["adversarial"]).stem
            rep.write_csv_grids(d)
            (d / "tfr.json").write_text(rep.to_json())
            print(f"time-frequency report: {d}")
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed or 0
    rng = np.random.default_rng(seed)
    arch = ArchSpec(args.arch, args.channels, args.samples, args.classes)
    data = None
    if arch.family == "spectrocnn":
        data, _ = synth_dataset(SynthSpec(n_classes=args.classes, n_epochs=20 * args.classes,
                                          n_channels=args.channels, n_samples=args.samples,
                                          seed=seed))
    model = build_model(arch, seed, train_data=data)
    batch = rng.standard_normal((2, args.channels, args.samples))
    tol = args.tol if args.tol is not None else (1e-4 if arch.family == "spectrocnn" else 1e-5)
    rep = dc.finite_diff_check(model.graph, batch, tol=tol, seed=seed)
    print(f"arch={arch.family} max_rel_err={rep.max_rel_err:.3e} checked={rep.n_checked} "
          f"skipped={rep.n_skipped} tol={tol:g} {'PASS' if rep.passed else 'FAIL'}")
    return 0 if rep.passed else 2


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "attack": cmd_grid, "sweep": cmd_grid,
            "eval": cmd_eval, "report": cmd_report, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        if "usage:" not in str(exc):
            sys.stderr.write(parser.format_usage())
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    except Exception as exc:
        print(f"advkit: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
