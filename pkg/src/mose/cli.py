"""Command-line driver: ``mose {gen-data,train,eval,solve}``.

Machine-readable output (JSON, CSV) goes to stdout or files under ``--out``;
human summaries go to stderr. Exit codes: 0 ok, 2 config/spec error,
3 training divergence, 4 evaluation incompatibility.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import ot
from .data import DatasetSpec, FormatError, SpecError, generate, read_dataset, write_dataset
from .metrics import evaluate
from .model import CheckpointError, load_model
from .train import Trainer, TrainingDiverged, load_config_text

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_INCOMPATIBLE = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _say(args, msg: str) -> None:
    if not getattr(args, "quiet", False):
        print(msg, file=sys.stderr)


def _read_text(path) -> str:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_CONFIG, f"config file not found: {p}")
    return p.read_text()


def _load_dataset(path):
    try:
        return read_dataset(path)
    except FileNotFoundError as e:
        raise CliError(EXIT_CONFIG, f"dataset not found: {e.filename}") from None
    except FormatError as e:
        raise CliError(EXIT_CONFIG, f"bad dataset: {e}") from None


# ------------------------------------------------------------------ gen-data


def cmd_gen_data(args) -> int:
    doc = (yaml.safe_load(_read_text(args.config)) or {}) if args.config else {}
    if not isinstance(doc, dict):
        raise SpecError("config", "top level must be a mapping")
    doc = doc.get("dataset", doc)
    if args.seed is not None:
        doc["seed"] = args.seed
    spec = DatasetSpec.from_dict(doc).validate()
    ds = generate(spec)
    out = write_dataset(ds, args.out)
    manifest = json.loads((out / "manifest.json").read_text())
    sums = {f["file"]: f["sha256"] for split in manifest["splits"].values() for f in split["files"].values()}
    print(json.dumps({"out": str(out), "seed": spec.seed, "checksums": sums}, sort_keys=True))
    _say(args, f"wrote {spec.n_train} train / {spec.n_val} val images to {out}")
    return EXIT_OK


# --------------------------------------------------------------------- train


def cmd_train(args) -> int:
    text = _read_text(args.config)
    config = load_config_text(text)
    if args.seed is not None:
        config.seed = args.seed
    if args.epochs is not None:
        config.epochs = args.epochs
    ds = _load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(ds, config)
    if args.resume:
        trainer.restore(args.resume)
        _say(args, f"resuming at epoch {trainer.next_epoch}")
    log_path = out / "train_log.jsonl"
    mode = "a" if args.resume else "w"
    with open(log_path, mode) as fh:
        def log_fn(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
            _say(args, f"epoch {rec['epoch']:4d}  loss {rec['loss']:.4f}  kl {rec['kl']:.2e}  "
                       f"gamma {rec['gamma']:.3f}")
        try:
            trainer.fit(log_fn=log_fn)
        except TrainingDiverged as e:
            trainer.next_epoch = e.epoch
            path = trainer.save(out / "last_good.ckpt", text, {"diverged": str(e)})
            print(json.dumps({"status": "diverged", "epoch": e.epoch, "checkpoint": str(path)}))
            _say(args, f"training diverged at epoch {e.epoch}: {e}; last good state in {path}")
            return EXIT_DIVERGED
    path = trainer.save(out / "model.ckpt", text, {"seed": config.seed})
    print(json.dumps({"status": "ok", "checkpoint": str(path), "log": str(log_path),
                      "epochs": trainer.next_epoch, "seed": config.seed}))
    return EXIT_OK


# ---------------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    try:
        model, _, meta = load_model(args.checkpoint)
    except (CheckpointError, FileNotFoundError) as e:
        raise CliError(EXIT_CONFIG, f"cannot load checkpoint: {e}") from None
    ds = _load_dataset(args.data)
    seed = args.seed if args.seed is not None else 0
    if args.dump_samples and not args.out:
        raise CliError(EXIT_CONFIG, "--dump-samples needs --out")
    kept = [] if args.dump_samples else None
    try:
        report, curve = evaluate(model, ds, args.split, args.repr, args.samples, seed, collect=kept)
    except ValueError as e:
        raise CliError(EXIT_INCOMPATIBLE, str(e)) from None
    doc = {**report.to_dict(), "seed": seed, "split": args.split}
    text = json.dumps(doc, sort_keys=True, indent=2)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(text + "\n")
        (out / "reliability.csv").write_text(curve.to_csv())
        if kept is not None:
            np.savez(out / "samples.npz", maps=np.stack([d.maps for d in kept]).astype(np.uint8),
                     weights=np.stack([d.weights for d in kept]),
                     experts=np.stack([d.experts for d in kept]))
    print(text)
    _say(args, f"{args.repr} N={report.num_samples}: GED {report.ged:.4f}  M-IoU {report.m_iou:.4f}  "
               f"ECE {report.ece:.4f}")
    return EXIT_OK


# --------------------------------------------------------------------- solve


def _read_matrix(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_CONFIG, f"cost file not found: {p}")
    text = p.read_text().strip()
    try:
        if text.startswith("["):
            arr = np.array(json.loads(text), dtype=np.float64)
        else:
            arr = np.array([[float(x) for x in row] for row in csv.reader(text.splitlines()) if row])
    except ValueError as e:
        raise CliError(EXIT_CONFIG, f"unparseable cost file: {e}") from None
    if arr.ndim == 1:
        arr = arr[None]
    return arr


def _parse_vector(text: str | None, n: int, name: str) -> np.ndarray:
    if text is None:
        return np.full(n, 1.0 / n)
    v = np.array([float(x) for x in text.split(",")])
    if v.shape != (n,):
        raise CliError(EXIT_CONFIG, f"{name} needs {n} entries, got {len(v)}")
    if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-9:
        raise CliError(EXIT_CONFIG, f"{name} must be non-negative and sum to 1")
    return v


def cmd_solve(args) -> int:
    cost = _read_matrix(args.cost)
    n, m = cost.shape
    v = _parse_vector(args.v, m, "--v")
    gamma = 1.0 if args.gamma is None else args.gamma
    try:
        plan = ot.solve_relaxed_greedy(cost, v, gamma)
    except ot.InfeasibleError as e:
        raise CliError(EXIT_CONFIG, str(e)) from None
    doc = {"gamma": gamma, "method": plan.method,
           "plan": plan.plan.tolist(), "objective": plan.objective(cost)}
    if args.oracle:
        exact = ot.solve_exact_lp(cost, v, gamma=gamma)
        best = exact.objective(cost)
        doc["oracle_objective"] = best
        doc["gap"] = doc["objective"] - best
        doc["relative_gap"] = 0.0 if best == 0 else doc["gap"] / abs(best)
    print(json.dumps(doc, sort_keys=True))
    _say(args, f"objective {doc['objective']:.6g}" + (f"  gap {doc['gap']:.3g}" if args.oracle else ""))
    return EXIT_OK


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mose", description=__doc__.splitlines()[0])
    p.add_argument("--quiet", action="store_true", help="suppress stderr summaries")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--config", help="YAML dataset spec (defaults when omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int, help="override the configured epoch count")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--samples", type=int, help="total sample budget N")
    e.add_argument("--repr", choices=["compact", "standard"], default="compact")
    e.add_argument("--split", default="val")
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.add_argument("--dump-samples", action="store_true",
                   help="also write every predicted sample set to OUT/samples.npz")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("solve", help="solve one coupling problem")
    s.add_argument("--cost", required=True, help="CSV or JSON cost matrix (N x M)")
    s.add_argument("--v", help="comma-separated label marginals (uniform by default)")
    s.add_argument("--gamma", type=float)
    s.add_argument("--oracle", action="store_true", help="also solve exactly and report the gap")
    s.set_defaults(func=cmd_solve)

    for sp in (g, t, e, s):
        sp.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except SpecError as e:
        print(f"error: invalid {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
