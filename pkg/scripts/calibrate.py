"""Train the flip preset and report how well the predicted mixture is calibrated.

Prints per-epoch progress to stderr and a JSON summary to stdout: mode ratios
against the true mode probabilities, flip ratios, ECE, and GED of both the
compact and standard representations at the same sample budget.
"""
import argparse
import json
import sys
import time
from pathlib import Path

from common import PRESET, load_preset
from mose.metrics import evaluate
from mose.train import Trainer


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(PRESET))
    p.add_argument("--epochs", type=int, help="override the preset epoch count")
    p.add_argument("--seed", type=int)
    p.add_argument("--every", type=int, default=25, help="evaluate every N epochs")
    p.add_argument("--out", help="directory for model.ckpt, report.json and reliability.csv")
    a = p.parse_args()
    overrides = {k: v for k, v in (("epochs", a.epochs), ("seed", a.seed)) if v is not None}
    ds, cfg = load_preset(a.config, **overrides)
    trainer = Trainer(ds, cfg)
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        rec = trainer.run_epoch(epoch)
        trainer.next_epoch = epoch + 1
        if (epoch + 1) % a.every == 0 or epoch + 1 == cfg.epochs:
            rep, _ = evaluate(trainer.model, ds, "val", "compact", samples=cfg.num_samples, seed=cfg.seed)
            print(f"epoch {epoch + 1:4d}  loss {rec['loss']:.4f}  kl {rec['kl_max']:.1e}  "
                  f"mode TV {rep.mode_tv:.4f}  ECE {rep.ece:.4f}  GED {rep.ged:.4f}  "
                  f"{time.perf_counter() - t0:.0f}s", file=sys.stderr, flush=True)
    compact, curve = evaluate(trainer.model, ds, "val", "compact", samples=cfg.num_samples, seed=cfg.seed)
    standard, _ = evaluate(trainer.model, ds, "val", "standard", samples=cfg.num_samples, seed=cfg.seed)
    summary = {
        "epochs": cfg.epochs,
        "seconds": round(time.perf_counter() - t0, 1),
        "final_kl_max": rec["kl_max"],
        "compact": compact.to_dict(),
        "mode_tv": compact.mode_tv,
        "standard_ged": standard.ged,
        "ged_gap": abs(compact.ged - standard.ged),
    }
    if a.out:
        out = Path(a.out)
        out.mkdir(parents=True, exist_ok=True)
        trainer.save(out / "model.ckpt", Path(a.config).read_text())
        (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        (out / "reliability.csv").write_text(curve.to_csv())
    print(json.dumps(summary, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
