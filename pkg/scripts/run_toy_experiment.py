"""Desk-scale experiment: synthetic highway data, both training stages, per-horizon report.

    python3 scripts/run_toy_experiment.py --out runs/toy
"""
import argparse
import dataclasses
import json
import logging
import time
from pathlib import Path

from c2ftp.config import Config
from c2ftp.data import SceneTensors, SyntheticConfig, generate_synthetic, prepare_scenes, split_dataset
from c2ftp.evaluation import ade_fde, horizon_report, run_predictions
from c2ftp.pipeline import save_checkpoint, train_interaction, train_interaction_standalone, train_refiner


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="runs/toy")
    p.add_argument("--agents", type=int, default=3000)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--stage1-epochs", type=int, default=20)
    p.add_argument("--refiner-epochs", type=int, default=60)
    p.add_argument("--stage2-epochs", type=int, default=8)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--tau", type=int, default=10)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    start = time.perf_counter()
    synth = SyntheticConfig(agents=args.agents, duration=8.0, seed=args.seed, straight=0.4, lane_change=0.3, brake=0.3)
    parts = split_dataset(prepare_scenes(generate_synthetic(synth), 10), 0)
    tr, va, te = (SceneTensors(parts[r]) for r in ("train", "val", "test"))
    print(f"scenes: train {len(tr)}, val {len(va)}, test {len(te)}")

    base = Config(batch_size=32)
    s1 = train_interaction_standalone(tr, va, dataclasses.replace(
        base, epochs=args.stage1_epochs, lr=2e-3, decay=0.5, decay_period=5, mse_warmup_epochs=10))
    rf = train_refiner(tr, va, dataclasses.replace(base, epochs=args.refiner_epochs, lr=1e-3, batch_size=64))
    s2 = train_interaction(tr, va, rf, dataclasses.replace(base, epochs=args.stage2_epochs, lr=5e-4, decay=0.5,
                                                           decay_period=4), init=s1)
    for name, ck in (("refiner", rf), ("standalone", s1), ("full", s2)):
        save_checkpoint(ck, out / f"{name}.ckpt")

    nll = [h["val_loss"] for h in s1.history]
    _, coarse, refined, _ = run_predictions(s2, te, args.k, args.tau, 0)
    truth = te.future.numpy().astype(float)
    summary = {
        "stage1_val_nll": {"epoch0": nll[0], "final": nll[-1]},
        f"coarse_best_of_{args.k}_ade": ade_fde(coarse, truth, "best_of_k")[0],
        f"refined_best_of_{args.k}_ade": ade_fde(refined, truth, "best_of_k")[0],
        "seconds": time.perf_counter() - start,
    }
    report = horizon_report(s2, te, k=args.k, tau=args.tau, seed=0, dataset=f"synthetic-{args.agents}",
                            checkpoint_id="full.ckpt")
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(report.table())
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
