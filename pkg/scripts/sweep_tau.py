"""Latency and best-of-K accuracy against the number of denoising steps.

    python3 scripts/sweep_tau.py --ckpt runs/toy/full.ckpt --agents 3000 --taus 0 3 10 15
"""
import argparse

from c2ftp.data import SyntheticConfig, generate_synthetic, prepare_scenes, split_dataset
from c2ftp.evaluation import sweep_tau
from c2ftp.pipeline import load_checkpoint


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--agents", type=int, default=3000)
    p.add_argument("--seed", type=int, default=1, help="synthetic data seed (match the training run)")
    p.add_argument("--taus", type=int, nargs="+", default=[3, 10, 15])
    p.add_argument("--k", type=int, default=20)
    args = p.parse_args()

    synth = SyntheticConfig(agents=args.agents, duration=8.0, seed=args.seed, straight=0.4, lane_change=0.3, brake=0.3)
    test = split_dataset(prepare_scenes(generate_synthetic(synth), 10), 0)["test"]
    print(f"{'tau':>4} {'ms/scene':>10} {'ADE':>8} {'FDE':>8}")
    for r in sweep_tau(load_checkpoint(args.ckpt), test, args.taus, args.k):
        print(f"{r['tau']:>4} {r['latency_ms_per_scene']:10.3f} {r['ade']:8.3f} {r['fde']:8.3f}")


if __name__ == "__main__":
    main()
