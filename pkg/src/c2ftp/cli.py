"""Command line entry point: ``c2ftp <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import Config, ConfigError, load_config
from .data import (
    DataError,
    SceneTensors,
    SyntheticConfig,
    generate_synthetic,
    ingest_tracks,
    load_windows,
    prepare_scenes,
    save_windows,
    split_indices,
    write_tracks,
)
from .evaluation import MetricError, emit_case_plot, horizon_report, run_predictions, sweep_tau
from .pipeline import CheckpointError, infer, load_checkpoint, save_checkpoint, train


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _config(args) -> Config:
    cfg = load_config(args.config) if getattr(args, "config", None) else Config()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = _parse_value(value)
    if overrides:
        cfg = Config.from_dict({**cfg.to_dict(), **overrides})
    return cfg


def load_split(path, role: str):
    """Windows of one split role from a cache written by ``prepare-data``."""
    windows, meta = load_windows(path)
    if role == "all":
        return windows, meta
    idx = split_indices(len(windows), meta.get("split_seed", 0))[role]
    return [windows[i] for i in idx], meta


def _write_json(obj, out):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def cmd_generate_synthetic(args):
    cfg = SyntheticConfig(
        lanes=args.lanes, agents=args.agents, duration=args.duration, hz=args.hz, seed=args.seed,
        straight=args.mix[0], lane_change=args.mix[1], brake=args.mix[2], noise=args.noise,
    )
    tracks = generate_synthetic(cfg)
    write_tracks(tracks, args.out)
    print(f"wrote {len(tracks)} tracks to {args.out}")


def cmd_prepare_data(args):
    cfg = _config(args)
    tracks = ingest_tracks(args.input, args.unit)
    windows = prepare_scenes(tracks, args.hz, cfg)
    sizes = {k: len(v) for k, v in split_indices(len(windows), args.seed).items()}
    meta = {
        "dataset": Path(args.input).stem,
        "source_hz": args.hz,
        "hz": cfg.target_hz,
        "unit": args.unit,
        "split_seed": args.seed,
        "split_roles": "train:test:val = 7:2:1",
        "split_sizes": sizes,
    }
    save_windows(windows, args.out, meta)
    print(f"wrote {len(windows)} windows to {args.out} (train {sizes['train']}, test {sizes['test']}, val {sizes['val']})")


def cmd_train(args):
    cfg = _config(args)
    tr, _ = load_split(args.data, "train")
    va, _ = load_split(args.data, "val")
    refiner = load_checkpoint(args.refiner) if args.refiner else None
    init = load_checkpoint(args.init) if args.init else None
    ckpt = train(args.stage, SceneTensors(tr), SceneTensors(va) if va else None, cfg, refiner, init)
    save_checkpoint(ckpt, args.out)
    last = ckpt.history[-1] if ckpt.history else {}
    print(f"saved {args.stage} checkpoint to {args.out} (last epoch {last.get('epoch')}, val {last.get('val_loss')})")


def _scene_from_file(path):
    """Scene JSON: ``{"history": [[x, y], ...], "neighbors": [{"cell": [row, col], "history": ...}]}``."""
    scene = json.loads(Path(path).read_text())
    if "history" not in scene:
        raise DataError(f"{path}: scene needs a 'history' array")
    nbrs = [(n["cell"], n["history"]) for n in scene.get("neighbors", [])]
    return scene["history"], nbrs


def cmd_predict(args):
    ckpt = load_checkpoint(args.ckpt)
    history, nbrs = _scene_from_file(args.scene)
    out = infer(history, nbrs, ckpt, args.k, args.tau, args.seed)
    _write_json(
        {
            "code_version": __version__,
            "k": args.k,
            "tau": args.tau,
            "seed": args.seed,
            "mode": out["mode"],
            "joint_probs": out["joint_probs"].tolist(),
            "trajectories": out["trajectories"].tolist(),
            "coarse": out["coarse"].tolist(),
        },
        args.out,
    )


def cmd_evaluate(args):
    ckpt = load_checkpoint(args.ckpt)
    test, meta = load_split(args.data, args.split)
    report = horizon_report(
        ckpt, test, k=args.k, tau=args.tau, seed=args.seed, aggregation=args.agg,
        dataset=meta.get("dataset", str(args.data)), checkpoint_id=Path(args.ckpt).name,
    )
    report.metadata["config"] = ckpt.config
    report.metadata["split"] = args.split
    print(report.table())
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")


def cmd_plot_case(args):
    ckpt = load_checkpoint(args.ckpt)
    windows, _ = load_split(args.data, args.split)
    if not 0 <= args.scene < len(windows):
        raise DataError(f"scene {args.scene} outside [0, {len(windows)})")
    scene = windows[args.scene]
    data = SceneTensors([scene])
    _, _, refined, _ = run_predictions(ckpt, data, args.k, args.tau, args.seed)
    emit_case_plot(scene, refined[0], scene.target_future, args.out, ckpt.cfg.lane_width)
    print(f"wrote {args.out}")


def cmd_sweep_tau(args):
    ckpt = load_checkpoint(args.ckpt)
    test, _ = load_split(args.data, args.split)
    rows = sweep_tau(ckpt, test, args.taus, args.k, args.seed)
    print(f"{'tau':>4} {'ms/scene':>10} {'ADE':>8} {'FDE':>8}")
    for r in rows:
        print(f"{r['tau']:>4} {r['latency_ms_per_scene']:10.3f} {r['ade']:8.3f} {r['fde']:8.3f}")
    if args.out:
        _write_json({"k": args.k, "seed": args.seed, "sweep": rows}, args.out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="c2ftp", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="flat JSON config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    g = sub.add_parser("generate-synthetic", help="write a synthetic highway track CSV")
    g.add_argument("--out", required=True)
    g.add_argument("--agents", type=int, default=300)
    g.add_argument("--lanes", type=int, default=3)
    g.add_argument("--duration", type=float, default=8.0, help="seconds per track")
    g.add_argument("--hz", type=int, default=10)
    g.add_argument("--mix", type=float, nargs=3, default=(0.4, 0.3, 0.3), metavar=("STRAIGHT", "LANE_CHANGE", "BRAKE"))
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate_synthetic)

    d = sub.add_parser("prepare-data", help="ingest a track CSV into a window cache")
    d.add_argument("--input", required=True)
    d.add_argument("--unit", choices=("feet", "meters"), required=True)
    d.add_argument("--hz", type=int, required=True, help="source sampling rate")
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int, default=0, help="split seed")
    with_config(d)
    d.set_defaults(func=cmd_prepare_data)

    t = sub.add_parser("train", help="train one stage")
    t.add_argument("--stage", choices=("refiner", "interaction", "interaction-standalone"), required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--refiner", help="refiner checkpoint (interaction stage)")
    t.add_argument("--init", help="warm-start interaction checkpoint")
    with_config(t)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="refined futures for one scene file")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--scene", required=True)
    pr.add_argument("--k", type=int, default=20)
    pr.add_argument("--tau", type=int, default=10)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="per-horizon RMSE/ADE/FDE report")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--k", type=int, default=20)
    e.add_argument("--tau", type=int, default=10)
    e.add_argument("--agg", choices=("best", "single"), default="best")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("plot-case", help="render one scene with its predictions")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--scene", type=int, required=True, help="index within the split")
    c.add_argument("--out", required=True)
    c.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    c.add_argument("--k", type=int, default=20)
    c.add_argument("--tau", type=int, default=10)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_plot_case)

    s = sub.add_parser("sweep-tau", help="latency and accuracy per number of denoising steps")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--taus", type=int, nargs="+", default=[3, 10, 15])
    s.add_argument("--k", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep_tau)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (ConfigError, DataError, CheckpointError, MetricError, FileNotFoundError) as exc:
        print(f"c2ftp: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
