"""Command-line front end: simulate, train, eval, gradcheck, fuse, export-panels.

Option precedence is built-in defaults < key=value config file < flags, and
no command writes timestamps, so identical invocations produce byte-identical
output directories.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import gradcheck as gradcheck_mod
from . import iffio
from .model import IffArchConfig, iffnet_forward, load_checkpoint
from .simulate import SimConfig, gen_dataset, gen_triples, load_dataset
from .training import TrainConfig, evaluate, train_run

PANELS = (
    ("a_enhanced_input", "input enhanced feature"),
    ("b_enhanced_interacted", "enhanced branch output"),
    ("c_noisy_interacted", "noisy branch output"),
    ("d_merge_mask", "merge gate mask"),
    ("e_fused", "fused output"),
)


def _resolve(args, config, name, default, cast=None):
    val = getattr(args, name, None)
    if val is not None:
        return val
    if name in config:
        raw = config[name]
        return cast(raw) if cast else type(default)(raw)
    return default


def _sim_config(args, config) -> SimConfig:
    return SimConfig(
        T=_resolve(args, config, "t", 32),
        F=_resolve(args, config, "f", 40),
        num_blobs=_resolve(args, config, "num_blobs", 8),
        snr_db=_resolve(args, config, "snr_db", 0.0, float),
        suppress_frac=_resolve(args, config, "suppress_frac", 0.3, float),
        residual_noise_frac=_resolve(args, config, "residual_noise_frac", 0.1, float),
        seed=_resolve(args, config, "seed", 0),
    )


def _add_sim_flags(p: argparse.ArgumentParser):
    p.add_argument("--t", type=int, help="frames per feature")
    p.add_argument("--f", type=int, help="frequency bins per feature")
    p.add_argument("--num-blobs", dest="num_blobs", type=int)
    p.add_argument("--snr-db", dest="snr_db", type=float)
    p.add_argument("--suppress-frac", dest="suppress_frac", type=float)
    p.add_argument("--residual-noise-frac", dest="residual_noise_frac", type=float)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iffnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="key=value option file")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("simulate", help="generate an over-suppression dataset")
    common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--index-offset", dest="index_offset", type=int)
    _add_sim_flags(p)

    p = sub.add_parser("train", help="train on simulated or on-disk triples")
    common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--data", type=Path, help="dataset directory; omitted = simulate in memory")
    p.add_argument("--steps", type=int)
    p.add_argument("--blocks", type=int)
    p.add_argument("--filters", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--lr-peak", dest="lr_peak", type=float)
    p.add_argument("--enh-weight", dest="enh_weight", type=float)
    p.add_argument("--train-items", dest="train_items", type=int)
    _add_sim_flags(p)

    p = sub.add_parser("eval", help="report fused/input MSEs for a checkpoint")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--items", type=int)
    p.add_argument("--index-offset", dest="index_offset", type=int)
    _add_sim_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(p)

    p = sub.add_parser("fuse", help="fuse two feature files through a checkpoint")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--enh", type=Path, required=True)
    p.add_argument("--noisy", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("export-panels", help="write PGM/CSV panels of the fusion pipeline")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--enh", type=Path, required=True)
    p.add_argument("--noisy", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    return parser


def _cmd_simulate(args, config) -> int:
    cfg = _sim_config(args, config)
    n = _resolve(args, config, "n", 4)
    offset = _resolve(args, config, "index_offset", 0)
    manifest = gen_dataset(cfg, n, args.out, index_offset=offset)
    print(f"wrote {n} triples to {manifest.parent}")
    return 0


def _cmd_train(args, config) -> int:
    cfg = TrainConfig(
        lr_peak=_resolve(args, config, "lr_peak", 0.002, float),
        warmup_steps=_resolve(args, config, "warmup", 500),
        enh_loss_weight=_resolve(args, config, "enh_weight", 0.3, float),
        batch_size=_resolve(args, config, "batch_size", 8),
        steps=_resolve(args, config, "steps", 2000),
        seed=_resolve(args, config, "seed", 0),
        train_items=_resolve(args, config, "train_items", 256),
        arch=IffArchConfig(
            num_ra_blocks=_resolve(args, config, "blocks", 2),
            ra_filters=_resolve(args, config, "filters", 16),
        ),
        sim=_sim_config(args, config),
    )
    if args.data is not None:
        dataset = load_dataset(args.data)
    else:
        dataset = gen_triples(cfg.sim, cfg.train_items)
    result = train_run(cfg, dataset, args.out)
    last = result.metrics[-1].split("\t")
    print(f"trained {cfg.steps} steps, final loss {last[2]}, checkpoint in {args.out}/checkpoint")
    return 0


def _cmd_eval(args, config) -> int:
    if args.data is not None:
        dataset = load_dataset(args.data)
    else:
        cfg = _sim_config(args, config)
        items = _resolve(args, config, "items", 64)
        offset = _resolve(args, config, "index_offset", 10_000)
        dataset = gen_triples(cfg, items, index_offset=offset)
    scores = evaluate(args.checkpoint, dataset)
    for key, value in scores.items():
        print(f"{key}={value:.10g}")
    return 0


def _cmd_gradcheck(args, config) -> int:
    seed = _resolve(args, config, "seed", 0)
    errors = gradcheck_mod.run_all(seed=seed)
    worst = max(errors.values())
    for name in sorted(errors):
        print(f"{name}\t{errors[name]:.3e}")
    print(f"max\t{worst:.3e}")
    if worst >= gradcheck_mod.TOLERANCE:
        print(f"gradcheck failed: max error {worst:.3e} >= {gradcheck_mod.TOLERANCE}", file=sys.stderr)
        return 1
    return 0


def _load_pair(args):
    params = load_checkpoint(args.checkpoint)
    x_e = iffio.load_tensor(args.enh)
    x_n = iffio.load_tensor(args.noisy)
    if x_e.ndim != 2 or x_n.ndim != 2:
        raise ValueError("fuse expects 2-D T x F feature files")
    return params, x_e, x_n


def _cmd_fuse(args, config) -> int:
    params, x_e, x_n = _load_pair(args)
    fused, diag = iffnet_forward(x_e, x_n, params, training=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t, f = x_e.shape
    iffio.save_tensor(fused, out / "fused.ift")
    iffio.save_tensor(diag.merge.mask.data.reshape(t, f), out / "merge_mask.ift")
    print(f"wrote fused.ift and merge_mask.ift to {out}")
    return 0


def _cmd_export_panels(args, config) -> int:
    params, x_e, x_n = _load_pair(args)
    fused, diag = iffnet_forward(x_e, x_n, params, training=False)
    t, f = x_e.shape
    planes = {
        "a_enhanced_input": x_e.data,
        "b_enhanced_interacted": diag.enhanced.x_in.data.reshape(t, f),
        "c_noisy_interacted": diag.noisy.x_in.data.reshape(t, f),
        "d_merge_mask": diag.merge.mask.data.reshape(t, f),
        "e_fused": fused.data,
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    norms = {}
    for name, plane in planes.items():
        vmin, vmax = iffio.write_pgm(plane, out / f"{name}.pgm")
        iffio.export_csv(plane, out / f"{name}.csv")
        norms[name] = f"{vmin:.10g},{vmax:.10g}"
    iffio.write_manifest(out / "normalization.txt", norms)
    print(f"wrote {len(planes)} PGM/CSV panel pairs to {out}")
    return 0


_HANDLERS = {
    "simulate": _cmd_simulate,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "fuse": _cmd_fuse,
    "export-panels": _cmd_export_panels,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = _build_parser().parse_args(argv)
    config = iffio.read_manifest(args.config) if getattr(args, "config", None) else {}
    try:
        return _HANDLERS[args.command](args, config)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
