"""Command-line entry point: ``devinr <verb> [--config FILE] [--seed N] [--out DIR] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .atlas import STRIP_PMAS, average_latent, curve_pmas, curves_svg, generate_sequence, write_curves
from .checkpoint import load_checkpoint
from .config import ConfigError, RunConfig, load_config
from .experiments import (
    DataError,
    dataset_digest,
    evaluate,
    fit_bc_regression,
    inversion_config,
    load_scans,
    load_split,
    network_config,
    run_ablation_grid,
    run_p_sweep,
    train_config,
    train_model,
)
from .inr import CheckpointError
from .inversion import InversionError, case_record_json, predict_development
from .metrics import MeasurementError, write_report
from .phantom import PhantomDatasetConfig, PhantomError, generate_dataset
from .volume import VolumeFormatError, VolumeImage, load_volume, normalize_time, save_volume

log = logging.getLogger("devinr")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _checkpoint_path(cfg: RunConfig) -> Path:
    path = cfg["data.checkpoint"]
    if not path:
        raise ConfigError("data.checkpoint is not set")
    if not Path(path).exists():
        raise DataError(f"checkpoint {path} not found")
    return Path(path)


def cmd_phantom_gen(cfg: RunConfig, args) -> None:
    pcfg = PhantomDatasetConfig(
        n_train_single=cfg["phantom.n_train_single"],
        n_train_multi=cfg["phantom.n_train_multi"],
        n_val=cfg["phantom.n_val"],
        n_test=cfg["phantom.n_test"],
        shape=cfg["phantom.shape"],
        spacing=cfg["phantom.spacing"],
        seed=cfg["phantom.seed"],
        hc_slope=cfg["phantom.hc_slope"],
        hc_intercept=cfg["phantom.hc_intercept"],
        hc_noise_sd=cfg["phantom.hc_noise_sd"],
        min_gap_weeks=cfg["phantom.min_gap_weeks"],
    )
    ds = generate_dataset(pcfg, cfg["data.out"])
    print(f"wrote {sum(len(v) for v in ds.splits.values())} scans to {cfg['data.out']}")


def cmd_train(cfg: RunConfig, args) -> None:
    records = load_split(cfg["data.dir"], "train")
    if not records:
        raise DataError("training split is empty")
    scans = load_scans(records)
    resume = _checkpoint_path(cfg) if cfg["data.checkpoint"] else None
    state, _ = train_model(
        scans,
        network_config(cfg, scans[0].image.ndim),
        train_config(cfg),
        cfg["net.seed"],
        out_dir=cfg["data.out"],
        checkpoint_every=cfg["train.checkpoint_every"],
        resume_from=resume,
    )
    print(f"trained to iteration {state.iteration}; checkpoint in {cfg['data.out']}")


def cmd_predict(cfg: RunConfig, args) -> None:
    if args.input is None or args.t1 is None or args.t2 is None:
        raise ConfigError("predict needs --input, --t1 and --t2 (PMA in weeks)")
    net, _ = load_checkpoint(_checkpoint_path(cfg))
    img = load_volume(args.input)
    t1, t2 = normalize_time(args.t1), normalize_time(args.t2)
    dev = predict_development(net, img, t1, t2, inversion_config(cfg))
    out = Path(cfg["data.out"])
    out.mkdir(parents=True, exist_ok=True)
    save_volume(img, out / "input.ndv")
    save_volume(dev.reconstruction, out / "reconstruction.ndv")
    target = load_volume(args.target) if args.target else VolumeImage(np.zeros(img.shape, np.float32), img.spacing)
    save_volume(target, out / "target.ndv")
    save_volume(dev.prediction, out / "prediction.ndv")
    stem = Path(args.input).stem
    target_id = Path(args.target).stem if args.target else ""
    (out / "case.jsonl").write_text(case_record_json("", stem, target_id, t1, t2, dev.inversion_loss) + "\n")
    print(f"inversion loss {dev.inversion_loss:.6g}; volumes in {out}")


def cmd_eval(cfg: RunConfig, args) -> None:
    net, _ = load_checkpoint(_checkpoint_path(cfg))
    test = load_split(cfg["data.dir"], "test")
    if not test:
        raise DataError("test split is empty")
    train_records = load_split(cfg["data.dir"], "train")
    regression = fit_bc_regression(load_scans(train_records), train_records, cfg["eval.bc_method"], cfg["eval.smoothing"])
    out = Path(cfg["data.out"])
    out.mkdir(parents=True, exist_ok=True)
    cases = evaluate(
        net, test, inversion_config(cfg), regression,
        cfg["eval.threshold"], cfg["eval.bc_method"], cfg["eval.smoothing"],
        volume_dir=out / "volumes" if cfg["eval.save_volumes"] else None,
    )
    write_report([c.record for c in cases], out / "report.csv")
    (out / "cases.jsonl").write_text("".join(c.json_line + "\n" for c in cases))
    print(f"evaluated {len(cases)} cases; report in {out / 'report.csv'}")


def cmd_ablation_grid(cfg: RunConfig, args) -> None:
    rows = run_ablation_grid(cfg, cfg["data.dir"], cfg["data.out"])
    for row in rows:
        print(f"sgla={'y' if row.sgla else 'n'} ssl={'y' if row.ssl else 'n'} "
              f"psnr={row.summary['psnr'][0]:.2f} sigma={row.hc_sigma:.3f} r={row.hc_r:.3f}")


def cmd_p_sweep(cfg: RunConfig, args) -> None:
    rows = run_p_sweep(cfg, cfg["data.dir"], cfg["data.out"])
    for row in rows:
        print(f"p={row.sgla_p:.2f} psnr={row.summary['psnr'][0]:.2f} sigma={row.hc_sigma:.3f}")


def cmd_atlas(cfg: RunConfig, args) -> None:
    net, table = load_checkpoint(_checkpoint_path(cfg))
    if not table.entries:
        raise DataError("checkpoint has no latent table; the average latent needs trained latents")
    train_records = load_split(cfg["data.dir"], "train")
    scans = load_scans(train_records)
    regression = fit_bc_regression(scans, train_records, cfg["eval.bc_method"], cfg["eval.smoothing"])
    if regression is None:
        raise DataError("training manifest has too few HC labels for the BC regression")
    shape, spacing = scans[0].image.shape, scans[0].image.spacing
    out = Path(cfg["data.out"])
    (out / "strip").mkdir(parents=True, exist_ok=True)
    latents = {"zero-latent": np.zeros(net.config.latent_dim, np.float32), "average-latent": average_latent(table)}
    curves = []
    for label, latent in latents.items():
        _, curve = generate_sequence(net, latent, curve_pmas(cfg["atlas.n_points"]), shape, spacing, regression, label)
        curves.append(curve)
        strip, _ = generate_sequence(net, latent, STRIP_PMAS, shape, spacing, regression, label)
        for pma, img in zip(STRIP_PMAS, strip):
            save_volume(img, out / "strip" / f"{label}_{pma:g}w.ndv")
    write_curves(curves, out / "growth_curves.csv")
    (out / "growth_curves.svg").write_text(curves_svg(curves))
    print(f"growth curves in {out / 'growth_curves.csv'}")


COMMANDS = {
    "phantom-gen": cmd_phantom_gen,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "ablation-grid": cmd_ablation_grid,
    "p-sweep": cmd_p_sweep,
    "atlas": cmd_atlas,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="devinr", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--seed", type=int, help="sets phantom.seed, net.seed, train.seed and invert.seed")
    parser.add_argument("--out", help="output directory (data.out)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    parser.add_argument("--input", help="predict: input NDV1 volume")
    parser.add_argument("--target", help="predict: optional ground-truth NDV1 volume to copy alongside")
    parser.add_argument("--t1", type=float, help="predict: PMA of the input in weeks")
    parser.add_argument("--t2", type=float, help="predict: PMA to predict in weeks")
    parser.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg[key.strip()] = value.strip()
    if args.seed is not None:
        for key in ("phantom.seed", "net.seed", "train.seed", "invert.seed"):
            cfg[key] = args.seed
    if args.out is not None:
        cfg["data.out"] = args.out
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.dump_config:
            sys.stdout.write(cfg.dump())
            return EXIT_OK
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, VolumeFormatError, PhantomError, MeasurementError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InversionError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # dataclass validation of config-derived values
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
