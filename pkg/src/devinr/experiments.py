"""Pipelines shared by the command line and the acceptance suite."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .inr import InrNetwork, NetworkConfig, init_network
from .inversion import InversionConfig, case_record_json, predict_development
from .metrics import (
    EvalRecord,
    RegressionModel,
    fit_regression,
    hc_error_stats,
    mae,
    measure_bc,
    measure_bc_ellipse,
    prediction_mask,
    psnr,
    ssim,
    summarize,
)
from .training import (
    LatentTable,
    TrainConfig,
    TrainingScan,
    TrainState,
    load_optimizer,
    new_state,
    save_optimizer,
    train,
    write_training_log,
)
from .volume import ScanRecord, load_volume, read_manifest, save_volume

log = logging.getLogger(__name__)

# ablation row order: (SGLA, SSL)
ABLATION_ROWS = ((False, False), (True, False), (False, True), (True, True))


class DataError(RuntimeError):
    pass


def load_split(data_dir, split: str) -> list[ScanRecord]:
    path = Path(data_dir) / f"{split}.csv"
    if not path.exists():
        raise DataError(f"missing manifest {path}")
    return read_manifest(path)


def load_scans(records: list[ScanRecord]) -> list[TrainingScan]:
    return [TrainingScan.from_record(r) for r in records]


def dataset_digest(data_dir) -> str:
    """SHA-256 over the manifests and every volume, in sorted path order."""
    root = Path(data_dir)
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file() and p.suffix in (".csv", ".ndv")):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def network_config(cfg: RunConfig, d: int) -> NetworkConfig:
    return NetworkConfig(
        d=d,
        latent_dim=cfg["net.latent_dim"],
        hidden_dim=cfg["net.hidden_dim"],
        n_layers=cfg["net.n_layers"],
        omega0=cfg["net.omega0"],
        s0=cfg["net.s0"],
    )


def train_config(cfg: RunConfig, **overrides) -> TrainConfig:
    kw = dict(
        steps=cfg["train.steps"],
        lr=cfg["train.lr"],
        latent_lr=cfg["train.latent_lr"],
        weight_decay=cfg["train.weight_decay"],
        decay_latents=cfg["train.decay_latents"],
        pixel_fraction=cfg["train.pixel_fraction"],
        fg_bg_ratio=cfg["train.fg_bg_ratio"],
        sgla_p=cfg["train.sgla_p"],
        ssl_enabled=cfg["train.ssl"],
        sgla_enabled=cfg["train.sgla"],
        seed=cfg["train.seed"],
        micro_batch_size=cfg["train.micro_batch_size"],
    )
    kw.update(overrides)
    return TrainConfig(**kw)


def inversion_config(cfg: RunConfig) -> InversionConfig:
    return InversionConfig(
        steps=cfg["invert.steps"],
        lr=cfg["invert.lr"],
        pixel_policy=cfg["invert.pixel_policy"],
        pixel_fraction=cfg["invert.pixel_fraction"],
        fg_bg_ratio=cfg["invert.fg_bg_ratio"],
        micro_batch_size=cfg["invert.micro_batch_size"],
        seed=cfg["invert.seed"],
    )


def measure(mask: np.ndarray, spacing, method: str = "contour", smoothing: float = 0.9) -> float:
    if method == "ellipse":
        return measure_bc_ellipse(mask, spacing)
    return measure_bc(mask, spacing, smoothing=smoothing, method=method)


def fit_bc_regression(scans: list[TrainingScan], records: list[ScanRecord], method="contour", smoothing=0.9) -> RegressionModel | None:
    """BC-to-HC regression on ground-truth training images; None without enough HC labels."""
    pairs = [
        (measure(s.mask, s.image.spacing, method, smoothing), r.hc_cm)
        for s, r in zip(scans, records)
        if r.hc_cm is not None
    ]
    if len(pairs) < 3:
        return None
    bc, hc = zip(*pairs)
    return fit_regression(bc, hc)


def train_model(
    scans: list[TrainingScan],
    net_cfg: NetworkConfig,
    tcfg: TrainConfig,
    init_seed: int,
    out_dir=None,
    checkpoint_every: int = 0,
    resume_from=None,
) -> tuple[TrainState, list]:
    """Train from scratch, or continue the checkpoint ``resume_from`` (with its optimizer sidecar)."""
    mode = "per_subject" if tcfg.ssl_enabled else "per_scan"
    if resume_from is not None:
        net, table = load_checkpoint(resume_from)
        if net.config.latent_dim != net_cfg.latent_dim:
            raise DataError(
                f"checkpoint latent dimension {net.config.latent_dim} does not match configured {net_cfg.latent_dim}"
            )
        if net.config != net_cfg:
            raise DataError("checkpoint network does not match the configured network")
        if table.mode != mode:
            raise DataError("checkpoint latent keying does not match train.ssl")
        state = new_state(net, table, tcfg)
        sidecar = Path(str(resume_from) + ".optim")
        if not sidecar.exists():
            raise DataError(f"cannot resume: optimizer state {sidecar} not found")
        load_optimizer(state, sidecar, tcfg)
    else:
        state = new_state(init_network(net_cfg, init_seed), LatentTable(net_cfg.latent_dim, mode), tcfg)

    out = Path(out_dir) if out_dir is not None else None
    pending = []

    def on_step(st: TrainState, entry):
        if out is not None and checkpoint_every and st.iteration % checkpoint_every == 0:
            _write_training_outputs(st, out, pending, append=True)
            pending.clear()

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume_from is None and (out / "training_log.csv").exists():
            (out / "training_log.csv").unlink()
    entries = []

    def collect(st, entry):
        entries.append(entry)
        pending.append(entry)
        on_step(st, entry)

    train(scans, state, tcfg, callback=collect)
    if out is not None:
        _write_training_outputs(state, out, pending, append=True)
    return state, entries


def _write_training_outputs(state: TrainState, out: Path, entries, append: bool) -> None:
    save_checkpoint(state.net, state.table, out / "checkpoint.inr")
    save_optimizer(state, out / "checkpoint.inr.optim")
    write_training_log(entries, out / "training_log.csv", append=append)


def evaluation_pairs(records: list[ScanRecord]) -> list[tuple[ScanRecord, ScanRecord]]:
    """Every ordered pair of distinct scans of the same subject, forward and backward in time."""
    by_subject: dict[str, list[ScanRecord]] = {}
    for r in records:
        by_subject.setdefault(r.subject_id, []).append(r)
    pairs = []
    for scans in by_subject.values():
        for a in scans:
            for b in scans:
                if a is not b:
                    pairs.append((a, b))
    return pairs


@dataclass
class CaseResult:
    record: EvalRecord
    inversion_loss: float
    input_area: int
    reconstruction_area: int
    prediction_area: int
    target_area: int
    json_line: str


def evaluate(
    net: InrNetwork,
    records: list[ScanRecord],
    icfg: InversionConfig,
    regression: RegressionModel | None,
    threshold: float = 0.05,
    bc_method: str = "contour",
    smoothing: float = 0.9,
    volume_dir=None,
) -> list[CaseResult]:
    """Invert each scan at its own age and predict its partner scan; score prediction against partner."""
    pairs = evaluation_pairs(records)
    if not pairs:
        raise DataError("test split has no subject with two or more scans")
    images = {}
    results = []
    for a, b in pairs:
        for r in (a, b):
            if r.scan_id not in images:
                images[r.scan_id] = load_volume(r.path)
        img_in, img_target = images[a.scan_id], images[b.scan_id]
        dev = predict_development(net, img_in, a.t, b.t, icfg)
        pred_mask = prediction_mask(dev.prediction, threshold)
        recon_mask = prediction_mask(dev.reconstruction, threshold)
        predicted_hc = math.nan
        if regression is not None and pred_mask.any():
            predicted_hc = float(regression.predict(measure(pred_mask, img_target.spacing, bc_method, smoothing)))
        rec = EvalRecord(
            a.subject_id, a.scan_id, b.scan_id, a.t, b.t,
            psnr(dev.prediction, img_target), ssim(dev.prediction, img_target), mae(dev.prediction, img_target),
            predicted_hc, b.hc_cm if b.hc_cm is not None else math.nan,
        )
        if volume_dir is not None:
            vdir = Path(volume_dir)
            vdir.mkdir(parents=True, exist_ok=True)
            save_volume(dev.reconstruction, vdir / f"{a.scan_id}_recon.ndv")
            save_volume(dev.prediction, vdir / f"{a.scan_id}_to_{b.scan_id}.ndv")
        results.append(
            CaseResult(
                rec, dev.inversion_loss,
                int(img_in.foreground().sum()), int(recon_mask.sum()), int(pred_mask.sum()), int(img_target.foreground().sum()),
                case_record_json(a.subject_id, a.scan_id, b.scan_id, a.t, b.t, dev.inversion_loss),
            )
        )
        log.info("case %s -> %s: psnr %.2f", a.scan_id, b.scan_id, rec.psnr)
    return results


@dataclass
class GridRow:
    sgla: bool
    ssl: bool
    sgla_p: float
    summary: dict
    hc_sigma: float
    hc_r: float
    cases: list[CaseResult]

    def csv_cells(self) -> list[str]:
        yn = lambda flag: "y" if flag else "n"  # noqa: E731
        cells = [yn(self.sgla), yn(self.ssl), repr(self.sgla_p)]
        for name in ("psnr", "ssim", "mae"):
            cells += [repr(self.summary[name][0]), repr(self.summary[name][1])]
        return cells + [repr(self.hc_sigma), repr(self.hc_r)]


GRID_HEADER = [
    "sgla", "ssl", "sgla_p",
    "psnr_mean", "psnr_std", "ssim_mean", "ssim_std", "mae_mean", "mae_std",
    "hc_sigma", "hc_r",
]


def run_variant(cfg: RunConfig, train_scans, train_records, test_records, sgla: bool, ssl: bool, p: float, out_dir=None) -> GridRow:
    """Train one model variant on shared data and score it on the test split."""
    d = train_scans[0].image.ndim
    tcfg = train_config(cfg, sgla_enabled=sgla, ssl_enabled=ssl, sgla_p=p)
    state, _ = train_model(train_scans, network_config(cfg, d), tcfg, cfg["net.seed"], out_dir=out_dir)
    regression = fit_bc_regression(train_scans, train_records, cfg["eval.bc_method"], cfg["eval.smoothing"])
    cases = evaluate(
        state.net, test_records, inversion_config(cfg), regression,
        cfg["eval.threshold"], cfg["eval.bc_method"], cfg["eval.smoothing"],
    )
    records = [c.record for c in cases]
    try:
        sigma, r = hc_error_stats(records)
    except ValueError:
        sigma, r = math.nan, math.nan
    if out_dir is not None:
        from .metrics import write_report

        write_report(records, Path(out_dir) / "report.csv")
        (Path(out_dir) / "cases.jsonl").write_text("".join(c.json_line + "\n" for c in cases))
    return GridRow(sgla, ssl, p, summarize(records), sigma, r, cases)


def write_grid(rows: list[GridRow], path, digest: str) -> None:
    lines = [",".join(GRID_HEADER + ["dataset_sha256"])]
    for row in rows:
        lines.append(",".join(row.csv_cells() + [digest]))
    Path(path).write_text("\n".join(lines) + "\n")


def run_ablation_grid(cfg: RunConfig, data_dir, out_dir) -> list[GridRow]:
    train_records = load_split(data_dir, "train")
    test_records = load_split(data_dir, "test")
    scans = load_scans(train_records)
    out = Path(out_dir)
    rows = []
    for sgla, ssl in ABLATION_ROWS:
        tag = f"sgla-{'y' if sgla else 'n'}_ssl-{'y' if ssl else 'n'}"
        rows.append(run_variant(cfg, scans, train_records, test_records, sgla, ssl, cfg["train.sgla_p"], out / tag))
    write_grid(rows, out / "ablation.csv", dataset_digest(data_dir))
    return rows


def run_p_sweep(cfg: RunConfig, data_dir, out_dir) -> list[GridRow]:
    train_records = load_split(data_dir, "train")
    test_records = load_split(data_dir, "test")
    scans = load_scans(train_records)
    out = Path(out_dir)
    rows = []
    for p in cfg["psweep.values"]:
        rows.append(run_variant(cfg, scans, train_records, test_records, True, cfg["train.ssl"], p, out / f"p-{p:.2f}"))
    write_grid(rows, out / "psweep.csv", dataset_digest(data_dir))
    return rows
