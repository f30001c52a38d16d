"""Command-line experiment runner.

Exit codes: 0 ok, 1 check failure, 2 usage or config error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import config as cfgmod
from .data import DataConfig, Dataset, PPMError, load_datasets, load_ppm_dir, synth_dataset, write_ppm
from .metrics import MetricsRecord, evaluate, reconstruct
from .model import CheckpointError, ConfigError, build, load_checkpoint, save_checkpoint
from .tensor import NonFiniteError
from .training import PROPOSED_FAMILY, REGIMENS, TrainLog, TrainingAborted, run_phase1, run_regimen

log = logging.getLogger("semcom")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
CSV_FIELDS = ("regimen", "seed", "phase", "epoch", "snr_db", "split", "mse", "psnr_db")
FIG_SNR = 3.0


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# CSV


def _num(v: Optional[float]) -> str:
    if v is None:
        return ""
    return cfgmod.format_float(float(v))


def records_csv(records: Iterable[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in records:
        w.writerow([r.regimen, r.seed, r.phase, r.epoch, _num(r.snr_db), r.split, _num(r.mse), _num(r.psnr_db)])
    return buf.getvalue()


def read_records_csv(text: str) -> List[MetricsRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_FIELDS:
        raise ValueError("not a metrics CSV")
    out = []
    for reg, seed, phase, epoch, snr, split, mse, psnr in rows[1:]:
        out.append(MetricsRecord(reg, int(seed), phase, int(epoch), float(snr) if snr else None, split,
                                 float(mse), float(psnr)))
    return out


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# helpers


def _load_config(path: Optional[str]) -> cfgmod.ExperimentConfig:
    if path is None:
        return cfgmod.ExperimentConfig()
    return cfgmod.load(path)


def _parse_snrs(text: str) -> List[float]:
    try:
        vals = sorted(float(s) for s in text.split(",") if s.strip())
    except ValueError as exc:
        raise UsageError(f"bad --snr list {text!r}") from exc
    if not vals or any(math.isnan(v) or v == -math.inf for v in vals):
        raise UsageError(f"bad --snr list {text!r}")
    return vals


def _parse_data_spec(spec: Optional[str], cfg: cfgmod.ExperimentConfig) -> Dataset:
    """'synthetic[:n=16,extent=32,seed=0]' or a directory of PPM files."""
    dcfg = cfg.data
    if spec is None:
        return load_datasets(dcfg)[1]
    if spec.startswith("synthetic"):
        opts = {"n": dcfg.test_n, "extent": dcfg.extent, "seed": dcfg.seed}
        _, _, rest = spec.partition(":")
        for item in filter(None, rest.split(",")):
            key, _, val = item.partition("=")
            if key not in opts:
                raise UsageError(f"unknown synthetic option {key!r}")
            opts[key] = int(val)
        return synth_dataset(opts["n"], opts["extent"], opts["seed"], "test")
    return load_ppm_dir(spec, dcfg.extent, None, "test")


def _snr_tag(snr: float) -> str:
    return cfgmod.format_float(snr)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    regimen = args.regimen or cfg.train.regimen
    if regimen not in REGIMENS:
        raise UsageError(f"unknown regimen {regimen!r}; choose from {', '.join(REGIMENS)}")
    changes = {"regimen": regimen}
    if args.seed is not None:
        changes["master_seed"] = args.seed
    cfg = cfg.replace("train", **changes)
    train_set, test_set = load_datasets(cfg.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "config.ini", cfgmod.dump(cfg))

    def hook(phase: str, params) -> None:
        if phase == "phase1" or phase == "final":
            save_checkpoint(params, out / f"{phase}.ckpt")

    _, tlog = run_regimen(regimen, cfg.model, cfg.channel, cfg.train, train_set, test_set, hook)
    _write_text(out / "train_log.csv", records_csv(tlog.records))
    log.info("wrote %s", out)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    which = {"1": "dec1", "2": "dec2"}[args.decoder]
    try:
        params = load_checkpoint(args.ckpt, cfg.model)
    except (CheckpointError, OSError) as exc:
        raise UsageError(f"checkpoint {args.ckpt}: {exc}") from exc
    snrs = _parse_snrs(args.snr)
    test = _parse_data_spec(args.data, cfg)
    recs = evaluate(params, cfg.model, which, test, snrs, cfg.channel.noise_seed, regimen=args.label,
                    seed=cfg.train.master_seed, phase="eval", epoch=0)
    text = records_csv(recs)
    if args.out:
        _write_text(Path(args.out), text)
    else:
        sys.stdout.write(text)
    if args.dump_images:
        dump = Path(args.dump_images)
        dump.mkdir(parents=True, exist_ok=True)
        recons = reconstruct(params, cfg.model, which, test, snrs, cfg.channel.noise_seed)
        for snr in snrs:
            for i, img in enumerate(recons[snr]):
                write_ppm(dump / f"{i}_{_snr_tag(snr)}.ppm", img)
    return EXIT_OK


def _compare_cell(cfg: cfgmod.ExperimentConfig, seed: int, out: Path) -> Dict[str, TrainLog]:
    """All regimens for one seed; phase 1 is trained once and shared by the proposed family."""
    tcfg = cfg.replace("train", master_seed=seed)
    train_set, test_set = load_datasets(cfg.data)
    m, c, t = tcfg.model, tcfg.channel, tcfg.train
    p1 = build(m, seed)
    p1_log = run_phase1(p1, m, c, t, train_set, test_set)
    logs = {}
    for regimen in REGIMENS:
        shared = (p1, p1_log) if regimen in PROPOSED_FAMILY else None
        _, tlog = run_regimen(regimen, m, c, t, train_set, test_set, phase1=shared)
        cell = out / "runs" / regimen / f"seed{seed}"
        cell.mkdir(parents=True, exist_ok=True)
        _write_text(cell / "train_log.csv", records_csv(tlog.records))
        logs[regimen] = tlog
        log.info("seed %d %s done", seed, regimen)
    return logs


def lcd_curve(regimen: str, tlog: TrainLog, snr: float) -> List[Tuple[int, float]]:
    """(LCD epochs trained, test PSNR) for the low-computing decoder at ``snr``."""
    phase = {"alone": "alone", "iterative": "iterative-dec2"}.get(regimen, "phase2")
    pts = []
    for r in tlog.select(phase=phase, split="test"):
        if r.snr_db == snr:
            epoch = r.epoch // 2 if regimen == "iterative" else r.epoch
            pts.append((epoch, r.psnr_db))
    return pts


def budget(regimen: str, T: int) -> Dict[str, int]:
    """Epoch accounting: LCD epochs, encoder epochs and total epochs."""
    if regimen == "iterative":
        return {"lcd_epochs": T, "encoder_epochs": 2 * T, "total_epochs": 2 * T}
    if regimen == "alone":
        return {"lcd_epochs": T, "encoder_epochs": T, "total_epochs": T}
    return {"lcd_epochs": T, "encoder_epochs": T, "total_epochs": 2 * T}


def _mean_std(vals: Sequence[float]) -> Tuple[float, float]:
    arr = np.asarray(vals, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def aggregate(all_logs: Dict[int, Dict[str, TrainLog]], snrs: Sequence[float], T: int):
    """compare.csv text, per-epoch curve CSV text, and plot-data files {name: text}."""
    seeds = sorted(all_logs)
    final = io.StringIO()
    w = csv.writer(final, lineterminator="\n")
    w.writerow(["regimen", "snr_db", "lcd_epochs", "encoder_epochs", "total_epochs", "n_seeds",
                "psnr_mean", "psnr_std", "mse_mean"])
    curves = io.StringIO()
    cw = csv.writer(curves, lineterminator="\n")
    cw.writerow(["regimen", "snr_db", "lcd_epoch", "n_seeds", "psnr_mean", "psnr_std"])
    plots: Dict[str, str] = {}
    fig_snr = FIG_SNR if FIG_SNR in snrs else snrs[0]
    for regimen in REGIMENS:
        b = budget(regimen, T)
        fig4 = []
        for snr in snrs:
            per_epoch: Dict[int, List[float]] = {}
            for s in seeds:
                for ep, val in lcd_curve(regimen, all_logs[s][regimen], snr):
                    per_epoch.setdefault(ep, []).append(val)
            for ep in sorted(per_epoch):
                mean, std = _mean_std(per_epoch[ep])
                cw.writerow([regimen, _num(snr), ep, len(per_epoch[ep]), _num(mean), _num(std)])
            phase = {"alone": "alone", "iterative": "iterative-dec2"}.get(regimen, "phase2")
            last = []
            for s in seeds:
                rows = [r for r in all_logs[s][regimen].select(phase=phase, split="test") if r.snr_db == snr]
                last.append(max(rows, key=lambda r: r.epoch))
            pmean, pstd = _mean_std([r.psnr_db for r in last])
            mmean, _ = _mean_std([r.mse for r in last])
            w.writerow([regimen, _num(snr), b["lcd_epochs"], b["encoder_epochs"], b["total_epochs"],
                        len(seeds), _num(pmean), _num(pstd), _num(mmean)])
            fig4.append((snr, pmean))
            if snr == fig_snr:
                curve = [(ep, _mean_std(v)[0]) for ep, v in sorted(per_epoch.items())]
                fig = "fig2" if regimen in ("alone", "iterative", "proposed") else None
                text = "".join(f"{ep} {_num(v)}\n" for ep, v in curve)
                if fig:
                    plots[f"{fig}_{regimen}.dat"] = text
                if regimen in PROPOSED_FAMILY:
                    plots[f"fig3_{regimen}.dat"] = text
        plots[f"fig4_{regimen}.dat"] = "".join(f"{_num(s)} {_num(v)}\n" for s, v in fig4)
    return final.getvalue(), curves.getvalue(), plots


def cmd_compare(args) -> int:
    cfg = _load_config(args.config)
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = list(range(args.seeds))
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_compare_cell, [cfg] * len(seeds), seeds, [out] * len(seeds)))
    else:
        results = [_compare_cell(cfg, s, out) for s in seeds]
    all_logs = dict(zip(seeds, results))
    final, curves, plots = aggregate(all_logs, list(cfg.channel.snr_set_db), cfg.train.epochs)
    _write_text(out / "compare.csv", final)
    _write_text(out / "compare_curves.csv", curves)
    for name, text in plots.items():
        _write_text(out / name, text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite
    ok = run_suite(seeds=range(args.seeds), fault=args.inject_fault)
    return EXIT_OK if ok else EXIT_CHECK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semcom", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one training regimen end to end")
    t.add_argument("--config")
    t.add_argument("--regimen", help=", ".join(REGIMENS))
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint over an SNR list")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--decoder", choices=("1", "2"), required=True)
    e.add_argument("--snr", default="1,3,5,7")
    e.add_argument("--data", help="'synthetic[:n=..,extent=..,seed=..]' or a PPM directory")
    e.add_argument("--config")
    e.add_argument("--out", help="CSV path (default stdout)")
    e.add_argument("--dump-images", dest="dump_images")
    e.add_argument("--label", default="eval", help="value of the regimen column")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="all regimens x seeds, aggregated")
    c.add_argument("--config")
    c.add_argument("--seeds", type=int, default=5)
    c.add_argument("--out", required=True)
    c.add_argument("--workers", type=int, default=1)
    c.set_defaults(func=cmd_compare)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op and the pipeline")
    g.add_argument("--seeds", type=int, default=10)
    g.add_argument("--inject-fault", dest="inject_fault", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, cfgmod.ExperimentConfigError, ConfigError, PPMError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingAborted, NonFiniteError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
