"""Command-line entry point: ``wmtract <command> [--config FILE] [--set k=v ...]``.

Exit codes: 0 success, 1 runtime error, 2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .config import dump_config, load_config
from .errors import ConfigError, WmtractError
from .gradcheck import TOL, run_gradchecks
from .metrics import MEASURES, bland_altman, bland_altman_csv, dice, records_csv, repro_report
from .phantom import make_cohort, write_cohort
from .svg import emit_bland_altman_svg
from .train import load_network, train_model
from .volgrid import as_mask, read_nifti, write_nifti

UNITS = {"fa": "", "md": "mm^2/s", "volume_ml": "ml"}


def _run_dir(cfg) -> Path:
    d = Path(cfg["io"]["run_dir"])
    dump_config(cfg, d)
    return d


def _checkpoint(cfg) -> Path:
    ck = cfg["io"]["checkpoint"]
    return Path(ck) if ck else Path(cfg["io"]["run_dir"]) / "best.wmtp"


def cmd_make_phantom(cfg) -> int:
    p = cfg["phantom"]
    n = p["n_train"] + p["n_validate"] + p["n_test"]
    cohort = make_cohort(n, pl.phantom_spec(cfg), pl.jitter(cfg), (p["n_train"], p["n_validate"], p["n_test"]))
    root = Path(cfg["io"]["data_dir"])
    write_cohort(cohort, root)
    dump_config(cfg, root)
    print(f"wrote {n} subjects to {root}")
    return 0


def cmd_fit_tensor(cfg) -> int:
    root = Path(cfg["io"]["data_dir"])
    entries = pl.fit_cohort_maps(root, cfg["io"]["workers"])
    dump_config(cfg, root)
    print(f"fitted tensors for {len(entries)} subjects (scan and rescan)")
    return 0


def cmd_train(cfg) -> int:
    entries = pl.load_manifest(cfg["io"]["data_dir"])
    spec = cfg["io"]["input"]
    ds_train = pl.dataset(entries, "train", spec)
    ds_val = pl.dataset(entries, "validate", spec)
    out = _run_dir(cfg)

    def report(rec):
        print(f"epoch {rec['epoch']:3d}  train {rec['train_loss']:.5f}  val {rec['val_loss']:.5f}  lr {rec['lr']:.4g}")

    res = train_model(ds_train, ds_val if len(ds_val) else None, pl.train_config(cfg), out, progress=report)
    print(f"best epoch {res.best_epoch} (val {res.best_val:.5f}); checkpoints in {out}")
    return 0


def cmd_segment(cfg) -> int:
    tc = pl.train_config(cfg)
    net = load_network(_checkpoint(cfg), tc.network)
    entries = pl.load_manifest(cfg["io"]["data_dir"])
    split, spec = cfg["metrics"]["split"], cfg["io"]["input"]
    out = _run_dir(cfg) / "segment"
    timing = {}
    for suffix, tag in (("", "scan"), (pl.RESCAN, "rescan")):
        for s in pl.dataset(entries, split, spec, suffix).samples:
            seg = pl.segment_sample(net, s, tc)
            d = out / s.subject_id
            d.mkdir(parents=True, exist_ok=True)
            write_nifti(seg.probability, d / f"probability{suffix}.nii")
            write_nifti(seg.mask, d / f"mask{suffix}.nii")
            timing.setdefault(s.subject_id, {})[tag] = round(seg.seconds, 4)
    (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    secs = [t["scan"] for t in timing.values()]
    print(f"segmented {len(timing)} subjects, mean {np.mean(secs):.3f} s per volume")
    return 0


def cmd_evaluate(cfg) -> int:
    tc = pl.train_config(cfg)
    entries = pl.load_manifest(cfg["io"]["data_dir"])
    ds = pl.dataset(entries, cfg["metrics"]["split"], cfg["io"]["input"])
    seg_dir = Path(cfg["io"]["run_dir"]) / "segment"
    out = _run_dir(cfg) / "evaluate"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in ds.samples:
        pred = as_mask(read_nifti(seg_dir / s.subject_id / "mask.nii"))
        rows.append((s.subject_id, dice(pred, pl.reference_on_grid(s, tc))))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["subject_id", "dice"])
    w.writerows((sid, repr(v)) for sid, v in rows)
    (out / "dice.csv").write_text(buf.getvalue())
    vals = np.array([v for _, v in rows])
    summary = {
        "split": cfg["metrics"]["split"],
        "n": len(rows),
        "mean_dice": float(vals.mean()),
        "sd_dice": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"mean Dice {summary['mean_dice']:.4f} over {summary['n']} subjects")
    return 0


def cmd_repro_stats(cfg) -> int:
    tc = pl.train_config(cfg)
    entries = pl.load_manifest(cfg["io"]["data_dir"])
    split = cfg["metrics"]["split"]
    seg_dir = Path(cfg["io"]["run_dir"]) / "segment"
    records = []
    for e in entries:
        if e["split"] != split:
            continue
        sid, p = e["subject_id"], e["paths"]
        m1 = read_nifti(seg_dir / sid / "mask.nii")
        m2 = read_nifti(seg_dir / sid / f"mask{pl.RESCAN}.nii")
        fa = (read_nifti(p["fa"]), read_nifti(p["fa" + pl.RESCAN]))
        md = (read_nifti(p["md"]), read_nifti(p["md" + pl.RESCAN]))
        records.append(pl.subject_record(sid, m1, m2, fa, md, tc.roi))
    report = repro_report(records)
    out = _run_dir(cfg) / "repro"
    out.mkdir(parents=True, exist_ok=True)
    (out / "repro_report.json").write_text(report.to_json())
    (out / "subjects.csv").write_text(records_csv(records))
    (out / "bland_altman.csv").write_text(bland_altman_csv(records))
    for name in MEASURES:
        ba = bland_altman([r.scan.get(name) for r in records], [r.rescan.get(name) for r in records])
        (out / f"bland_altman_{name}.svg").write_text(emit_bland_altman_svg(ba.table, ba.loa, name, UNITS[name]))
    print(f"kappa {report.kappa_mean:.3f} ({report.kappa_sd:.3f}) {report.kappa_label}")
    for name, st in report.measures.items():
        print(f"{name:10s} diff {st.diff_mean:.4g} ({st.diff_sd:.2g})  R2 {st.r2:.3f}  paired p {st.paired.p:.3f}")
    return 0


def cmd_gradcheck(cfg) -> int:
    m = cfg["metrics"]
    errors = run_gradchecks(range(m["gradcheck_seeds"]), m["gradcheck_h"])
    out = _run_dir(cfg)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["operator", "max_rel_error", "pass"])
    ok = True
    for name, err in errors.items():
        passed = err < TOL
        ok &= passed
        w.writerow([name, f"{err:.3e}", "pass" if passed else "FAIL"])
        print(f"{name:20s} {err:.3e}  {'pass' if passed else 'FAIL'}")
    (out / "gradcheck.csv").write_text(buf.getvalue())
    return 0 if ok else 1


COMMANDS = {
    "make-phantom": cmd_make_phantom,
    "fit-tensor": cmd_fit_tensor,
    "train": cmd_train,
    "segment": cmd_segment,
    "evaluate": cmd_evaluate,
    "repro-stats": cmd_repro_stats,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wmtract", description="White-matter tract segmentation toolkit")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config field")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (WmtractError, OSError, ValueError, ArithmeticError) as exc:
        print(f"error in {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
