"""Workflows shared by the command line and the end-to-end checks.

A cohort directory holds one folder per subject plus ``manifest.json``
(list of {subject_id, split, paths}); paths are relative to the directory.
``fit_cohort_maps`` adds tensor / FA / MD maps for scan and rescan.
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Sequence

import numpy as np

from .dti import GradientTable, fa_map, fit_tensor, md_map
from .errors import DatasetError
from .metrics import ReproRecord, cohens_kappa, dice, scan_measures
from .nets import LossSpec, Network, NetworkSpec
from .phantom import Jitter, PhantomSpec
from .train import Dataset, Sample, SegmentationPair, TrainConfig, segment, substream
from .volgrid import RoiBox, Volume, as_mask, crop_pad, read_nifti, stack_channels, write_nifti

INPUT_KINDS = {"tensor": 6, "fa": 1, "md": 1}
DIFFUSIVITY = {"tensor": True, "fa": False, "md": True}
RESCAN = "_rescan"


def parse_input(spec: str) -> list[str]:
    kinds = [k.strip() for k in spec.split("+") if k.strip()]
    if not kinds:
        raise ValueError("input must name at least one map")
    for k in kinds:
        if k not in INPUT_KINDS:
            raise ValueError(f"unknown input map {k!r}; choose from {sorted(INPUT_KINDS)}")
    if len(set(kinds)) != len(kinds):
        raise ValueError(f"input {spec!r} repeats a map")
    return kinds


def input_channels(spec: str) -> int:
    return sum(INPUT_KINDS[k] for k in parse_input(spec))


def channel_scales(spec: str, diffusivity_scale: float) -> tuple[float, ...]:
    """Diffusivity-valued channels go from mm^2/s to um^2/ms; FA is left alone."""
    out: list[float] = []
    for k in parse_input(spec):
        out += [diffusivity_scale if DIFFUSIVITY[k] else 1.0] * INPUT_KINDS[k]
    return tuple(out)


# ------------------------------------------------------------- config -> objects


def roi_from(cfg: dict) -> RoiBox | None:
    r = cfg["roi"]
    return None if r["size"] is None else RoiBox(tuple(r["offset"]), tuple(r["size"]))


def train_config(cfg: dict) -> TrainConfig:
    o, t = cfg["optim"], cfg["train"]
    return TrainConfig(
        network=NetworkSpec(**cfg["network"]),
        loss=LossSpec(**cfg["loss"]),
        optimizer=o["name"],
        lr=o["lr"],
        beta1=o["beta1"],
        beta2=o["beta2"],
        eps=o["eps"],
        patience=o["patience"],
        factor=o["factor"],
        min_delta=o["min_delta"],
        batch_size=t["batch_size"],
        epochs=t["epochs"],
        seed=cfg["seed"],
        roi=roi_from(cfg),
        input_scale=channel_scales(cfg["io"]["input"], t["diffusivity_scale"]),
        workers=cfg["io"]["workers"],
        buffer=t["buffer"],
    )


def phantom_spec(cfg: dict) -> PhantomSpec:
    p = cfg["phantom"]
    sigma = 0.0 if p["snr"] is None else p["s0"] / p["snr"]
    seed = int(substream(cfg["seed"], "phantom").integers(0, 2**31))
    return PhantomSpec(
        dims=tuple(p["dims"]), start=tuple(p["start"]), end=tuple(p["end"]), bulge=tuple(p["bulge"]),
        radius=p["radius"], lambda_par=p["lambda_par"], lambda_perp=p["lambda_perp"],
        background=p["background"], s0=p["s0"], sigma=sigma, n_directions=p["n_directions"],
        bvalue=p["bvalue"], seed=seed,
    )


def jitter(cfg: dict) -> Jitter:
    p = cfg["phantom"]
    return Jitter(p["jitter_endpoint"], p["jitter_bulge"], tuple(p["jitter_radius"]), p["jitter_diffusivity"])


# ---------------------------------------------------------------- manifests


def load_manifest(root: str | os.PathLike) -> list[dict]:
    """Entries with paths resolved against the cohort directory."""
    root = Path(root)
    path = root / "manifest.json"
    try:
        entries = json.loads(path.read_text())
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    for e in entries:
        e["paths"] = {k: str(root / v) for k, v in e["paths"].items()}
    return entries


def save_manifest(root: str | os.PathLike, entries: Sequence[dict]) -> Path:
    root = Path(root)
    out = []
    for e in entries:
        rel = {k: os.path.relpath(v, root) for k, v in e["paths"].items()}
        out.append({**e, "paths": rel})
    path = root / "manifest.json"
    path.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return path


def fit_maps(dwi: Volume, g: GradientTable, tissue: Volume, workers: int = 1) -> tuple[Volume, Volume, Volume]:
    t = fit_tensor(dwi, g, tissue, workers=workers)
    return t, fa_map(t), md_map(t)


def fit_cohort_maps(root: str | os.PathLike, workers: int = 1) -> list[dict]:
    """Fit tensors for every scan and rescan; add the map paths to the manifest."""
    entries = load_manifest(root)
    for e in entries:
        p = e["paths"]
        g = GradientTable.from_fsl(p["bvals"], p["bvecs"])
        tissue = read_nifti(p["tissue"])
        folder = Path(p["dwi"]).parent
        for suffix in ("", RESCAN):
            maps = fit_maps(read_nifti(p["dwi" + suffix]), g, tissue, workers)
            for name, vol in zip(("tensor", "fa", "md"), maps):
                out = folder / f"{name}{suffix}.nii"
                write_nifti(vol, out)
                p[name + suffix] = str(out)
    save_manifest(root, entries)
    return entries


def dataset(entries: Sequence[dict], split: str, input_spec: str = "tensor", suffix: str = "") -> Dataset:
    kinds = parse_input(input_spec)
    samples = []
    for e in entries:
        if e["split"] != split:
            continue
        p = e["paths"]
        missing = [k + suffix for k in kinds if k + suffix not in p]
        if missing:
            raise DatasetError(f"subject {e['subject_id']} has no {missing} maps; run fit-tensor first")
        samples.append(
            Sample(
                e["subject_id"], p[kinds[0] + suffix], p["truth"], p["tissue"],
                tuple(p[k + suffix] for k in kinds[1:]),
            )
        )
    return Dataset(samples, split)


def load_input(sample: Sample) -> tuple[Volume, Volume | None]:
    x = read_nifti(sample.input_path)
    if sample.extra_paths:
        x = stack_channels([x] + [read_nifti(p) for p in sample.extra_paths])
    return x, read_nifti(sample.mask_path) if sample.mask_path else None


# ------------------------------------------------------------- evaluation


def segment_sample(net: Network, sample: Sample, cfg: TrainConfig) -> SegmentationPair:
    x, tissue = load_input(sample)
    return segment(net, x, cfg, tissue)


def reference_on_grid(sample: Sample, cfg: TrainConfig) -> np.ndarray:
    ref = read_nifti(sample.reference_path)
    if cfg.roi is not None:
        ref = crop_pad(ref, cfg.roi)
    return as_mask(ref)


def subject_record(
    subject_id: str,
    seg_scan: Volume,
    seg_rescan: Volume,
    fa: tuple[Volume, Volume],
    md: tuple[Volume, Volume],
    roi: RoiBox | None,
) -> ReproRecord:
    """Scan/rescan measures of one subject; kappa over every voxel of the ROI grid."""

    def grid(v):
        return crop_pad(v, roi) if roi is not None else v

    m1 = scan_measures(grid(fa[0]), grid(md[0]), seg_scan, subject_id)
    m2 = scan_measures(grid(fa[1]), grid(md[1]), seg_rescan, subject_id)
    return ReproRecord(subject_id, m1, m2, cohens_kappa(seg_scan, seg_rescan))


def repro_records(net: Network, entries: Sequence[dict], split: str, cfg: TrainConfig, input_spec="tensor"):
    """Segment scan and rescan of each subject in ``split``; returns
    (records, per-subject (scan, rescan) segmentations)."""
    scans = dataset(entries, split, input_spec)
    rescans = dataset(entries, split, input_spec, RESCAN)
    by_id = {e["subject_id"]: e["paths"] for e in entries}
    records, segs = [], {}
    for s1, s2 in zip(scans.samples, rescans.samples):
        a = segment_sample(net, s1, cfg)
        b = segment_sample(net, s2, cfg)
        p = by_id[s1.subject_id]
        fa = (read_nifti(p["fa"]), read_nifti(p["fa" + RESCAN]))
        md = (read_nifti(p["md"]), read_nifti(p["md" + RESCAN]))
        records.append(subject_record(s1.subject_id, a.mask, b.mask, fa, md, cfg.roi))
        segs[s1.subject_id] = (a, b)
    return records, segs


def dice_scores(net: Network, ds: Dataset, cfg: TrainConfig) -> dict[str, float]:
    out = {}
    for s in ds.samples:
        seg = segment_sample(net, s, cfg)
        out[s.subject_id] = dice(as_mask(seg.mask), reference_on_grid(s, cfg))
    return out
