"""Training loop with a threaded batch producer, validation and inference."""
from __future__ import annotations

import json
import math
import os
import queue
import threading
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .autograd import load_params, save_params
from .errors import DatasetError, NumericError, ShapeError
from .nets import LossSpec, Network, NetworkSpec, build_network
from .optim import PlateauSchedule, make_optimizer
from .volgrid import RoiBox, Volume, apply_mask, as_mask, crop_pad, mask_volume, read_nifti, stack_channels

SPLITS = ("train", "validate", "test")
THRESHOLD = 0.5


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named consumer of the run seed."""
    return np.random.default_rng([seed, zlib.crc32(name.encode()), *extra])


@dataclass(frozen=True)
class Sample:
    subject_id: str
    input_path: str
    reference_path: str
    mask_path: str | None = None
    extra_paths: tuple[str, ...] = ()


@dataclass
class Dataset:
    samples: list[Sample]
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split {self.split!r}")

    def __len__(self):
        return len(self.samples)

    @property
    def subjects(self) -> set[str]:
        return {s.subject_id for s in self.samples}


def check_disjoint(*datasets: Dataset) -> None:
    seen: dict[str, str] = {}
    for ds in datasets:
        for sid in ds.subjects:
            if sid in seen and seen[sid] != ds.split:
                raise DatasetError(f"subject {sid} appears in both {seen[sid]} and {ds.split}")
            seen[sid] = ds.split


@dataclass
class TrainConfig:
    network: NetworkSpec = field(default_factory=NetworkSpec)
    loss: LossSpec = field(default_factory=LossSpec)
    optimizer: str = "adam"
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10
    factor: float = 0.5
    min_delta: float = 1e-4
    batch_size: int = 4
    epochs: int = 30
    seed: int = 0
    roi: RoiBox | None = None
    input_scale: float | tuple[float, ...] = 1000.0
    workers: int = 1
    buffer: int = 2

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.buffer < 2:
            raise ValueError(f"buffer must hold >= 2 batches, got {self.buffer}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")


# ------------------------------------------------------------------- loading


def _read(path: str) -> Volume:
    try:
        return read_nifti(path)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc


def prepare_input(v: Volume, cfg: TrainConfig, mask: Volume | None = None) -> np.ndarray:
    """Crop, mask and scale one input volume to a (C, X, Y, Z) float32 array.

    ``cfg.input_scale`` is one factor for every channel or one per channel.
    """
    if mask is not None:
        v = apply_mask(v, mask)
    if cfg.roi is not None:
        v = crop_pad(v, cfg.roi)
    scale = np.asarray(cfg.input_scale, dtype=np.float32)
    if scale.ndim == 1:
        if scale.size != v.channels:
            raise ShapeError(f"{scale.size} channel scales for {v.channels} channels")
        scale = scale.reshape(-1, 1, 1, 1)
    return (v.data * scale).astype(np.float32)


def load_sample(s: Sample, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    x = _read(s.input_path)
    if s.extra_paths:
        try:
            x = stack_channels([x] + [_read(p) for p in s.extra_paths])
        except ShapeError as exc:
            raise DatasetError(f"{s.input_path}: {exc}") from exc
    r = _read(s.reference_path)
    m = _read(s.mask_path) if s.mask_path else None
    if x.shape != r.shape:
        raise DatasetError(f"{s.reference_path}: shape {r.shape} does not match input {x.shape}")
    if cfg.roi is not None:
        r = crop_pad(r, cfg.roi)
    try:
        ref = as_mask(r)
    except ValueError as exc:
        raise DatasetError(f"{s.reference_path}: {exc}") from exc
    return prepare_input(x, cfg, m), ref[None].astype(np.float32)


# ------------------------------------------------------------------ producer


class BatchStream:
    """One epoch of batches prepared on a background thread.

    Batch order comes from a seeded permutation; loads may fan out over
    ``cfg.workers`` threads but are reassembled in order. The buffer holds
    at most ``cfg.buffer`` finished batches.
    """

    _END = object()

    def __init__(self, ds: Dataset, cfg: TrainConfig, epoch: int = 0, shuffle: bool = True):
        if len(ds) == 0:
            raise DatasetError(f"{ds.split} dataset is empty")
        self.ds, self.cfg = ds, cfg
        n = len(ds)
        order = substream(cfg.seed, "batches", epoch).permutation(n) if shuffle else np.arange(n)
        self.batches = [order[i : i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
        self.drawn: list[str] = []
        self.max_occupancy = 0
        self._q: queue.Queue = queue.Queue(maxsize=cfg.buffer)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._q.put(item, timeout=0.05)
                return True
            except queue.Full:
                continue
        return False

    def _run(self):
        pool = ThreadPoolExecutor(self.cfg.workers) if self.cfg.workers > 1 else None
        try:
            for idx in self.batches:
                samples = [self.ds.samples[i] for i in idx]
                if pool is not None:
                    loaded = list(pool.map(lambda s: load_sample(s, self.cfg), samples))
                else:
                    loaded = [load_sample(s, self.cfg) for s in samples]
                x = np.stack([a for a, _ in loaded])
                r = np.stack([b for _, b in loaded])
                if not self._put((x, r, [s.subject_id for s in samples])):
                    return
            self._put(self._END)
        except BaseException as exc:  # handed to the consumer
            self._put(exc)
        finally:
            if pool is not None:
                pool.shutdown()

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray, list[str]]]:
        try:
            while True:
                self.max_occupancy = max(self.max_occupancy, self._q.qsize())
                item = self._q.get()
                if item is self._END:
                    return
                if isinstance(item, BaseException):
                    raise item
                self.drawn.extend(item[2])
                yield item
        finally:
            self.close()

    def close(self):
        self._stop.set()
        self._thread.join()


def batch_producer(ds: Dataset, cfg: TrainConfig, epoch: int = 0) -> BatchStream:
    return BatchStream(ds, cfg, epoch)


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    network: Network
    log: list[dict]
    best_epoch: int | None
    best_val: float
    audit: dict
    best_state: dict = field(default_factory=dict)

    def best_network(self) -> Network:
        """Copy of the network with the lowest-validation-loss weights."""
        net = build_network(self.network.spec, dtype=self.network.dtype)
        net.load_state_dict(self.best_state or self.network.state_dict())
        return net


def evaluate_loss(net: Network, ds: Dataset, cfg: TrainConfig) -> float:
    """Voxel-averaged loss over a dataset with eval-mode batch norm."""
    total, count = 0.0, 0
    for x, r, _ in BatchStream(ds, cfg, shuffle=False):
        p = net.forward(x, training=False)
        loss, _ = cfg.loss(p, r)
        total += loss * r.size
        count += r.size
    return total / count


def write_log(log: Sequence[dict], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for rec in log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def train_model(
    ds_train: Dataset,
    ds_val: Dataset | None,
    cfg: TrainConfig,
    out_dir: str | os.PathLike | None = None,
    progress=None,
) -> TrainResult:
    """Train a network; write ``best.wmtp``, ``last.wmtp`` and ``train_log.jsonl``
    under ``out_dir`` when given. ``progress`` is called with each log record."""
    check_disjoint(*(d for d in (ds_train, ds_val) if d is not None))
    net = build_network(cfg.network, seed=substream(cfg.seed, "init"))
    opt = make_optimizer(cfg.optimizer, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    sched = PlateauSchedule(cfg.lr, cfg.patience, cfg.factor, cfg.min_delta)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log: list[dict] = []
    best_state: dict = {}
    best_val, best_epoch = math.inf, None
    train_ids = ds_train.subjects
    foreign: set[str] = set()
    draws = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        stream = batch_producer(ds_train, cfg, epoch)
        for step, (x, r, ids) in enumerate(stream):
            foreign.update(set(ids) - train_ids)
            draws += len(ids)
            net.zero_grad()
            p = net.forward(x, training=True)
            loss, dp = cfg.loss(p, r)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}, step {step}")
            net.backward(dp)
            try:
                opt.step(net.params(), net.grads())
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, step {step}: {exc}") from exc
            total += loss * r.size
            count += r.size
        train_loss = total / count
        val_loss = evaluate_loss(net, ds_val, cfg) if ds_val is not None and len(ds_val) else train_loss
        if not math.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        lr_used = opt.lr
        opt.lr = sched.update(val_loss)
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            best_state = {k: v.copy() for k, v in net.state_dict().items()}
            if out is not None:
                save_params(out / "best.wmtp", net.state_dict())
        rec = {
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "lr": lr_used,
            "seconds": round(time.perf_counter() - t0, 3),
        }
        log.append(rec)
        if progress is not None:
            progress(rec)
    audit = {
        "train_subjects": len(train_ids),
        "draws": draws,
        "foreign_draws": sorted(foreign),
        "isolated": not foreign,
    }
    if foreign:
        raise DatasetError(f"batch producer drew non-training subjects {sorted(foreign)}")
    if out is not None:
        save_params(out / "last.wmtp", net.state_dict())
        if best_epoch is None:
            save_params(out / "best.wmtp", net.state_dict())
        write_log(log, out / "train_log.jsonl")
        (out / "audit.json").write_text(json.dumps(audit, indent=2, sort_keys=True) + "\n")
    return TrainResult(net, log, best_epoch, best_val, audit, best_state)


def load_network(path: str | os.PathLike, spec: NetworkSpec) -> Network:
    net = build_network(spec)
    net.load_state_dict(load_params(path))
    return net


# ----------------------------------------------------------------- inference


@dataclass(frozen=True)
class SegmentationPair:
    probability: Volume
    mask: Volume
    seconds: float


def segment(net: Network, x: Volume, cfg: TrainConfig, tissue: Volume | None = None) -> SegmentationPair:
    """Probability map (eval-mode batch norm) and mask ``p >= 0.5``.

    Outputs live on the ROI grid when ``cfg.roi`` is set.
    """
    if x.channels != net.spec.in_channels:
        raise ShapeError(f"input has {x.channels} channels, network expects {net.spec.in_channels}")
    t0 = time.perf_counter()
    arr = prepare_input(x, cfg, tissue)
    p = net.forward(arr[None], training=False)[0, 0].astype(np.float32)
    seconds = time.perf_counter() - t0
    grid = crop_pad(x.channel(0), cfg.roi) if cfg.roi is not None else x.channel(0)
    prob = grid.like(p[None])
    return SegmentationPair(prob, mask_volume(p >= THRESHOLD, grid.spacing, grid.origin), seconds)
