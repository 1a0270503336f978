"""Segmentation overlap, agreement and scan-rescan reproducibility statistics.

Statistics accumulate in float64. The Student-t distribution is evaluated
through the regularized incomplete beta function (continued fraction), so
no statistics package is needed.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateError, DomainError, EmptyTractError, InsufficientDataError, ShapeError
from .volgrid import Volume, as_mask

MEASURES = ("fa", "md", "volume_ml")
LOA_Z = 1.96


def _mask(m) -> np.ndarray:
    if isinstance(m, Volume):
        return as_mask(m)
    a = np.asarray(m)
    if a.dtype != bool:
        if not np.all((a == 0) | (a == 1)):
            raise ValueError("mask values must be exactly 0 or 1")
        a = a.astype(bool)
    return a


def _same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")


# ------------------------------------------------------------------- overlap


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(a, b, domain=None) -> ConfusionCounts:
    """Counts with ``a`` as prediction and ``b`` as reference."""
    a, b = _mask(a), _mask(b)
    _same(a, b)
    if domain is not None:
        d = _mask(domain)
        _same(a, d)
        a, b = a[d], b[d]
    tp = int(np.count_nonzero(a & b))
    fp = int(np.count_nonzero(a & ~b))
    fn = int(np.count_nonzero(~a & b))
    return ConfusionCounts(tp, fp, fn, int(a.size) - tp - fp - fn)


def dice(a, b) -> float:
    """2|A n B| / (|A| + |B|); two empty masks score 1."""
    c = confusion(a, b)
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


def kappa_from_counts(c: ConfusionCounts) -> float:
    n = c.n
    if n == 0:
        raise DomainError("kappa evaluation domain is empty")
    po = (c.tp + c.tn) / n
    pe = ((c.tp + c.fp) * (c.tp + c.fn) + (c.fn + c.tn) * (c.fp + c.tn)) / (n * n)
    if pe == 1.0:
        return 1.0 if c.fp == 0 and c.fn == 0 else 0.0
    return (po - pe) / (1 - pe)


def cohens_kappa(a, b, domain=None) -> float:
    """Chance-corrected agreement over ``domain`` (all voxels when omitted)."""
    return kappa_from_counts(confusion(a, b, domain))


def kappa_label(k: float) -> str:
    """Landis-Koch descriptor for a kappa value."""
    if k <= 0:
        return "poor"
    for bound, label in ((0.2, "slight"), (0.4, "fair"), (0.6, "moderate"), (0.8, "substantial")):
        if k <= bound:
            return label
    return "almost perfect"


def median_in_mask(values, seg) -> float:
    if isinstance(values, Volume):
        values = values.data[0]
    s = _mask(seg)
    values = np.asarray(values)
    _same(values, s)
    sel = values[s].astype(np.float64)
    if sel.size == 0:
        raise EmptyTractError("segmentation is empty")
    return float(np.median(sel))


# -------------------------------------------------------------- regression


def _vec(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).ravel()
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def ols_r2(x, y) -> float:
    """Coefficient of determination of the least-squares line y = b0 + b1 x."""
    x, y = _vec(x, "x"), _vec(y, "y")
    if x.size != y.size:
        raise ShapeError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 3:
        raise InsufficientDataError(f"need at least 3 pairs, got {x.size}")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = dx @ dx, dy @ dy
    if sxx == 0 or syy == 0:
        raise DegenerateError("R^2 undefined for zero-variance input")
    b1 = (dx @ dy) / sxx
    res = dy - b1 * dx
    return float(1.0 - (res @ res) / syy)


@dataclass(frozen=True)
class BlandAltman:
    mean_diff: float
    sd_diff: float
    lower: float
    upper: float
    table: list[tuple[float, float]]

    @property
    def loa(self) -> tuple[float, float, float]:
        return (self.lower, self.mean_diff, self.upper)


def bland_altman(x, y) -> BlandAltman:
    x, y = _vec(x, "x"), _vec(y, "y")
    if x.size != y.size:
        raise ShapeError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise InsufficientDataError(f"need at least 2 pairs, got {x.size}")
    d = y - x
    md, sd = float(d.mean()), float(d.std(ddof=1))
    table = [(float(m), float(v)) for m, v in zip((x + y) / 2, d)]
    return BlandAltman(md, sd, md - LOA_Z * sd, md + LOA_Z * sd, table)


# ------------------------------------------------------------------- t tests


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    lbt = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(lbt)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf2(t: float, df: float) -> float:
    """Two-sided tail probability P(|T| >= |t|) for Student t with ``df``."""
    if df <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    if math.isinf(t):
        return 0.0
    return min(1.0, betainc_reg(df / 2.0, 0.5, df / (df + t * t)))


def t_cdf(t: float, df: float) -> float:
    tail = 0.5 * t_sf2(t, df)
    return 1.0 - tail if t >= 0 else tail


@dataclass(frozen=True)
class TTest:
    t: float
    df: float
    p: float


def t_test_paired(x, y) -> TTest:
    """Paired test on d = y - x. All-zero differences give t = 0, p = 1."""
    x, y = _vec(x, "x"), _vec(y, "y")
    if x.size != y.size:
        raise ShapeError(f"length mismatch: {x.size} vs {y.size}")
    n = x.size
    if n < 2:
        raise InsufficientDataError(f"need at least 2 pairs, got {n}")
    d = y - x
    if not d.any():
        return TTest(0.0, float(n - 1), 1.0)
    sd = d.std(ddof=1)
    if sd == 0:
        raise DegenerateError("paired differences have zero variance")
    t = float(d.mean() / (sd / math.sqrt(n)))
    return TTest(t, float(n - 1), t_sf2(t, n - 1))


def t_test_two_sample(x, y) -> TTest:
    """Welch's unequal-variance test with Welch-Satterthwaite df."""
    x, y = _vec(x, "x"), _vec(y, "y")
    if x.size < 2 or y.size < 2:
        raise InsufficientDataError("each sample needs at least 2 values")
    vx, vy = x.var(ddof=1) / x.size, y.var(ddof=1) / y.size
    se2 = vx + vy
    if se2 == 0:
        if x.mean() == y.mean():
            return TTest(0.0, float(x.size + y.size - 2), 1.0)
        raise DegenerateError("both samples have zero variance")
    t = float((x.mean() - y.mean()) / math.sqrt(se2))
    df = float(se2 * se2 / (vx * vx / (x.size - 1) + vy * vy / (y.size - 1)))
    return TTest(t, float(df), t_sf2(t, df))


# ----------------------------------------------------------- reproducibility


@dataclass(frozen=True)
class ScanMeasures:
    fa: float
    md: float
    volume_ml: float

    def get(self, name: str) -> float:
        return getattr(self, name)


@dataclass(frozen=True)
class ReproRecord:
    subject_id: str
    scan: ScanMeasures
    rescan: ScanMeasures
    kappa: float


def scan_measures(fa, md, seg: Volume, subject_id: str = "?") -> ScanMeasures:
    """Median FA / MD inside a segmentation and its volume in ml."""
    try:
        f = median_in_mask(fa, seg)
        m = median_in_mask(md, seg)
    except EmptyTractError as exc:
        raise EmptyTractError(f"subject {subject_id}: {exc}") from exc
    count = int(_mask(seg).sum())
    return ScanMeasures(f, m, count * seg.voxel_volume / 1000.0)


@dataclass
class MeasureStats:
    diff_mean: float
    diff_sd: float
    mean: float
    sd: float
    r2: float
    paired: TTest


@dataclass
class ReproReport:
    n: int
    measures: dict[str, MeasureStats]
    kappa_mean: float
    kappa_sd: float
    kappa_label: str
    comparison: dict[str, TTest] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _sd(a: np.ndarray) -> float:
    return float(a.std(ddof=1)) if a.size > 1 else 0.0


def repro_report(records: Sequence[ReproRecord], reference: Sequence[ReproRecord] | None = None) -> ReproReport:
    """Scan-rescan summary across subjects.

    ``diff`` is the mean (SD) of |scan - rescan|; ``mean`` pools all 2n
    scans. With ``reference`` records, kappa and the absolute differences
    are compared against them with Welch tests.
    """
    n = len(records)
    if n < 3:
        raise InsufficientDataError(f"need at least 3 subjects, got {n}")
    stats = {}
    for name in MEASURES:
        x = np.array([r.scan.get(name) for r in records])
        y = np.array([r.rescan.get(name) for r in records])
        ad = np.abs(x - y)
        pooled = np.concatenate([x, y])
        try:
            r2 = ols_r2(x, y)
            paired = t_test_paired(x, y)
        except (DegenerateError, InsufficientDataError) as exc:
            raise type(exc)(f"{name} over subjects {[r.subject_id for r in records]}: {exc}") from exc
        stats[name] = MeasureStats(float(ad.mean()), _sd(ad), float(pooled.mean()), _sd(pooled), r2, paired)
    k = np.array([r.kappa for r in records])
    comparison = {}
    if reference:
        kr = np.array([r.kappa for r in reference])
        comparison["kappa"] = t_test_two_sample(k, kr)
        for name in MEASURES:
            a = np.abs([r.scan.get(name) - r.rescan.get(name) for r in records])
            b = np.abs([r.scan.get(name) - r.rescan.get(name) for r in reference])
            comparison[f"{name}_absdiff"] = t_test_two_sample(a, b)
    km = float(k.mean())
    meta = {"mean_sd": "pooled over all scans and rescans", "sd": "sample (n-1)", "diff": "mean |scan - rescan|"}
    return ReproReport(n, stats, km, _sd(k), kappa_label(km), comparison, meta)


def records_csv(records: Sequence[ReproRecord]) -> str:
    """Per-subject long table: subject_id, scan, measure, value."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["subject_id", "scan", "measure", "value"])
    for r in records:
        for tag, m in (("scan", r.scan), ("rescan", r.rescan)):
            for name in MEASURES:
                w.writerow([r.subject_id, tag, name, repr(m.get(name))])
        w.writerow([r.subject_id, "pair", "kappa", repr(r.kappa)])
    return buf.getvalue()


def bland_altman_csv(records: Sequence[ReproRecord]) -> str:
    """Per-subject (mean, diff) rows for each measure, diff = rescan - scan."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["measure", "subject_id", "mean", "diff"])
    for name in MEASURES:
        ba = bland_altman([r.scan.get(name) for r in records], [r.rescan.get(name) for r in records])
        for r, (m, d) in zip(records, ba.table):
            w.writerow([name, r.subject_id, repr(m), repr(d)])
    return buf.getvalue()
