"""Observer agreement statistics: Bland-Altman, paired t-tests, variability.

All standard deviations use the n-1 denominator.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import special

from .errors import DataError, FormatError, InsufficientData, MissingData

__all__ = [
    "Measurement",
    "MeasurementTable",
    "StatsConfig",
    "BlandAltmanResult",
    "TTestResult",
    "VariabilityResult",
    "PairComparison",
    "ReferenceComparison",
    "bland_altman",
    "paired_t_test",
    "t_two_sided_p",
    "intraobserver_variability",
    "intraobserver_table",
    "interobserver_table",
    "compare_to_reference",
    "comparison_rows",
    "write_comparisons_csv",
    "read_reference_csv",
    "write_reference_csv",
    "bland_altman_svg",
]

MODALITIES = ("us2d", "us3d", "reference")
TABLE_HEADER = ["subject", "observer", "repeat", "modality", "lobe", "volume_ml"]
RESULT_HEADER = ["comparison", "n", "bias", "sd", "loa_low", "loa_high", "t", "df", "p", "significant"]


@dataclass(frozen=True)
class StatsConfig:
    alpha: float = 0.05
    loa_multiplier: float = 1.96

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if not self.loa_multiplier > 0:
            raise ValueError(f"loa_multiplier must be positive, got {self.loa_multiplier}")


# --------------------------------------------------------------------------
# measurement table

@dataclass(frozen=True)
class Measurement:
    subject: str
    observer: int
    repeat: int
    modality: str
    volume_ml: float
    lobe: str = "total"

    @property
    def key(self):
        return (self.subject, self.observer, self.repeat, self.modality, self.lobe)


class MeasurementTable:
    """Long-form volume records keyed by (subject, observer, repeat, modality, lobe)."""

    def __init__(self, records: Sequence[Measurement] = ()):
        self._records: list[Measurement] = []
        self._keys: set = set()
        for r in records:
            self.add(r)

    def add(self, rec: Measurement):
        if rec.modality not in MODALITIES:
            raise DataError(f"unknown modality {rec.modality!r}")
        if not rec.volume_ml > 0:
            raise DataError(f"volume must be positive, got {rec.volume_ml} for {rec.key}")
        if rec.key in self._keys:
            raise DataError(f"duplicate measurement key {rec.key}")
        self._keys.add(rec.key)
        self._records.append(rec)

    def __len__(self):
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    def select(self, **criteria) -> list[Measurement]:
        return [r for r in self._records if all(getattr(r, k) == v for k, v in criteria.items())]

    def observers(self, modality=None) -> list[int]:
        return sorted({r.observer for r in self._records if modality in (None, r.modality)})

    def subjects(self) -> list[str]:
        seen = {}
        for r in self._records:
            seen.setdefault(r.subject, None)
        return list(seen)

    def volume_map(self, modality, repeat=None, lobe="total") -> dict:
        """``{(subject, observer[, repeat]): volume}`` for one modality."""
        out = {}
        for r in self._records:
            if r.modality != modality or r.lobe != lobe:
                continue
            if repeat is None:
                out[(r.subject, r.observer, r.repeat)] = r.volume_ml
            elif r.repeat == repeat:
                out[(r.subject, r.observer)] = r.volume_ml
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TABLE_HEADER)
            for r in self._records:
                w.writerow([r.subject, r.observer, r.repeat, r.modality, r.lobe, _fmt(r.volume_ml)])

    @classmethod
    def from_csv(cls, path) -> "MeasurementTable":
        path = Path(path)
        if not path.exists():
            raise FormatError(f"{path}: file not found")
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != TABLE_HEADER:
            raise FormatError(f"{path} line 1: expected header {','.join(TABLE_HEADER)}")
        table = cls()
        for lineno, row in enumerate(rows[1:], start=2):
            if not row:
                continue
            if len(row) != len(TABLE_HEADER):
                missing = TABLE_HEADER[len(row)] if len(row) < len(TABLE_HEADER) else None
                msg = f"missing field '{missing}'" if missing else "too many fields"
                raise FormatError(f"{path} line {lineno}: {msg}")
            try:
                rec = Measurement(row[0], int(row[1]), int(row[2]), row[3], float(row[5]), row[4])
                table.add(rec)
            except (ValueError, DataError) as exc:
                raise FormatError(f"{path} line {lineno}: {exc}") from None
        return table


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.10g}"


# --------------------------------------------------------------------------
# core statistics

def _sample_sd(x: np.ndarray) -> float:
    n = len(x)
    if n < 2:
        return 0.0
    m = x.mean()
    return math.sqrt(float(np.sum((x - m) ** 2)) / (n - 1))


@dataclass(frozen=True)
class BlandAltmanResult:
    bias: float
    sd: float
    loa_low: float
    loa_high: float
    means: np.ndarray = field(repr=False)
    differences: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.differences)


def bland_altman(pairs, cfg: StatsConfig = StatsConfig()) -> BlandAltmanResult:
    """Bias and limits of agreement for paired measurements ``(a, b)``.

    Differences are ``a - b``; the limits are ``bias ± multiplier * sd``.
    """
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    if len(arr) < 2:
        raise InsufficientData(f"Bland-Altman needs at least 2 pairs, got {len(arr)}")
    a, b = arr[:, 0], arr[:, 1]
    d = a - b
    bias = float(d.mean())
    sd = _sample_sd(d)
    half = cfg.loa_multiplier * sd
    return BlandAltmanResult(bias, sd, bias - half, bias + half, (a + b) / 2.0, d)


def t_two_sided_p(t: float, df: float) -> float:
    """Two-sided tail probability ``P(|T| >= |t|)`` of Student's t."""
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return float(special.betainc(0.5 * df, 0.5, x))


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p: float
    significant: bool
    mean_difference: float
    sd_difference: float
    degenerate: bool = False


def paired_t_test(x, y, cfg: StatsConfig = StatsConfig()) -> TTestResult:
    """Paired-samples t-test of ``mean(x - y) == 0``.

    Zero-variance differences do not raise: a zero mean gives ``t=0, p=1``
    and a nonzero mean gives ``t=±inf, p=0``, both flagged ``degenerate``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DataError(f"paired samples differ in length: {len(x)} vs {len(y)}")
    n = len(x)
    if n < 2:
        raise InsufficientData(f"paired t-test needs n >= 2, got {n}")
    d = x - y
    mean = float(d.mean())
    sd = _sample_sd(d)
    df = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, df, 1.0, False, mean, sd, degenerate=True)
        return TTestResult(math.copysign(math.inf, mean), df, 0.0, True, mean, sd, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    p = t_two_sided_p(t, df)
    return TTestResult(t, df, p, p < cfg.alpha, mean, sd)


# --------------------------------------------------------------------------
# variability

VARIABILITY_METHODS = ("range_ratio", "cv")


def _variability_percent(values, method) -> float:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        raise InsufficientData(f"variability needs at least 2 repeats, got {len(v)}")
    mean = float(v.mean())
    if method == "range_ratio":
        return 100.0 * float(v.max() - v.min()) / mean
    if method == "cv":
        return 100.0 * _sample_sd(v) / mean
    raise ValueError(f"unknown variability method {method!r}; use one of {VARIABILITY_METHODS}")


@dataclass(frozen=True)
class VariabilityResult:
    method: str
    per_subject: dict
    mean: float
    sd: float


def intraobserver_variability(volumes, method: str = "range_ratio") -> VariabilityResult:
    """Repeat-to-repeat variability in percent.

    ``volumes`` maps subject to its repeat volumes (or is a
    subjects-by-repeats array). ``range_ratio`` is ``100 (max - min) / mean``;
    ``cv`` is ``100 sd / mean``. The aggregate is mean and SD over subjects.
    """
    if not isinstance(volumes, Mapping):
        arr = np.asarray(volumes, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        volumes = {str(i): row for i, row in enumerate(arr)}
    if not volumes:
        raise InsufficientData("no subjects given")
    per = {s: _variability_percent(v, method) for s, v in volumes.items()}
    vals = np.array(list(per.values()))
    return VariabilityResult(method, per, float(vals.mean()), _sample_sd(vals))


def intraobserver_table(table: MeasurementTable, modality: str, observer: int, method="range_ratio") -> VariabilityResult:
    by_subject: dict = {}
    for r in table.select(modality=modality, observer=observer, lobe="total"):
        by_subject.setdefault(r.subject, []).append((r.repeat, r.volume_ml))
    if not by_subject:
        raise MissingData(f"no {modality} data for observer {observer}")
    return intraobserver_variability({s: [v for _, v in sorted(rv)] for s, rv in by_subject.items()}, method)


# --------------------------------------------------------------------------
# table-level comparisons

@dataclass(frozen=True)
class PairComparison:
    name: str
    first: int
    second: int
    bland_altman: BlandAltmanResult
    ttest: TTestResult


def _pair_values(vmap, subjects, a, b):
    missing = [(s, o) for s in subjects for o in (a, b) if (s, o) not in vmap]
    if missing:
        listing = ", ".join(f"(subject {s}, observer {o})" for s, o in missing)
        raise MissingData(f"absent measurements: {listing}")
    return [(vmap[(s, a)], vmap[(s, b)]) for s in subjects]


def interobserver_table(table: MeasurementTable, modality: str, cfg: StatsConfig = StatsConfig(),
                        pairs=None, repeat: int = 1) -> list[PairComparison]:
    """Bland-Altman and paired t-test for each observer pair on the first repeat.

    Differences are ``first - second`` for pair ``(first, second)``.
    """
    vmap = table.volume_map(modality, repeat=repeat)
    subjects = sorted({s for s, _ in vmap}, key=_subject_key)
    if pairs is None:
        pairs = list(combinations(table.observers(modality), 2))
    out = []
    for a, b in pairs:
        vals = np.array(_pair_values(vmap, subjects, a, b))
        ba = bland_altman(vals, cfg)
        tt = paired_t_test(vals[:, 0], vals[:, 1], cfg)
        out.append(PairComparison(f"{modality}:MD{a}-MD{b}", a, b, ba, tt))
    return out


@dataclass(frozen=True)
class ReferenceComparison:
    name: str
    observer: int
    n: int
    mean: float
    sd: float
    bland_altman: BlandAltmanResult
    ttest: TTestResult


def compare_to_reference(table: MeasurementTable, modality: str, reference: Mapping,
                         cfg: StatsConfig = StatsConfig(), repeat: int = 1) -> list[ReferenceComparison]:
    """Per-observer paired t-test of first-repeat volumes against reference volumes."""
    vmap = table.volume_map(modality, repeat=repeat)
    out = []
    for obs in table.observers(modality):
        subjects = sorted({s for s, o in vmap if o == obs}, key=_subject_key)
        absent = [s for s in subjects if s not in reference]
        if absent:
            raise MissingData(f"no reference volume for subjects {absent}")
        x = np.array([vmap[(s, obs)] for s in subjects])
        y = np.array([reference[s] for s in subjects], dtype=np.float64)
        ba = bland_altman(np.column_stack([x, y]), cfg)
        tt = paired_t_test(x, y, cfg)
        out.append(ReferenceComparison(f"{modality}:MD{obs}-reference", obs, len(x),
                                       float(x.mean()), _sample_sd(x), ba, tt))
    return out


def _subject_key(s):
    return (0, int(s), "") if str(s).isdigit() else (1, 0, str(s))


def comparison_rows(results) -> list[list[str]]:
    rows = []
    for r in results:
        ba, tt = r.bland_altman, r.ttest
        rows.append([r.name, _fmt(ba.n), _fmt(ba.bias), _fmt(ba.sd), _fmt(ba.loa_low), _fmt(ba.loa_high),
                     _fmt(tt.t), _fmt(tt.df), _fmt(tt.p), _fmt(tt.significant)])
    return rows


def write_comparisons_csv(results, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_HEADER)
        w.writerows(comparison_rows(results))


def read_comparisons_csv(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: file not found")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != RESULT_HEADER:
        raise FormatError(f"{path} line 1: expected header {','.join(RESULT_HEADER)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(RESULT_HEADER):
            raise FormatError(f"{path} line {lineno}: expected {len(RESULT_HEADER)} fields, got {len(row)}")
        out.append(dict(zip(RESULT_HEADER, row)))
    return out


def write_reference_csv(reference: Mapping, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "volume_ml"])
        for s in sorted(reference, key=_subject_key):
            w.writerow([s, _fmt(reference[s])])


def read_reference_csv(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: file not found")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["subject", "volume_ml"]:
        raise FormatError(f"{path} line 1: expected header subject,volume_ml")
    out = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise FormatError(f"{path} line {lineno}: expected 2 fields")
        try:
            out[row[0]] = float(row[1])
        except ValueError:
            raise FormatError(f"{path} line {lineno}: field 'volume_ml' is not a number") from None
    return out


# --------------------------------------------------------------------------
# plotting

def _nice_ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step) * step
    ticks = []
    v = start
    while v <= hi + 1e-9 * step:
        ticks.append(round(v, 10))
        v += step
    return ticks


def bland_altman_svg(result: BlandAltmanResult, title: str = "", width: int = 480, height: int = 360) -> str:
    """Standalone SVG Bland-Altman plot: points, bias line and dashed limits."""
    ml, mr, mt, mb = 64, 20, 36, 52
    pw, ph = width - ml - mr, height - mt - mb
    xs, ys = result.means, result.differences
    x_lo, x_hi = float(xs.min()), float(xs.max())
    pad_x = 0.05 * (x_hi - x_lo) or 0.5
    x_lo, x_hi = x_lo - pad_x, x_hi + pad_x
    y_vals = np.concatenate([ys, [result.loa_low, result.loa_high, result.bias]])
    y_lo, y_hi = float(y_vals.min()), float(y_vals.max())
    pad_y = 0.1 * (y_hi - y_lo) or 0.5
    y_lo, y_hi = y_lo - pad_y, y_hi + pad_y

    def px(v):
        return ml + (v - x_lo) / (x_hi - x_lo) * pw

    def py(v):
        return mt + (y_hi - v) / (y_hi - y_lo) * ph

    f = "{:.2f}".format
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black" stroke-width="1"/>',
    ]
    if title:
        parts.append(f'<text x="{width / 2:.2f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>')
    for t in _nice_ticks(x_lo, x_hi):
        parts.append(f'<line x1="{f(px(t))}" y1="{mt + ph}" x2="{f(px(t))}" y2="{mt + ph + 5}" stroke="black"/>')
        parts.append(f'<text x="{f(px(t))}" y="{mt + ph + 18}" text-anchor="middle" font-family="sans-serif" font-size="11">{t:g}</text>')
    for t in _nice_ticks(y_lo, y_hi):
        parts.append(f'<line x1="{ml - 5}" y1="{f(py(t))}" x2="{ml}" y2="{f(py(t))}" stroke="black"/>')
        parts.append(f'<text x="{ml - 8}" y="{f(py(t) + 4)}" text-anchor="end" font-family="sans-serif" font-size="11">{t:g}</text>')
    parts.append(f'<line x1="{ml}" y1="{f(py(result.bias))}" x2="{ml + pw}" y2="{f(py(result.bias))}" stroke="#1f4e9c" stroke-width="1.5"/>')
    for lim in (result.loa_low, result.loa_high):
        parts.append(f'<line x1="{ml}" y1="{f(py(lim))}" x2="{ml + pw}" y2="{f(py(lim))}" stroke="#b22222" stroke-width="1.2" stroke-dasharray="6,4"/>')
    labels = (("mean", result.bias), ("+1.96 SD", result.loa_high), ("-1.96 SD", result.loa_low))
    for name, v in labels:
        parts.append(f'<text x="{ml + pw - 4}" y="{f(py(v) - 4)}" text-anchor="end" font-family="sans-serif" font-size="10">{name} {v:.2f}</text>')
    for x, y in zip(xs, ys):
        parts.append(f'<circle cx="{f(px(x))}" cy="{f(py(y))}" r="3" fill="#333333"/>')
    parts.append(f'<text x="{ml + pw / 2:.2f}" y="{height - 12}" text-anchor="middle" font-family="sans-serif" font-size="12">Mean of both volumes (ml)</text>')
    parts.append(f'<text x="16" y="{mt + ph / 2:.2f}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {mt + ph / 2:.2f})">Difference (ml)</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
