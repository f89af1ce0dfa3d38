"""Datasets: synthetic generators, CSV ingestion, splits.

Two benchmark data sources ship with the package:

* a 4-D Gaussian-mixture sampler for the portfolio task (first two
  coordinates are the input x, last two the asset returns y);
* a synthetic day-ahead electricity-market generator standing in for the
  real price history the battery task was designed around (the CSV loader
  accepts a real dump with the same schema).
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

Array = np.ndarray

TRAIN, CAL, TEST = 0, 1, 2

# feature layout of the battery task: 100 schema columns plus a constant
# bias feature appended at the end (input dimension 101)
BATTERY_FEATURE_DIM = 101
_BATTERY_FEATURE_BLOCKS = ("logprice_prev", "load_fcst", "temp_prev", "temp_fcst")
_BATTERY_SCALARS = ("is_weekend", "is_holiday", "sin_doy", "cos_doy")


def battery_csv_header() -> list[str]:
    cols = ["date"]
    cols += [f"price_h{h:02d}" for h in range(24)]
    for block in _BATTERY_FEATURE_BLOCKS:
        cols += [f"{block}_h{h:02d}" for h in range(24)]
    cols += list(_BATTERY_SCALARS)
    return cols


PORTFOLIO_HEADER = ["x1", "x2", "y1", "y2"]


@dataclass
class Dataset:
    X: Array
    Y: Array
    timestamps: Array | None = None
    assignment: Array | None = None  # TRAIN / CAL / TEST per row

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        if self.X.shape[0] != self.Y.shape[0]:
            raise ValueError("X and Y row counts differ")
        if self.timestamps is not None:
            self.timestamps = np.asarray(self.timestamps)
            if self.timestamps.shape[0] != len(self):
                raise ValueError("timestamp count differs from rows")

    def __len__(self) -> int:
        return self.X.shape[0]

    def subset(self, mask: Array) -> "Dataset":
        ts = None if self.timestamps is None else self.timestamps[mask]
        return Dataset(self.X[mask], self.Y[mask], ts)

    def part(self, which: int) -> "Dataset":
        if self.assignment is None:
            raise ValueError("dataset has no split assignment; call split() first")
        return self.subset(self.assignment == which)

    @property
    def train(self) -> "Dataset":
        return self.part(TRAIN)

    @property
    def cal(self) -> "Dataset":
        return self.part(CAL)

    @property
    def test(self) -> "Dataset":
        return self.part(TEST)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.Y).tobytes())
        return h.hexdigest()


@dataclass
class GmmSpec:
    """Three-component 4-D Gaussian mixture; (x, y) are its first/last halves.

    Component weights derive from (phi, alpha): p_a = phi,
    p_b = (1 - phi) / (alpha + 1), p_c = alpha (1 - phi) / (alpha + 1); the
    covariances are Sigma_a scaled by 1, alpha, 1/alpha.
    """

    phi: float = 0.7
    alpha: float = 0.9
    sigma_a: Array = field(default_factory=lambda: np.array([
        [1.0, 0.0, 0.37, 0.0],
        [0.0, 1.5, 0.0, 0.0],
        [0.37, 0.0, 2.0, 0.73],
        [0.0, 0.0, 0.73, 3.0],
    ]))
    # component means are configurable; these defaults are not normative
    mu_a: Array = field(default_factory=lambda: np.zeros(4))
    mu_b: Array = field(default_factory=lambda: np.array([1.0, 1.0, 1.0, -1.0]))
    mu_c: Array = field(default_factory=lambda: np.array([-1.0, 1.0, -1.0, 1.0]))

    def __post_init__(self):
        if not 0.0 <= self.phi <= 1.0 or not 0.0 < self.alpha <= 1.0:
            raise ValueError("need phi in [0, 1] and alpha in (0, 1]")
        self.sigma_a = np.asarray(self.sigma_a, dtype=float)
        for sig in self.covariances:
            np.linalg.cholesky(sig)  # PD or error at construction

    @property
    def weights(self) -> Array:
        pa = self.phi
        pb = (1.0 - self.phi) / (self.alpha + 1.0)
        pc = self.alpha * (1.0 - self.phi) / (self.alpha + 1.0)
        return np.array([pa, pb, pc])

    @property
    def covariances(self) -> list[Array]:
        return [self.sigma_a, self.alpha * self.sigma_a, self.sigma_a / self.alpha]

    @property
    def means(self) -> list[Array]:
        return [np.asarray(self.mu_a, float), np.asarray(self.mu_b, float),
                np.asarray(self.mu_c, float)]


def sample_gmm(spec: GmmSpec, n: int, seed=0) -> Dataset:
    """Draw n joint samples; x = first 2 dims, y = last 2. Deterministic per seed."""
    rng = np.random.default_rng(seed)
    weights = spec.weights
    chols = [np.linalg.cholesky(S) for S in spec.covariances]
    means = spec.means
    comps = rng.choice(3, size=n, p=weights / weights.sum())
    Z = rng.standard_normal(size=(n, 4))
    out = np.empty((n, 4))
    for k in range(3):
        m = comps == k
        out[m] = means[k] + Z[m] @ chols[k].T
    return Dataset(out[:, :2], out[:, 2:])


# US fixed-date holidays, good enough for a synthetic surrogate
_HOLIDAYS = ((1, 1), (7, 4), (11, 11), (12, 24), (12, 25), (12, 31))


def synth_battery_data(n_days: int = 500, seed=0, spike_prob: float = 0.015,
                       start_doy: int = 0) -> Dataset:
    """Synthetic day-ahead market days: diurnal price shape, weekday/weekend
    regimes, temperature covariates, and heavy-tailed spike days.

    Feature vector (101): previous day's log prices (24), day's load
    forecast (24), previous day's temperature (24), day's temperature
    forecast (24), is_weekend, is_holiday, sin/cos of day-of-year, constant 1.
    """
    rng = np.random.default_rng(seed)
    hours = np.arange(24)
    diurnal = (1.0
               + 0.35 * np.exp(-0.5 * ((hours - 8.5) / 2.0) ** 2)
               + 0.55 * np.exp(-0.5 * ((hours - 18.5) / 2.5) ** 2))
    total = n_days + 1  # one warm-up day supplies the lagged features
    prices = np.empty((total, 24))
    temps = np.empty((total, 24))
    loads = np.empty((total, 24))
    level = 35.0
    for d in range(total):
        doy = (start_doy + d) % 365
        season = 1.0 + 0.25 * np.cos(2 * np.pi * (doy - 200) / 365.0)
        weekend = (d % 7) in (5, 6)
        base_temp = 12.0 + 14.0 * np.sin(2 * np.pi * (doy - 100) / 365.0)
        temps[d] = (base_temp + 4.0 * np.sin(2 * np.pi * (hours - 14) / 24.0)
                    + rng.normal(0, 1.2, size=24))
        loads[d] = (1.0 + 0.3 * diurnal / diurnal.max()) * (
            0.9 + 0.1 * np.abs(temps[d] - 15.0) / 10.0)
        loads[d] *= 0.93 if weekend else 1.0
        loads[d] += rng.normal(0, 0.02, size=24)
        level = 0.9 * level + 0.1 * 35.0 + rng.normal(0, 1.5)
        day_price = level * season * diurnal * (0.88 if weekend else 1.0)
        day_price = day_price + rng.normal(0, 2.0, size=24)
        if rng.uniform() < spike_prob:  # heavy-tailed spike day
            peak = rng.integers(14, 21)
            width = rng.integers(2, 5)
            mag = rng.lognormal(mean=6.3, sigma=0.4)
            lo_h, hi_h = max(0, peak - width), min(24, peak + width)
            day_price[lo_h:hi_h] += mag
        prices[d] = np.maximum(day_price, 0.5)

    X = np.empty((n_days, BATTERY_FEATURE_DIM))
    Y = prices[1:]
    for i in range(n_days):
        d = i + 1
        doy = (start_doy + d) % 365
        weekend = 1.0 if (d % 7) in (5, 6) else 0.0
        month_day = _doy_to_month_day(doy)
        holiday = 1.0 if month_day in _HOLIDAYS else 0.0
        X[i] = np.concatenate([
            np.log(np.maximum(prices[d - 1], 1e-2)),
            loads[d],
            temps[d - 1],
            temps[d],
            [weekend, holiday,
             np.sin(2 * np.pi * doy / 365.0), np.cos(2 * np.pi * doy / 365.0),
             1.0],
        ])
    return Dataset(X, Y, timestamps=np.arange(n_days))


_MONTH_LENGTHS = (31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31)


def _doy_to_month_day(doy: int) -> tuple[int, int]:
    month, day = 1, doy + 1
    for length in _MONTH_LENGTHS:
        if day <= length:
            return month, day
        day -= length
        month += 1
    return 12, 31


def battery_features_from_row(row: Array) -> tuple[Array, Array]:
    """(x, y) from one 124-value CSV data row (the date column excluded)."""
    row = np.asarray(row, dtype=float)
    y = row[:24]
    x = np.concatenate([row[24:], [1.0]])
    return x, y


# ---------------------------------------------------------------------------
# CSV input/output


class CsvSchemaError(ValueError):
    pass


def save_csv(ds: Dataset, path, kind: str) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        if kind == "portfolio":
            w.writerow(PORTFOLIO_HEADER)
            for x, y in zip(ds.X, ds.Y):
                w.writerow([repr(float(v)) for v in (*x, *y)])
        elif kind == "battery":
            w.writerow(battery_csv_header())
            ts = ds.timestamps if ds.timestamps is not None else np.arange(len(ds))
            for i, (x, y) in enumerate(zip(ds.X, ds.Y)):
                # drop the trailing constant feature; it is implicit in the schema
                w.writerow([int(ts[i])] + [repr(float(v)) for v in (*y, *x[:-1])])
        else:
            raise ValueError(f"unknown dataset kind {kind!r}")


def load_csv(path, kind: str) -> Dataset:
    """Parse a dataset dump; rejects NaN rows with a count, errors name lines."""
    path = Path(path)
    expected = PORTFOLIO_HEADER if kind == "portfolio" else battery_csv_header()
    with path.open("r", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvSchemaError(f"{path}: empty file") from None
        if header != expected:
            missing = [c for c in expected if c not in header]
            extra = [c for c in header if c not in expected]
            raise CsvSchemaError(
                f"{path}: header mismatch; missing {missing or 'none'}, "
                f"unexpected {extra or 'none'}"
            )
        rows = []
        timestamps = []
        dropped = 0
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise CsvSchemaError(
                    f"{path}:{lineno}: expected {len(expected)} fields, got {len(row)}"
                )
            try:
                if kind == "battery":
                    timestamps.append(float(row[0]))
                    vals = np.array(row[1:], dtype=float)
                else:
                    vals = np.array(row, dtype=float)
            except ValueError as exc:
                raise CsvSchemaError(f"{path}:{lineno}: malformed value ({exc})") from None
            if not np.all(np.isfinite(vals)):
                dropped += 1
                continue
            rows.append(vals)
    if dropped:
        import logging

        logging.getLogger("cro.data").warning(
            "%s: dropped %d rows containing NaN/Inf", path, dropped)
    if not rows:
        raise CsvSchemaError(f"{path}: no valid data rows")
    M = np.asarray(rows)
    if kind == "portfolio":
        return Dataset(M[:, :2], M[:, 2:])
    X = np.hstack([M[:, 24:], np.ones((M.shape[0], 1))])
    return Dataset(X, M[:, :24], timestamps=np.asarray(timestamps))


def split(ds: Dataset, mode: str = "random",
          fractions: tuple[float, float, float] = (0.64, 0.16, 0.2),
          seed=0) -> Dataset:
    """Assign rows to train/cal/test.

    mode="random" keeps everything exchangeable; mode="temporal" holds out
    the chronologically last fraction as the test set (distribution shift)
    and splits the remainder randomly into train/calibration.
    """
    f_train, f_cal, f_test = fractions
    if min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must be nonnegative and sum to 1")
    n = len(ds)
    n_test = round(n * f_test)
    n_train = round(n * f_train)
    rng = np.random.default_rng(seed)
    assignment = np.empty(n, dtype=int)
    if mode == "random":
        order = rng.permutation(n)
    elif mode == "temporal":
        if ds.timestamps is None:
            raise ValueError("temporal split requires timestamps")
        chron = np.argsort(ds.timestamps, kind="stable")
        test_idx = chron[n - n_test:]
        rest = chron[: n - n_test]
        order = np.concatenate([rng.permutation(rest), test_idx])
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    assignment[order[:n_train]] = TRAIN
    assignment[order[n_train: n - n_test]] = CAL
    assignment[order[n - n_test:]] = TEST
    return Dataset(ds.X, ds.Y, ds.timestamps, assignment)
