"""Curve alignment, event-time downsampling and normalized rolling windows."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping

import numpy as np

from .market_data import NS_PER_DAY, NS_PER_SECOND, MicropriceSeries

logger = logging.getLogger(__name__)

DEFAULT_CUTOFF = 0.1
DEFAULT_WINDOW = 100


class DegenerateWindowError(ValueError):
    """Window has zero pooled standard deviation."""


def day_label(timestamp_ns: int, offset_hours: float = 0.0) -> int:
    """Trading-day label ``yyyymmdd`` of a UTC nanosecond timestamp."""
    secs = (int(timestamp_ns) + int(offset_hours * 3600 * NS_PER_SECOND)) // NS_PER_SECOND
    d = datetime.fromtimestamp(secs, tz=timezone.utc)
    return d.year * 10000 + d.month * 100 + d.day


def _day_labels(ts: np.ndarray, offset_hours: float) -> np.ndarray:
    shifted = ts + np.int64(int(offset_hours * 3600 * NS_PER_SECOND))
    days = (shifted // NS_PER_DAY).astype("datetime64[D]")
    y = days.astype("datetime64[Y]").astype(np.int64) + 1970
    m = days.astype("datetime64[M]").astype(np.int64) % 12 + 1
    dom = (days - days.astype("datetime64[M]")).astype(np.int64) + 1
    return (y * 10000 + m * 100 + dom).astype(np.int64)


@dataclass
class CurveSeries:
    timestamps: np.ndarray  # (n,) int64
    prices: np.ndarray  # (n, C) bps
    days: np.ndarray  # (n,) yyyymmdd
    warnings: list[str] = field(default_factory=list)

    @property
    def contracts(self) -> int:
        return self.prices.shape[1]

    @property
    def day_boundaries(self) -> np.ndarray:
        if len(self.days) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.flatnonzero(np.r_[True, self.days[1:] != self.days[:-1]])

    def __len__(self):
        return len(self.timestamps)

    def to_csv(self, path) -> None:
        C = self.contracts
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(["timestamp", "day"] + [f"c{c}" for c in range(C)]) + "\n")
            for t, d, row in zip(self.timestamps, self.days, self.prices):
                fh.write(f"{int(t)},{int(d)}," + ",".join(repr(float(p)) for p in row) + "\n")

    @classmethod
    def from_csv(cls, path) -> "CurveSeries":
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            rows = [line.strip().split(",") for line in fh if line.strip()]
        C = len(header) - 2
        if not rows:
            return cls(np.zeros(0, np.int64), np.zeros((0, C)), np.zeros(0, np.int64))
        return cls(
            np.array([int(r[0]) for r in rows], dtype=np.int64),
            np.array([[float(x) for x in r[2:]] for r in rows], dtype=np.float64),
            np.array([int(r[1]) for r in rows], dtype=np.int64),
        )


def align_and_downsample(
    series: Mapping[int, MicropriceSeries],
    cutoff: float = DEFAULT_CUTOFF,
    day_offset_hours: float = 0.0,
) -> CurveSeries:
    """Common-event-time curve series from per-contract microprice series.

    Each day starts at the first instant every contract has a microprice.
    The next observation is the earliest later time at which some contract
    has moved at least ``cutoff`` from the previous observation; all
    contracts are then recorded at their latest value at or before that
    time. Quotes sharing a timestamp are applied together before testing.
    """
    if not cutoff > 0:
        raise ValueError(f"cutoff must be positive, got {cutoff}")
    ids = sorted(series)
    C = len(ids)
    if C == 0:
        raise ValueError("no contracts")
    warnings: list[str] = []

    per_contract_days = {}
    all_days = set()
    for j, c in enumerate(ids):
        labels = _day_labels(series[c].timestamps, day_offset_hours)
        per_contract_days[j] = labels
        all_days.update(int(x) for x in np.unique(labels))

    out_t, out_p, out_d = [], [], []
    for day in sorted(all_days):
        ts_parts, col_parts, px_parts = [], [], []
        quiet = []
        for j, c in enumerate(ids):
            mask = per_contract_days[j] == day
            if not mask.any():
                quiet.append(c)
                continue
            ts_parts.append(series[c].timestamps[mask])
            px_parts.append(series[c].prices[mask])
            col_parts.append(np.full(int(mask.sum()), j))
        if quiet:
            msg = f"day {day}: contracts {quiet} have no quotes, day skipped"
            logger.warning(msg)
            warnings.append(msg)
            continue
        ts = np.concatenate(ts_parts)
        cols = np.concatenate(col_parts)
        px = np.concatenate(px_parts)
        order = np.lexsort((cols, ts))
        ts, cols, px = ts[order], cols[order], px[order]
        t_day, p_day = _downsample_day(ts.tolist(), cols.tolist(), px.tolist(), C, cutoff)
        out_t.extend(t_day)
        out_p.extend(p_day)
        out_d.extend([day] * len(t_day))

    return CurveSeries(
        np.array(out_t, dtype=np.int64),
        np.array(out_p, dtype=np.float64).reshape(len(out_t), C),
        np.array(out_d, dtype=np.int64),
        warnings,
    )


def _downsample_day(ts, cols, px, C, cutoff):
    latest = [None] * C
    have = 0
    ref = None
    times, rows = [], []
    n = len(ts)
    i = 0
    while i < n:
        t = ts[i]
        while i < n and ts[i] == t:
            if latest[cols[i]] is None:
                have += 1
            latest[cols[i]] = px[i]
            i += 1
        if have < C:
            continue
        if ref is None or any(abs(latest[c] - ref[c]) >= cutoff for c in range(C)):
            ref = list(latest)
            times.append(t)
            rows.append(ref)
    return times, rows


# ---------------------------------------------------------------------------
# windows


@dataclass
class RawWindows:
    windows: np.ndarray  # (n, L, C)
    targets: np.ndarray  # (n, C)
    anchor_times: np.ndarray
    target_times: np.ndarray
    days: np.ndarray

    def __len__(self):
        return len(self.targets)


def build_windows(curve: CurveSeries, window_len: int = DEFAULT_WINDOW) -> RawWindows:
    """Rolling windows of ``window_len`` entries with the next entry as target.

    Windows never straddle a day; a day with ``n`` entries gives
    ``max(0, n - window_len)`` samples.
    """
    if window_len < 1:
        raise ValueError("window_len must be positive")
    C = curve.contracts
    bounds = list(curve.day_boundaries) + [len(curve)]
    parts = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        n = hi - lo
        if n <= window_len:
            continue
        P = curve.prices[lo:hi]
        view = np.lib.stride_tricks.sliding_window_view(P, window_len, axis=0)[: n - window_len]
        parts.append(
            (
                np.ascontiguousarray(np.moveaxis(view, -1, 1)),
                P[window_len:],
                curve.timestamps[lo + window_len - 1 : hi - 1],
                curve.timestamps[lo + window_len : hi],
                curve.days[lo + window_len : hi],
            )
        )
    if not parts:
        return RawWindows(
            np.zeros((0, window_len, C)), np.zeros((0, C)),
            np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64),
        )
    return RawWindows(*(np.concatenate(cols) for cols in zip(*parts)))


@dataclass
class WindowSample:
    window: np.ndarray  # (L, C) normalized
    target: np.ndarray  # (C,) normalized
    shifts: np.ndarray  # (C,) bps
    scale: float  # bps
    anchor_time: int
    raw_target: np.ndarray  # (C,) bps

    @property
    def last_price(self) -> np.ndarray:
        return self.window[-1] * self.scale + self.shifts


def normalize_window(window, target, anchor_time: int = 0, ddof: int = 0) -> WindowSample:
    """Shift each contract by its window mean, scale everything by one pooled std."""
    window = np.asarray(window, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    shifts = window.mean(axis=0)
    centred = window - shifts
    scale = float(centred.std(ddof=ddof))
    if not scale > 0.0:
        raise DegenerateWindowError("degenerate-scale")
    return WindowSample(
        centred / scale, (target - shifts) / scale, shifts, scale, int(anchor_time), target.copy()
    )


def denormalize_prediction(mu_norm, sigma_norm, shifts, scale):
    """Map a normalized mean/covariance back to bps; works batched on leading axes."""
    mu_norm = np.asarray(mu_norm, dtype=np.float64)
    sigma_norm = np.asarray(sigma_norm, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    mu = mu_norm * scale[..., None] + shifts
    sigma = sigma_norm * (scale**2)[..., None, None]
    return mu, sigma


# ---------------------------------------------------------------------------
# dataset container


@dataclass
class WindowDataset:
    windows: np.ndarray  # (n, L, C) normalized
    targets: np.ndarray  # (n, C) normalized
    shifts: np.ndarray  # (n, C)
    scales: np.ndarray  # (n,)
    anchor_times: np.ndarray
    target_times: np.ndarray
    days: np.ndarray
    raw_targets: np.ndarray  # (n, C) bps
    last_prices: np.ndarray  # (n, C) bps, final raw window row
    window_vol: np.ndarray  # (n, C) bps, per-contract population std of the raw window
    skipped: int = 0

    def __len__(self):
        return len(self.targets)

    @property
    def months(self) -> np.ndarray:
        return self.days // 100

    @property
    def contracts(self) -> int:
        return self.windows.shape[2]

    @property
    def window_len(self) -> int:
        return self.windows.shape[1]

    @property
    def realized_change(self) -> np.ndarray:
        return self.raw_targets - self.last_prices

    def features(self) -> np.ndarray:
        return self.windows.reshape(len(self), -1)

    def subset(self, mask) -> "WindowDataset":
        kw = {f.name: getattr(self, f.name)[mask] for f in fields(self) if f.name != "skipped"}
        return WindowDataset(**kw, skipped=0)

    def sample(self, i: int) -> WindowSample:
        return WindowSample(
            self.windows[i], self.targets[i], self.shifts[i], float(self.scales[i]),
            int(self.anchor_times[i]), self.raw_targets[i],
        )

    @classmethod
    def concatenate(cls, parts) -> "WindowDataset":
        parts = list(parts)
        kw = {
            f.name: np.concatenate([getattr(p, f.name) for p in parts])
            for f in fields(cls) if f.name != "skipped"
        }
        return cls(**kw, skipped=sum(p.skipped for p in parts))

    @classmethod
    def empty(cls, window_len: int, contracts: int) -> "WindowDataset":
        L, C = window_len, contracts
        z = lambda *shape: np.zeros(shape)  # noqa: E731
        zi = lambda: np.zeros(0, dtype=np.int64)  # noqa: E731
        return cls(z(0, L, C), z(0, C), z(0, C), z(0), zi(), zi(), zi(), z(0, C), z(0, C), z(0, C))


def make_dataset(raw: RawWindows, ddof: int = 0) -> WindowDataset:
    """Normalize raw windows; degenerate windows are dropped and counted."""
    n, L, C = raw.windows.shape
    if n == 0:
        return WindowDataset.empty(L, C)
    shifts = raw.windows.mean(axis=1)
    centred = raw.windows - shifts[:, None, :]
    scales = centred.reshape(n, -1).std(axis=1, ddof=ddof)
    keep = scales > 0.0
    skipped = int((~keep).sum())
    if skipped:
        logger.info("dropped %d degenerate-scale windows", skipped)
    s = scales[keep]
    ds = WindowDataset(
        windows=centred[keep] / s[:, None, None],
        targets=(raw.targets[keep] - shifts[keep]) / s[:, None],
        shifts=shifts[keep],
        scales=s,
        anchor_times=raw.anchor_times[keep],
        target_times=raw.target_times[keep],
        days=raw.days[keep],
        raw_targets=raw.targets[keep],
        last_prices=raw.windows[keep, -1, :],
        window_vol=raw.windows[keep].std(axis=1),
        skipped=skipped,
    )
    return ds


_ARRAYS = [f.name for f in fields(WindowDataset) if f.name != "skipped"]


def save_dataset(ds: WindowDataset, directory, window_len: int | None = None,
                 contracts: int | None = None) -> list[str]:
    """Write one ``<yyyymm>.npz`` chunk per month plus ``index.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    months = sorted(int(m) for m in np.unique(ds.months))
    files = []
    for m in months:
        part = ds.subset(ds.months == m)
        name = f"{m}.npz"
        np.savez(directory / name, **{k: getattr(part, k) for k in _ARRAYS})
        files.append(name)
    index = {
        "format": "curvecast-windows",
        "version": 1,
        "window_len": int(window_len if window_len is not None else ds.window_len),
        "contracts": int(contracts if contracts is not None else ds.contracts),
        "skipped_degenerate": int(ds.skipped),
        "months": [{"month": m, "file": f, "samples": int((ds.months == m).sum())}
                   for m, f in zip(months, files)],
    }
    with open(directory / "index.json", "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return files


def load_dataset(directory) -> tuple[WindowDataset, dict]:
    directory = Path(directory)
    index_path = directory / "index.json"
    if not index_path.exists():
        raise FileNotFoundError(os.fspath(index_path))
    with open(index_path, encoding="utf-8") as fh:
        index = json.load(fh)
    parts = []
    for entry in index["months"]:
        with np.load(directory / entry["file"]) as z:
            parts.append(WindowDataset(**{k: z[k] for k in _ARRAYS}))
    if not parts:
        return WindowDataset.empty(index["window_len"], index["contracts"]), index
    ds = WindowDataset.concatenate(parts)
    ds.skipped = index.get("skipped_degenerate", 0)
    return ds, index
