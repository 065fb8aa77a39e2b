"""Uncertainty-scaled position sizing and a delta-adjusted daily backtest.

Sizing follows ``alpha = mu / sigma**2`` rescaled so that a reference
``(mu*, sigma*)`` maps to one unit. A prediction whose absolute size is
below the threshold never trades; the position from the day's most recent
trade is held. Positions start flat each day and are flattened (with cost)
after the day's last event.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from enum import Enum
from fractions import Fraction

import numpy as np

DEFAULT_THRESHOLD = 0.1
DEFAULT_COST_ELEMENT = 0.005
DEFAULT_RESCALE_REF = (0.3, 0.1)


class SizingError(ValueError):
    """Non-positive uncertainty fed to an uncertainty-scaled strategy."""


class StrategyKind(str, Enum):
    BASE = "Base"
    RLSD_VOL = "RlsdVol"
    ALEA = "Alea"
    AL_EP = "AlEp"


@dataclass(frozen=True)
class StrategySpec:
    kind: StrategyKind = StrategyKind.AL_EP
    threshold: float = DEFAULT_THRESHOLD
    rescale_ref: tuple[float, float] = DEFAULT_RESCALE_REF
    clip: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", StrategyKind(self.kind))
        object.__setattr__(self, "rescale_ref", tuple(float(v) for v in self.rescale_ref))
        if self.threshold < 0:
            raise ValueError("threshold must be non-negative")
        mu_ref, sigma_ref = self.rescale_ref
        if not sigma_ref > 0 or mu_ref == 0:
            raise ValueError("rescale_ref needs sigma* > 0 and mu* != 0")
        if self.clip is not None and not self.clip > 0:
            raise ValueError("clip must be positive")

    @property
    def scale(self) -> float:
        """Multiplier ``k`` with ``k * mu* / sigma*^2 == 1``."""
        mu_ref, sigma_ref = self.rescale_ref
        return sigma_ref**2 / mu_ref


def size_position(mu, sigma, spec: StrategySpec):
    """Target position for predicted change ``mu`` (bps) and uncertainty ``sigma`` (bps).

    Returns 0 wherever ``|mu|`` is below the threshold. Broadcasts over arrays.
    """
    mu = np.asarray(mu, dtype=np.float64)
    gate = np.abs(mu) >= spec.threshold
    if spec.kind is StrategyKind.BASE:
        alpha = np.where(gate, np.sign(mu), 0.0)
    else:
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), mu.shape)
        if np.any(gate & ~(sigma > 0)):
            raise SizingError(f"{spec.kind.value} sizing needs sigma > 0 wherever |mu| >= threshold")
        with np.errstate(divide="ignore", invalid="ignore"):
            alpha = np.where(gate, spec.scale * mu / sigma**2, 0.0)
    if spec.clip is not None:
        alpha = np.clip(alpha, -spec.clip, spec.clip)
    return float(alpha) if alpha.ndim == 0 else alpha


# ---------------------------------------------------------------------------
# prediction events


@dataclass
class PredictionSet:
    """Per-anchor predictions in bps, time-ordered; leading axis indexes events."""

    anchor_times: np.ndarray  # (n,)
    days: np.ndarray  # (n,) yyyymmdd
    mu_change: np.ndarray  # (n, C) predicted change vs last window price
    sigma_A: np.ndarray  # (n, C, C) bps^2
    sigma_E: np.ndarray  # (n, C, C) bps^2
    window_vol: np.ndarray  # (n, C)
    realized_change: np.ndarray  # (n, C); NaN marks a missing realized price

    def __len__(self):
        return len(self.anchor_times)

    @property
    def contracts(self) -> int:
        return self.mu_change.shape[1]

    @property
    def months(self) -> np.ndarray:
        return self.days // 100

    def subset(self, mask) -> "PredictionSet":
        return PredictionSet(**{f.name: getattr(self, f.name)[mask] for f in fields(self)})

    @classmethod
    def concatenate(cls, parts) -> "PredictionSet":
        parts = list(parts)
        return cls(**{f.name: np.concatenate([getattr(p, f.name) for p in parts]) for f in fields(cls)})

    def sigma_for(self, kind: StrategyKind) -> np.ndarray:
        kind = StrategyKind(kind)
        if kind is StrategyKind.BASE:
            return np.full(self.mu_change.shape, np.nan)
        if kind is StrategyKind.RLSD_VOL:
            return self.window_vol
        cov = self.sigma_A if kind is StrategyKind.ALEA else self.sigma_A + self.sigma_E
        return np.sqrt(np.clip(np.diagonal(cov, axis1=1, axis2=2), 0.0, None))

    def save(self, path) -> None:
        np.savez(path, **{f.name: getattr(self, f.name) for f in fields(self)})

    @classmethod
    def load(cls, path) -> "PredictionSet":
        with np.load(path) as z:
            return cls(**{f.name: z[f.name] for f in fields(cls)})


# ---------------------------------------------------------------------------
# ledger


@dataclass
class TradeLedger:
    """Event x contract records plus one end-of-day flatten per day and contract."""

    timestamps: np.ndarray  # (n,)
    days: np.ndarray  # (n,)
    predicted: np.ndarray  # (n, C)
    sigma: np.ndarray  # (n, C)
    alpha: np.ndarray  # (n, C) sized target, 0 below threshold
    traded: np.ndarray  # (n, C) bool, threshold passed and realized price present
    position: np.ndarray  # (n, C) held over the event's interval
    dpos: np.ndarray  # (n, C)
    realized: np.ndarray  # (n, C)
    gross: np.ndarray  # (n, C)
    cost: np.ndarray  # (n, C)
    day_labels: np.ndarray  # (D,)
    flatten_volume: np.ndarray  # (D, C)
    flatten_cost: np.ndarray  # (D, C)
    cost_element: float
    cost_multiple: float
    skipped: int = 0

    @property
    def total_volume(self) -> float:
        return float(np.abs(self.dpos).sum() + self.flatten_volume.sum())

    @property
    def total_cost(self) -> float:
        return float(self.cost.sum() + self.flatten_cost.sum())

    @property
    def gross_pnl(self) -> float:
        return float(self.gross.sum())

    @property
    def net_pnl(self) -> float:
        return self.gross_pnl - self.total_cost

    def daily_returns(self, net: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """``(day_labels, bps returns)``; net of costs unless ``net=False``."""
        pos = np.searchsorted(self.day_labels, self.days)
        pnl = self.gross - self.cost if net else self.gross
        out = np.zeros(len(self.day_labels))
        np.add.at(out, pos, pnl.sum(axis=1))
        if net:
            out -= self.flatten_cost.sum(axis=1)
        return self.day_labels.copy(), out

    def daily_volume(self) -> np.ndarray:
        pos = np.searchsorted(self.day_labels, self.days)
        out = np.zeros(len(self.day_labels))
        np.add.at(out, pos, np.abs(self.dpos).sum(axis=1))
        return out + self.flatten_volume.sum(axis=1)

    def to_rows(self):
        """Long-form rows, one per traded or held (event, contract) plus flatten rows."""
        n, C = self.position.shape
        for i in range(n):
            for c in range(C):
                if self.dpos[i, c] == 0.0 and self.position[i, c] == 0.0:
                    continue
                yield (int(self.timestamps[i]), int(self.days[i]), c, "event",
                       self.predicted[i, c], self.sigma[i, c], self.alpha[i, c], self.dpos[i, c],
                       self.position[i, c], self.realized[i, c], self.gross[i, c], self.cost[i, c])
            if i == n - 1 or self.days[i + 1] != self.days[i]:
                d = int(np.searchsorted(self.day_labels, self.days[i]))
                for c in range(C):
                    if self.flatten_volume[d, c]:
                        yield (int(self.timestamps[i]), int(self.days[i]), c, "flatten",
                               math.nan, math.nan, 0.0, -self.position[i, c], 0.0, math.nan, 0.0,
                               self.flatten_cost[d, c])

    ROW_HEADER = ("timestamp", "day", "contract", "kind", "predicted_bps", "sigma_bps", "alpha",
                  "dpos", "position", "realized_bps", "gross_pnl", "cost")


def run_backtest(preds: PredictionSet, spec: StrategySpec, cost_element: float = DEFAULT_COST_ELEMENT,
                 cost_multiple: float = 0.0, sigma: np.ndarray | None = None) -> TradeLedger:
    """Simulate per-contract delta-adjusted trading over time-ordered events.

    At each event a contract trades to its sized target only when the
    predicted change passes the threshold and the realized move is known;
    otherwise it holds. The position set at an event earns that event's
    realized move.
    """
    if cost_multiple < 0 or cost_element < 0:
        raise ValueError("costs must be non-negative")
    if len(preds) and np.any(np.diff(preds.anchor_times) < 0):
        raise ValueError("events must be time-ordered")
    mu = preds.mu_change
    sig = preds.sigma_for(spec.kind) if sigma is None else np.asarray(sigma, dtype=np.float64)
    realized = preds.realized_change
    missing = ~np.isfinite(realized)
    skipped = int(missing.any(axis=1).sum())

    gate = (np.abs(mu) >= spec.threshold) & ~missing
    safe_sig = np.where(gate, sig, 1.0) if spec.kind is not StrategyKind.BASE else sig
    alpha = size_position(np.where(gate, mu, 0.0), safe_sig, spec)
    alpha = np.where(gate, alpha, 0.0)
    n, C = mu.shape
    day_labels = np.unique(preds.days)
    position = np.zeros((n, C))
    dpos = np.zeros((n, C))
    flatten = np.zeros((len(day_labels), C))
    bounds = np.searchsorted(preds.days, day_labels, side="left")
    ends = np.searchsorted(preds.days, day_labels, side="right")
    ar = np.arange(n)[:, None]
    for d, (lo, hi) in enumerate(zip(bounds, ends)):
        # index of the most recent trading event at or before each event
        last = np.where(gate[lo:hi], ar[lo:hi], -1)
        last = np.maximum.accumulate(last, axis=0)
        pos = np.where(last >= 0, alpha[np.clip(last, 0, None), np.arange(C)], 0.0)
        position[lo:hi] = pos
        prev = np.vstack([np.zeros((1, C)), pos[:-1]])
        dpos[lo:hi] = pos - prev
        flatten[d] = np.abs(pos[-1])
    gross = position * np.where(missing, 0.0, realized)
    unit = cost_element * cost_multiple
    return TradeLedger(
        timestamps=preds.anchor_times.copy(), days=preds.days.copy(), predicted=mu.copy(),
        sigma=np.asarray(sig, dtype=np.float64).copy(), alpha=alpha, traded=gate, position=position,
        dpos=dpos, realized=realized.copy(), gross=gross, cost=unit * np.abs(dpos),
        day_labels=day_labels, flatten_volume=flatten, flatten_cost=unit * flatten,
        cost_element=float(cost_element), cost_multiple=float(cost_multiple), skipped=skipped,
    )


# ---------------------------------------------------------------------------
# metrics


def sharpe(returns) -> float:
    """Mean over sample standard deviation of daily returns; NaN when undefined."""
    r = np.asarray(returns, dtype=np.float64)
    if r.size < 2:
        return math.nan
    sd = r.std(ddof=1)
    if not sd > 0:
        return math.nan
    return float(r.mean() / sd)


def sharpe_by_month(ledger: TradeLedger) -> dict[int, float]:
    days, rets = ledger.daily_returns()
    months = days // 100
    return {int(m): sharpe(rets[months == m]) for m in np.unique(months)}


def cumulative_sharpe(ledger: TradeLedger) -> float:
    return sharpe(ledger.daily_returns()[1])


def profit_over_volume(ledger: TradeLedger) -> float:
    vol = ledger.total_volume
    return ledger.net_pnl / vol if vol > 0 else math.nan


def portfolio_sharpe(alpha, mu, sigma) -> float:
    """``sum(a mu) / sqrt(sum(a^2 sigma^2))`` for independent opportunities."""
    alpha, mu, sigma = (np.asarray(v, dtype=np.float64) for v in (alpha, mu, sigma))
    return float((alpha * mu).sum() / math.sqrt((alpha**2 * sigma**2).sum()))


def _sharpe_squared_exact(alpha, mu, sigma) -> tuple[Fraction, int]:
    """Exact ``S^2`` of float inputs and the sign of ``S``."""
    num = sum((Fraction(a) * Fraction(m) for a, m in zip(alpha, mu)), Fraction(0))
    den = sum((Fraction(a) ** 2 * Fraction(s) ** 2 for a, s in zip(alpha, sigma)), Fraction(0))
    return num * num / den, (num > 0) - (num < 0)


def alpha_optimality_check(mus, sigmas, eps: float = 1e-3) -> bool:
    """True iff ``alpha = mu / sigma^2`` beats every single-coordinate ``+-eps`` perturbation.

    Sharpe ratios are compared in exact rational arithmetic: when one size
    dominates, nudging it is nearly a rescaling and the drop in ``S`` is
    below double precision. With one asset the Sharpe ratio does not depend
    on a positive size, so the check passes by convention.
    """
    mus = np.asarray(mus, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if np.any(mus <= 0) or np.any(sigmas <= 0):
        raise ValueError("all mu and sigma must be strictly positive")
    if mus.size == 1:
        return True
    best = [float(v) for v in mus / sigmas**2]
    mu_l, sig_l = mus.tolist(), sigmas.tolist()
    s2_best, _ = _sharpe_squared_exact(best, mu_l, sig_l)
    step = Fraction(eps)
    for i in range(mus.size):
        for sgn in (1, -1):
            a = [Fraction(v) for v in best]
            a[i] += sgn * step
            s2, sign = _sharpe_squared_exact(a, mu_l, sig_l)
            if sign > 0 and not s2_best > s2:
                return False
    return True


# ---------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class CalibrationRow:
    month: int
    side: str  # "long" | "short"
    median_ratio: float  # median |mu| / sigma over the side's trades
    sharpe: float  # realized side Sharpe, negated for the short side
    n_trades: int


def side_daily_returns(ledger: TradeLedger, side: int) -> tuple[np.ndarray, np.ndarray]:
    """Daily net bps returns of the long (+1) or short (-1) book.

    Interval pnl goes to the side of the held position; a trade's cost goes
    to the side of the position it establishes, or of the one it closes
    when the result is flat.
    """
    pos_side = np.sign(ledger.position)
    prev = np.zeros_like(ledger.position)
    same_day = np.r_[False, ledger.days[1:] == ledger.days[:-1]]
    prev[1:] = np.where(same_day[1:, None], ledger.position[:-1], 0.0)
    cost_side = np.where(pos_side != 0, pos_side, np.sign(prev))
    pnl = np.where(pos_side == side, ledger.gross, 0.0) - np.where(cost_side == side, ledger.cost, 0.0)
    didx = np.searchsorted(ledger.day_labels, ledger.days)
    out = np.zeros(len(ledger.day_labels))
    np.add.at(out, didx, pnl.sum(axis=1))
    # flatten cost belongs to the side being closed: the day's final position
    last_idx = np.searchsorted(ledger.days, ledger.day_labels, side="right") - 1
    final_side = np.sign(ledger.position[last_idx])
    out -= np.where(final_side == side, ledger.flatten_cost, 0.0).sum(axis=1)
    return ledger.day_labels.copy(), out


def calibration_report(ledger: TradeLedger) -> list[CalibrationRow]:
    """Per month and side: median predicted reward-risk of trades vs realized side Sharpe."""
    rows = []
    months = ledger.days // 100
    trades = ledger.traded & (ledger.dpos != 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.abs(ledger.predicted) / ledger.sigma
    for side, name in ((1, "long"), (-1, "short")):
        days, rets = side_daily_returns(ledger, side)
        for m in np.unique(months):
            sel = trades & (np.sign(ledger.alpha) == side) & (months == m)[:, None]
            if not sel.any():
                continue
            s = sharpe(rets[days // 100 == m])
            rows.append(CalibrationRow(int(m), name, float(np.median(ratio[sel])),
                                       -s if side < 0 else s, int(sel.sum())))
    rows.sort(key=lambda r: (r.side, r.month))
    return rows
