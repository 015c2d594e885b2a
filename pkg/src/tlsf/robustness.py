"""Quantitative STL semantics: space robustness and the smooth "new" robustness.

Both evaluators work on contiguous sample ranges with numpy so that nested
temporal operators cost one pass per node.  Samples whose window clamps to
nothing carry NaN, which propagates upwards and is reported as an error only
if it reaches the requested sample.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .stl import (
    And,
    EmptyWindowError,
    Eventually,
    Formula,
    Globally,
    Not,
    Or,
    Pred,
    Signal,
    StlError,
    Until,
    predicates,
    top_clauses,
    window_offsets,
)

SEMANTICS = ("space", "new")


@dataclass(frozen=True)
class RobustnessConfig:
    semantics: str = "new"
    nu: float = 1.0

    def __post_init__(self):
        if self.semantics not in SEMANTICS:
            raise StlError(f"unknown semantics {self.semantics!r}; expected one of {SEMANTICS}")
        if not (self.nu > 0 and math.isfinite(self.nu)):
            raise StlError(f"nu must be positive, got {self.nu}")


@dataclass(frozen=True)
class RobustnessValue:
    value: float
    boundary: bool

    def __float__(self):
        return self.value


def _value(v: float) -> RobustnessValue:
    if not math.isfinite(v):
        raise EmptyWindowError("robustness undefined: a temporal window lies outside the signal")
    return RobustnessValue(float(v), v == 0.0)


# ------------------------------------------------------------ smooth conjunction


def new_robustness_conj(rho: Sequence[float], nu: float) -> float:
    """Smooth conjunction of robustness values.

    With m = min(rho) and r_i = (rho_i - m) / m:
      m < 0:  sum(m e^{r_i} e^{nu r_i}) / sum(e^{nu r_i})
      m > 0:  sum(rho_i e^{-nu r_i}) / sum(e^{-nu r_i})
      m = 0:  0
    """
    rho = np.asarray(rho, dtype=float).reshape(-1)
    if rho.size == 0:
        raise ValueError("conjunction of an empty set")
    if not np.all(np.isfinite(rho)):
        raise ValueError("conjunction inputs must be finite")
    if not (nu > 0):
        raise ValueError("nu must be positive")
    m = rho.min()
    if m == 0.0:
        return 0.0
    with np.errstate(over="ignore", invalid="ignore"):
        rt = (rho - m) / m
    rt = np.where(rho == m, 0.0, rt)
    if m < 0:
        ex = nu * rt
        w = np.exp(ex - ex.max())
        return float(np.sum(m * np.exp(rt) * w) / np.sum(w))
    ex = -nu * rt
    w = np.exp(ex - ex.max())
    return float(np.sum(rho * w) / np.sum(w))


def _conj_columns(values: np.ndarray, mask: np.ndarray, nu: float) -> np.ndarray:
    """Column-wise smooth conjunction over the rows selected by ``mask``.

    A column with no selected rows, or with NaN among its selected rows,
    yields NaN.
    """
    big = np.where(mask, values, np.inf)
    m = big.min(axis=0)
    bad = ~mask.any(axis=0) | np.any(mask & np.isnan(values), axis=0)
    out = np.zeros(values.shape[1])
    with np.errstate(all="ignore"):
        rt = (values - m) / m
        rt = np.where(values == m, 0.0, rt)
        neg = m < 0
        pos = m > 0
        # m < 0: exponents nu*rt <= 0, max attained at the minimum entry (0).
        ex = np.where(mask, nu * rt, -np.inf)
        w = np.exp(ex - np.max(ex, axis=0))
        num = np.sum(np.where(mask, m * np.exp(np.where(mask, rt, 0.0)) * w, 0.0), axis=0)
        den = np.sum(w, axis=0)
        out = np.where(neg, num / den, out)
        ex = np.where(mask, -nu * rt, -np.inf)
        w = np.exp(ex - np.max(ex, axis=0))
        num = np.sum(np.where(mask, values * w, 0.0), axis=0)
        den = np.sum(w, axis=0)
        out = np.where(pos, num / den, out)
    out[bad] = np.nan
    return out


def _reduce(values: np.ndarray, mask: np.ndarray, op: str, sem: str, nu: float) -> np.ndarray:
    """Reduce rows of ``values`` (masked) with and/or under the chosen semantics."""
    if sem == "space":
        bad = ~mask.any(axis=0) | np.any(mask & np.isnan(values), axis=0)
        if op == "and":
            out = np.where(mask, values, np.inf).min(axis=0)
        else:
            out = np.where(mask, values, -np.inf).max(axis=0)
        out = out.astype(float)
        out[bad] = np.nan
        return out
    if op == "and":
        return _conj_columns(values, mask, nu)
    return -_conj_columns(-values, mask, nu)


# --------------------------------------------------------------------- evaluator


class _Evaluator:
    def __init__(self, s: Signal, cfg: RobustnessConfig):
        self.s = s
        self.k = s.k
        self.sem = cfg.semantics
        self.nu = cfg.nu

    def range(self, phi, lo: int, hi: int) -> np.ndarray:
        """Robustness at samples lo..hi (inclusive, within [0, k])."""
        if isinstance(phi, Pred):
            return np.asarray(phi.pred.margin(self.s[phi.pred.channel][lo : hi + 1]), dtype=float)
        if isinstance(phi, Not):
            return -self.range(phi.child, lo, hi)
        if isinstance(phi, (And, Or)):
            vals = np.vstack([self.range(c, lo, hi) for c in phi.children])
            op = "and" if isinstance(phi, And) else "or"
            return _reduce(vals, np.ones_like(vals, dtype=bool), op, self.sem, self.nu)
        if isinstance(phi, (Globally, Eventually)):
            return self._temporal(phi, lo, hi)
        if isinstance(phi, Until):
            return self._until(phi, lo, hi)
        raise TypeError(f"not a formula: {phi!r}")

    def _temporal(self, phi, lo, hi):
        A, B = window_offsets(phi.interval, self.s.dt, self.k)
        clo, chi = max(lo + A, 0), min(hi + B, self.k)
        n = hi - lo + 1
        if clo > chi:
            return np.full(n, np.nan)
        child = self.range(phi.child, clo, chi)
        idx = np.arange(lo, hi + 1)[None, :] + np.arange(A, B + 1)[:, None]
        mask = (idx >= 0) & (idx <= self.k)
        vals = child[np.clip(idx - clo, 0, chi - clo)]
        op = "and" if isinstance(phi, Globally) else "or"
        return _reduce(vals, mask, op, self.sem, self.nu)

    def _until(self, phi, lo, hi):
        A, B = window_offsets(phi.interval, self.s.dt, self.k)
        top = min(hi + B, self.k)
        n = hi - lo + 1
        out = np.full(n, np.nan)
        if lo > top:
            return out
        left = self.range(phi.left, lo, top)
        rlo = min(max(lo + A, 0), top)
        right = self.range(phi.right, rlo, top)
        for i in range(lo, hi + 1):
            wlo, whi = max(i + A, 0), min(i + B, self.k)
            if wlo > whi:
                continue
            cands = []
            for tp in range(wlo, whi + 1):
                items = np.concatenate(([right[tp - rlo]], left[i - lo : tp - lo]))
                if self.sem == "space":
                    cands.append(items.min())
                else:
                    cands.append(np.nan if np.isnan(items).any() else new_robustness_conj(items, self.nu))
            cands = np.asarray(cands)
            if np.isnan(cands).any():
                continue
            if self.sem == "space":
                out[i - lo] = cands.max()
            else:
                out[i - lo] = -new_robustness_conj(-cands, self.nu)
        return out


def robustness(phi: Formula, s: Signal, t: float = 0.0, cfg: RobustnessConfig | None = None) -> RobustnessValue:
    """Robustness of ``phi`` on ``s`` at time ``t`` under ``cfg``."""
    cfg = cfg or RobustnessConfig()
    for p in predicates(phi):
        s[p.channel]
    i = s.index_of(t)
    return _value(_Evaluator(s, cfg).range(phi, i, i)[0])


def robustness_trace(phi: Formula, s: Signal, cfg: RobustnessConfig | None = None) -> np.ndarray:
    """Robustness at every sample; NaN where a window falls outside the signal."""
    cfg = cfg or RobustnessConfig()
    return _Evaluator(s, cfg).range(phi, 0, s.k)


def space_robustness(phi: Formula, s: Signal, t: float = 0.0) -> RobustnessValue:
    return robustness(phi, s, t, RobustnessConfig("space"))


def new_robustness(phi: Formula, s: Signal, t: float = 0.0, cfg: RobustnessConfig | None = None) -> RobustnessValue:
    cfg = cfg or RobustnessConfig()
    if cfg.semantics != "new":
        cfg = RobustnessConfig("new", cfg.nu)
    return robustness(phi, s, t, cfg)


def clause_breakdown(phi: Formula, s: Signal, t: float = 0.0, cfg: RobustnessConfig | None = None) -> list:
    """(clause, value) for each operand of a top-level conjunction."""
    return [(c, robustness(c, s, t, cfg)) for c in top_clauses(phi)]
