"""Gaussian-process Bayesian optimisation of skill parameters against STL robustness.

The loop maximises robustness.  Internally the GP models the cost
``g = -robustness`` and the acquisition is probability of improvement for
minimisation.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import ndtr
from scipy.stats import qmc

from .robustness import RobustnessConfig, robustness
from .skill import (
    Layout,
    ParameterVector,
    SkillModel,
    apply_parameters,
    default_bounds,
    retrieve_chain,
)
from .stl import Formula, Signal

log = logging.getLogger(__name__)

LENGTHSCALE_GRID = (0.05, 0.1, 0.2, 0.4, 0.8)
NOISE_GRID = (1e-6, 1e-4, 1e-2)
JITTERS = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)


class GpError(RuntimeError):
    pass


class OptimizationAborted(RuntimeError):
    """The executor failed; ``trace`` holds every completed iteration."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


# ------------------------------------------------------------------------ GP


def se_kernel(X1, X2, lengthscale, signal_var):
    d2 = np.sum((X1[:, None, :] - X2[None, :, :]) ** 2, axis=-1)
    return signal_var * np.exp(-0.5 * d2 / lengthscale**2)


@dataclass
class GpModel:
    """Squared-exponential GP on unit-cube inputs and standardised outputs."""

    X: np.ndarray
    y: np.ndarray  # standardised
    y_mean: float
    y_std: float
    lengthscale: float
    signal_var: float
    noise_var: float
    jitter: float
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    log_marginal_likelihood: float = 0.0

    def predict_standardized(self, Xq) -> tuple:
        """Latent posterior mean and std in standardised units."""
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        Ks = se_kernel(Xq, self.X, self.lengthscale, self.signal_var)
        mean = Ks @ self.alpha
        v = cho_solve((self.chol, True), Ks.T)
        var = self.signal_var - np.sum(Ks * v.T, axis=1)
        return mean, np.sqrt(np.maximum(var, 0.0))

    def predict(self, Xq) -> tuple:
        """Posterior mean and std in the units of the training outputs."""
        m, s = self.predict_standardized(Xq)
        return m * self.y_std + self.y_mean, s * self.y_std

    def standardize(self, value):
        return (np.asarray(value, dtype=float) - self.y_mean) / self.y_std

    def to_dict(self) -> dict:
        return {
            "kernel": "squared_exponential",
            "lengthscale": self.lengthscale,
            "signal_var": self.signal_var,
            "noise_var": self.noise_var,
            "jitter": self.jitter,
            "y_mean": self.y_mean,
            "y_std": self.y_std,
            "log_marginal_likelihood": self.log_marginal_likelihood,
            "X": self.X.tolist(),
            "y": (self.y * self.y_std + self.y_mean).tolist(),
        }


def _factor(X, y, lengthscale, signal_var, noise_var):
    K = se_kernel(X, X, lengthscale, signal_var)
    n = len(X)
    for jitter in JITTERS:
        try:
            L = np.linalg.cholesky(K + (noise_var + jitter) * np.eye(n))
        except np.linalg.LinAlgError:
            continue
        alpha = cho_solve((L, True), y)
        lml = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * math.log(2 * math.pi)
        return L, alpha, jitter, lml
    raise GpError(f"gram matrix not positive definite (lengthscale={lengthscale}, noise={noise_var})")


def gp_fit(X, y, lengthscales=LENGTHSCALE_GRID, noise_vars=NOISE_GRID) -> GpModel:
    """Fit by maximising the log marginal likelihood over a fixed grid.

    ``X`` must already live in the unit cube.  Outputs are standardised, so
    the signal variance is that of the standardised data (1).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(X) < 1 or len(X) != len(y):
        raise GpError("need at least one observation with matching inputs/outputs")
    if not np.all(np.isfinite(y)):
        raise GpError("non-finite training outputs")
    y_mean = float(y.mean())
    y_std = float(y.std())
    if not y_std > 1e-12:
        y_std = 1.0
    ys = (y - y_mean) / y_std
    best = None
    for ell in lengthscales:
        for nv in noise_vars:
            try:
                L, alpha, jit, lml = _factor(X, ys, ell, 1.0, nv)
            except GpError:
                continue
            if best is None or lml > best[-1]:
                best = (ell, nv, L, alpha, jit, lml)
    if best is None:
        raise GpError("no hyperparameter setting gives a positive-definite gram matrix")
    ell, nv, L, alpha, jit, lml = best
    return GpModel(X, ys, y_mean, y_std, ell, 1.0, nv, jit, L, alpha, lml)


# --------------------------------------------------------------- acquisition


def probability_of_improvement(mean, std, f_best, xi=0.0):
    """Phi((f_best - mean - xi) / std) for minimisation; std == 0 is a step."""
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    gap = f_best - mean - xi
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(std > 0, gap / np.where(std > 0, std, 1.0), np.where(gap > 0, np.inf, -np.inf))
    return ndtr(z)


def _pi_score(gp: GpModel, Xq, f_best_std, xi):
    # Monotone in PI; keeps candidate ranking meaningful where Phi saturates.
    m, s = gp.predict_standardized(Xq)
    gap = f_best_std - m - xi
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(s > 0, gap / np.where(s > 0, s, 1.0), np.where(gap > 0, np.inf, -np.inf))


def pi_acquisition(gp: GpModel, x, f_best: float, xi: float = 0.0):
    """PI at unit-cube point(s) ``x``; ``f_best`` in output units, ``xi`` standardised."""
    m, s = gp.predict_standardized(x)
    out = probability_of_improvement(m, s, float(gp.standardize(f_best)), xi)
    return float(out[0]) if np.ndim(x) == 1 else out


@dataclass(frozen=True)
class BoConfig:
    N: int = 32
    M: int = 5
    xi: float = 0.01
    n_candidates: int = 4096
    refine_steps: int = 20
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.M <= self.N):
            raise ValueError(f"need 1 <= M <= N, got M={self.M}, N={self.N}")
        if self.xi < 0:
            raise ValueError("xi must be non-negative")
        if self.n_candidates < 1 or self.refine_steps < 0:
            raise ValueError("candidate budget must be positive")

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "M": self.M,
            "xi": self.xi,
            "n_candidates": self.n_candidates,
            "refine_steps": self.refine_steps,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoConfig":
        return cls(**{k: d[k] for k in ("N", "M", "xi", "n_candidates", "refine_steps", "seed") if k in d})


def _candidate_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, iteration])))


def propose_next(gp: GpModel, cfg: BoConfig, f_best: float, iteration: int = 0) -> np.ndarray:
    """Maximise PI over scrambled Sobol candidates, then refine coordinate-wise.

    Returns a point in the unit cube.  Ties go to the lowest candidate index;
    refinement only moves on strict improvement.
    """
    d = gp.X.shape[1]
    sob = qmc.Sobol(d, scramble=True, seed=_candidate_rng(cfg.seed, iteration))
    n = cfg.n_candidates
    cands = sob.random_base2(max(0, math.ceil(math.log2(n))))[:n] if n > 1 else sob.random(1)
    fb = float(gp.standardize(f_best))
    scores = _pi_score(gp, cands, fb, cfg.xi)
    j = int(np.argmax(scores))
    x, best = cands[j].copy(), scores[j]
    h = 0.05
    eye = np.eye(d)
    for _ in range(cfg.refine_steps):
        trial = np.clip(np.vstack([x + h * eye, x - h * eye]), 0.0, 1.0)
        sc = _pi_score(gp, trial, fb, cfg.xi)
        k = int(np.argmax(sc))
        if sc[k] > best:
            x, best = trial[k], sc[k]
        else:
            h *= 0.5
    return x


# --------------------------------------------------------------------- loop


class SkillProblem:
    """Flattened parameter space over one or more chained skills."""

    def __init__(self, models, layouts, bounds=None):
        if isinstance(models, SkillModel):
            models, layouts = [models], [layouts]
        self.models = list(models)
        self.layouts = list(layouts)
        if len(self.models) != len(self.layouts):
            raise ValueError("one layout per model is required")
        for m, lay in zip(self.models, self.layouts):
            lay.validate(m)
        if bounds is None:
            per = [default_bounds(m, lay) for m, lay in zip(self.models, self.layouts)]
            lo = np.concatenate([p[0] for p in per]) if per else np.zeros(0)
            hi = np.concatenate([p[1] for p in per]) if per else np.zeros(0)
        else:
            lo, hi = (np.asarray(b, dtype=float) for b in bounds)
        self.lower, self.upper = lo, hi
        self.sizes = [len(lay) for lay in self.layouts]

    @property
    def dim(self) -> int:
        return int(sum(self.sizes))

    def labels(self) -> list:
        if len(self.layouts) == 1:
            return self.layouts[0].labels()
        return [f"s{i}.{lab}" for i, lay in enumerate(self.layouts) for lab in lay.labels()]

    def split(self, delta) -> list:
        delta = np.asarray(delta, dtype=float)
        out, pos = [], 0
        for lay, n in zip(self.layouts, self.sizes):
            out.append(
                ParameterVector(delta[pos : pos + n], self.lower[pos : pos + n], self.upper[pos : pos + n], lay)
            )
            pos += n
        return out

    def apply(self, delta) -> list:
        return [apply_parameters(m, p) for m, p in zip(self.models, self.split(delta))]

    def trajectory(self, delta):
        return retrieve_chain(self.apply(delta))

    def to_unit(self, delta) -> np.ndarray:
        w = self.upper - self.lower
        return np.where(w > 0, (np.asarray(delta) - self.lower) / np.where(w > 0, w, 1.0), 0.0)

    def from_unit(self, u) -> np.ndarray:
        return np.clip(self.lower + np.asarray(u) * (self.upper - self.lower), self.lower, self.upper)


@dataclass
class OptimizationTrace:
    labels: list
    lower: np.ndarray
    upper: np.ndarray
    seed: int
    deltas: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    gp: GpModel | None = None

    def __len__(self):
        return len(self.rewards)

    @property
    def best_index(self) -> int:
        return int(np.argmax(self.rewards))

    @property
    def best_delta(self) -> np.ndarray:
        return self.deltas[self.best_index]

    @property
    def best_reward(self) -> float:
        return float(self.rewards[self.best_index])

    def best_so_far(self) -> np.ndarray:
        return np.maximum.accumulate(np.asarray(self.rewards, dtype=float))

    def digest(self) -> str:
        """Hash of the evaluated points and rewards (wall times excluded)."""
        h = hashlib.sha256()
        for i, (d, r) in enumerate(zip(self.deltas, self.rewards)):
            h.update(f"{i}:{r!r}:{','.join(repr(float(v)) for v in d)};".encode())
        return h.hexdigest()

    def to_csv(self, path) -> None:
        best = self.best_so_far()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "reward", "best_reward", "wall_ms"] + [f"delta_{j}" for j in range(len(self.labels))])
            for i, (d, r) in enumerate(zip(self.deltas, self.rewards)):
                w.writerow([i, repr(float(r)), repr(float(best[i])), f"{self.wall_ms[i]:.3f}"] + [repr(float(v)) for v in d])

    @staticmethod
    def read_csv(path) -> dict:
        """Columns of a trace CSV as arrays."""
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][:4] != ["iter", "reward", "best_reward", "wall_ms"]:
            raise ValueError(f"{path}: not a trace CSV")
        data = np.array([[float(c) for c in r] for r in rows[1:] if r]).reshape(-1, len(rows[0]))
        return {
            "iter": data[:, 0].astype(int),
            "reward": data[:, 1],
            "best_reward": data[:, 2],
            "wall_ms": data[:, 3],
            "delta": data[:, 4:],
        }


def objective(problem: SkillProblem, formula: Formula, executor, rcfg: RobustnessConfig):
    def f(delta):
        traj = problem.trajectory(delta)
        sig = executor(traj)
        return robustness(formula, sig, 0.0, rcfg).value, traj, sig

    return f


def optimize(
    model,
    layout,
    formula: Formula,
    executor: Callable,
    cfg: BoConfig,
    robustness_cfg: RobustnessConfig | None = None,
    bounds=None,
    callback: Callable | None = None,
) -> OptimizationTrace:
    """Run N evaluations: M uniform random draws within bounds, then PI proposals.

    ``model``/``layout`` may be single objects or aligned sequences (chained
    skills).  ``executor`` maps a Trajectory to a Signal.  ``callback`` is
    called as ``callback(i, delta, reward, trajectory, signal)``.
    """
    rcfg = robustness_cfg or RobustnessConfig()
    problem = model if isinstance(model, SkillProblem) else SkillProblem(model, layout, bounds)
    rng = np.random.Generator(np.random.Philox(key=cfg.seed))
    evaluate = objective(problem, formula, executor, rcfg)
    trace = OptimizationTrace(problem.labels(), problem.lower.copy(), problem.upper.copy(), cfg.seed)
    for i in range(cfg.N):
        t0 = time.perf_counter()
        if i < cfg.M:
            delta = rng.uniform(problem.lower, problem.upper)
        else:
            gp = gp_fit(np.array([problem.to_unit(d) for d in trace.deltas]), -np.asarray(trace.rewards))
            u = propose_next(gp, cfg, f_best=-max(trace.rewards), iteration=i)
            delta = problem.from_unit(u)
        try:
            reward, traj, sig = evaluate(delta)
        except Exception as exc:
            raise OptimizationAborted(f"evaluation {i} failed: {exc}", trace) from exc
        trace.deltas.append(np.asarray(delta, dtype=float))
        trace.rewards.append(float(reward))
        trace.wall_ms.append((time.perf_counter() - t0) * 1e3)
        log.debug("iter %d reward %.6g best %.6g", i, reward, max(trace.rewards))
        if callback is not None:
            callback(i, trace.deltas[-1], reward, traj, sig)
    trace.gp = gp_fit(np.array([problem.to_unit(d) for d in trace.deltas]), -np.asarray(trace.rewards))
    return trace


def gp_slices(trace: OptimizationTrace, n_points: int = 50) -> dict:
    """1-D cuts through the final surrogate at the best point, one per parameter.

    Values are in cost units (negative robustness), as in the surrogate plots.
    """
    gp = trace.gp
    if gp is None:
        raise ValueError("trace has no fitted GP")
    w = trace.upper - trace.lower
    u_best = np.where(w > 0, (trace.best_delta - trace.lower) / np.where(w > 0, w, 1.0), 0.0)
    grid = np.linspace(0.0, 1.0, n_points)
    slices = []
    for j, label in enumerate(trace.labels):
        Xq = np.repeat(u_best[None, :], n_points, axis=0)
        Xq[:, j] = grid
        m, s = gp.predict(Xq)
        slices.append(
            {
                "parameter": label,
                "values": (trace.lower[j] + grid * w[j]).tolist(),
                "cost_mean": m.tolist(),
                "cost_std": s.tolist(),
            }
        )
    return {"gp": gp.to_dict(), "labels": trace.labels, "best_delta": trace.best_delta.tolist(), "slices": slices}
