"""HSMM skill models, their optimisable parameter space, and trajectory retrieval."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_DT = 0.05
DEFAULT_CONTROL_COST = 1e-2
DEFAULT_MEAN_BOUND_SIGMAS = 2.0

# Banded transition pattern: each state may go to its successor or skip exactly one.
A_RED_PATTERN = ((0, 1), (0, 2), (1, 2), (1, 3), (2, 3), (2, 4), (3, 4), (3, 5), (4, 5))


class SkillModelError(ValueError):
    pass


class BoundsError(SkillModelError):
    pass


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SkillModel:
    """K Gaussian states over end-effector position with Gaussian durations.

    ``transition`` holds raw (unnormalised) entries; rows are normalised only
    when a state sequence is extracted.
    """

    means: np.ndarray
    covariances: np.ndarray
    duration_means: np.ndarray
    duration_stds: np.ndarray
    transition: np.ndarray
    start: np.ndarray
    dt: float = DEFAULT_DT
    horizon: float = 20.0
    control_cost: float = DEFAULT_CONTROL_COST

    def __post_init__(self):
        for name in ("means", "covariances", "duration_means", "duration_stds", "transition", "start"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        K = self.means.shape[0]
        if self.means.shape != (K, 3) or K < 1:
            raise SkillModelError(f"means must be K x 3, got {self.means.shape}")
        if self.covariances.shape != (K, 3, 3):
            raise SkillModelError(f"covariances must be K x 3 x 3, got {self.covariances.shape}")
        if self.duration_means.shape != (K,) or self.duration_stds.shape != (K,):
            raise SkillModelError("duration_means / duration_stds must have length K")
        if self.transition.shape != (K, K):
            raise SkillModelError(f"transition must be K x K, got {self.transition.shape}")
        if self.start.shape != (3,):
            raise SkillModelError("start must be a 3-vector")
        if not (self.dt > 0 and self.horizon > 0 and self.control_cost > 0):
            raise SkillModelError("dt, horizon and control_cost must be positive")
        if np.any(self.duration_means <= 0):
            raise SkillModelError("duration means must be positive")
        if np.any(self.duration_stds < 0):
            raise SkillModelError("duration stds must be non-negative")
        if np.any(self.transition < 0) or np.any(self.transition > 1):
            raise SkillModelError("transition entries must lie in [0, 1]")
        for k, S in enumerate(self.covariances):
            if not np.allclose(S, S.T, atol=1e-12):
                raise SkillModelError(f"covariance {k} is not symmetric")
            try:
                np.linalg.cholesky(S)
            except np.linalg.LinAlgError:
                raise SkillModelError(f"covariance {k} is not positive definite") from None

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def n_samples(self) -> int:
        return math.ceil(self.horizon / self.dt - 1e-9)

    # ------------------------------------------------------------------ io
    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "dt": self.dt,
            "horizon": self.horizon,
            "control_cost": self.control_cost,
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "duration_means": self.duration_means.tolist(),
            "duration_stds": self.duration_stds.tolist(),
            "transition": self.transition.tolist(),
            "start": self.start.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict, check_horizon: bool = True) -> "SkillModel":
        try:
            m = cls(
                means=d["means"],
                covariances=d["covariances"],
                duration_means=d["duration_means"],
                duration_stds=d["duration_stds"],
                transition=d["transition"],
                start=d["start"],
                dt=float(d.get("dt", DEFAULT_DT)),
                horizon=float(d["horizon"]),
                control_cost=float(d.get("control_cost", DEFAULT_CONTROL_COST)),
            )
        except KeyError as exc:
            raise SkillModelError(f"model is missing field {exc.args[0]!r}") from None
        if "K" in d and int(d["K"]) != m.K:
            raise SkillModelError(f"K={d['K']} does not match {m.K} components")
        if check_horizon and m.duration_means.sum() > m.horizon + 1e-9:
            raise SkillModelError("sum of duration means exceeds the horizon")
        return m

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "SkillModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ------------------------------------------------------------------ parameter space

KINDS = ("mean", "duration", "transition")


@dataclass(frozen=True)
class Layout:
    """Which model entries an optimisation vector addresses, in order.

    ``entries`` holds (kind, index): ("mean", (k, axis)), ("duration", k),
    ("transition", (i, j)).
    """

    entries: tuple = ()

    def __len__(self):
        return len(self.entries)

    @classmethod
    def build(cls, means: Iterable = (), durations: Iterable = (), transitions: Iterable = ()) -> "Layout":
        entries = [("mean", (int(k), a)) for k in means for a in range(3)]
        entries += [("duration", int(k)) for k in durations]
        entries += [("transition", (int(i), int(j))) for i, j in transitions]
        return cls(tuple(entries))

    @classmethod
    def from_dict(cls, d: dict) -> "Layout":
        trans = d.get("transitions", ())
        if trans == "A_red":
            trans = A_RED_PATTERN
        return cls.build(d.get("means", ()), d.get("durations", ()), trans)

    def to_dict(self) -> dict:
        means = sorted({idx[0] for kind, idx in self.entries if kind == "mean"})
        return {
            "means": means,
            "durations": [k for kind, k in self.entries if kind == "duration"],
            "transitions": [list(ij) for kind, ij in self.entries if kind == "transition"],
        }

    def labels(self) -> list:
        out = []
        for kind, idx in self.entries:
            if kind == "mean":
                out.append(f"mu{idx[0]}.{'xyz'[idx[1]]}")
            elif kind == "duration":
                out.append(f"muS{idx}")
            else:
                out.append(f"A{idx[0]}{idx[1]}")
        return out

    def validate(self, m: SkillModel) -> None:
        seen = set()
        for kind, idx in self.entries:
            if kind not in KINDS:
                raise SkillModelError(f"unknown layout kind {kind!r}")
            if (kind, idx) in seen:
                raise SkillModelError(f"duplicate layout entry {(kind, idx)}")
            seen.add((kind, idx))
            if kind == "mean":
                k, a = idx
                ok = 0 <= k < m.K and 0 <= a < 3
            elif kind == "duration":
                ok = 0 <= idx < m.K
            else:
                i, j = idx
                ok = 0 <= i < m.K and 0 <= j < m.K
            if not ok:
                raise SkillModelError(f"layout entry {(kind, idx)} does not fit a K={m.K} model")


def parameter_count(layout: Layout) -> int:
    return len(layout.entries)


def max_parameter_counts(K: int) -> dict:
    """Upper limits per parameter group for a K-state model."""
    return {"means": 3 * K, "durations": K, "transitions": K * (K - 1) // 2}


@dataclass(frozen=True, eq=False)
class ParameterVector:
    values: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    layout: Layout

    def __post_init__(self):
        for name in ("values", "lower", "upper"):
            object.__setattr__(self, name, _frozen(np.reshape(getattr(self, name), -1)))
        n = len(self.layout)
        if not (self.values.size == self.lower.size == self.upper.size == n):
            raise BoundsError(f"parameter vector sizes do not match layout of {n} entries")
        if np.any(self.lower > self.upper):
            raise BoundsError("lower bound exceeds upper bound")
        bad = np.flatnonzero((self.values < self.lower) | (self.values > self.upper))
        if bad.size:
            labels = self.layout.labels()
            j = int(bad[0])
            raise BoundsError(
                f"{labels[j]} = {self.values[j]:.6g} outside bounds [{self.lower[j]:.6g}, {self.upper[j]:.6g}]"
            )

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(values, self.lower, self.upper, self.layout)


def current_values(m: SkillModel, layout: Layout) -> np.ndarray:
    out = []
    for kind, idx in layout.entries:
        if kind == "mean":
            out.append(m.means[idx[0], idx[1]])
        elif kind == "duration":
            out.append(m.duration_means[idx])
        else:
            out.append(m.transition[idx])
    return np.array(out, dtype=float)


def default_bounds(m: SkillModel, layout: Layout, sigmas: float = DEFAULT_MEAN_BOUND_SIGMAS) -> tuple:
    """Per-entry (lower, upper) bounds.

    means: mu +- sigmas * sqrt(diag(Sigma)); durations: muS +- sigmaS with the
    lower end clipped at dt; transitions: [0, 1].
    """
    layout.validate(m)
    lo, hi = [], []
    for kind, idx in layout.entries:
        if kind == "mean":
            k, a = idx
            half = sigmas * math.sqrt(m.covariances[k, a, a])
            lo.append(m.means[k, a] - half)
            hi.append(m.means[k, a] + half)
        elif kind == "duration":
            mu, sd = m.duration_means[idx], m.duration_stds[idx]
            lo.append(min(max(mu - sd, m.dt), mu))
            hi.append(mu + sd)
        else:
            lo.append(0.0)
            hi.append(1.0)
    return np.array(lo), np.array(hi)


def nominal_parameters(m: SkillModel, layout: Layout, sigmas: float = DEFAULT_MEAN_BOUND_SIGMAS) -> ParameterVector:
    lo, hi = default_bounds(m, layout, sigmas)
    return ParameterVector(np.clip(current_values(m, layout), lo, hi), lo, hi, layout)


def apply_parameters(m: SkillModel, delta: ParameterVector) -> SkillModel:
    """Copy of ``m`` with the entries named by ``delta.layout`` replaced."""
    delta.layout.validate(m)
    means = m.means.copy()
    durs = m.duration_means.copy()
    trans = m.transition.copy()
    for (kind, idx), v in zip(delta.layout.entries, delta.values):
        if kind == "mean":
            means[idx] = v
        elif kind == "duration":
            if v <= 0:
                raise BoundsError(f"duration of state {idx} must be positive, got {v}")
            durs[idx] = v
        else:
            trans[idx] = v
    return replace(m, means=means, duration_means=durs, transition=trans)


# --------------------------------------------------------------------- retrieval


def normalize_transitions(A) -> np.ndarray:
    """Scale rows to sum 1; all-zero rows stay zero (absorbing end state)."""
    A = np.array(A, dtype=float)
    if np.any(A < 0):
        raise SkillModelError("transition entries must be non-negative")
    sums = A.sum(axis=1, keepdims=True)
    return np.divide(A, sums, out=np.zeros_like(A), where=sums > 0)


def duration_steps(duration: float, dt: float) -> int:
    """Round-half-up to whole control steps, at least one."""
    return max(1, math.floor(duration / dt + 0.5 + 1e-9))


def state_sequence(m: SkillModel) -> list:
    """Most likely left-to-right visit order as (state, steps) pairs.

    Starts in state 0 and always follows the largest transition (ties go to
    the lower index).  Stops at an all-zero row or once the horizon is filled;
    the last entry is truncated to fit.  Holding the final state up to the
    horizon is left to :func:`retrieve`.
    """
    A = normalize_transitions(m.transition)
    budget = m.n_samples - 1
    seq, visited, used, k = [], set(), 0, 0
    while True:
        if k in visited:
            raise SkillModelError(f"transition cycle revisits state {k}")
        visited.add(k)
        steps = min(duration_steps(m.duration_means[k], m.dt), budget - used)
        if steps <= 0:
            break
        seq.append((k, steps))
        used += steps
        if used >= budget or not A[k].any():
            break
        k = int(np.argmax(A[k]))
    return seq


@dataclass(frozen=True, eq=False)
class Trajectory:
    dt: float
    positions: np.ndarray
    velocities: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        for name in ("positions", "velocities"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        st = np.array(self.states, dtype=int)
        st.setflags(write=False)
        object.__setattr__(self, "states", st)
        if self.positions.shape != self.velocities.shape or self.positions.shape[1:] != (3,):
            raise SkillModelError("positions and velocities must both be N x 3")
        if st.shape != (self.positions.shape[0],):
            raise SkillModelError("state labels must have one entry per sample")

    def __len__(self):
        return self.positions.shape[0]

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self)) * self.dt

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "y", "z", "vx", "vy", "vz", "state"])
            for i in range(len(self)):
                w.writerow(
                    [repr(i * self.dt)]
                    + [repr(float(v)) for v in self.positions[i]]
                    + [repr(float(v)) for v in self.velocities[i]]
                    + [int(self.states[i])]
                )

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["t", "x", "y", "z", "vx", "vy", "vz", "state"]:
            raise SkillModelError(f"{path}: not a trajectory CSV")
        data = np.array([[float(c) for c in r] for r in rows[1:] if r])
        if data.shape[0] < 1:
            raise SkillModelError(f"{path}: trajectory has no samples")
        dt = float(data[1, 0] - data[0, 0]) if data.shape[0] > 1 else 1.0
        return cls(dt, data[:, 1:4], data[:, 4:7], data[:, 7].astype(int))


def concatenate(trajs: Sequence[Trajectory]) -> Trajectory:
    """Play trajectories back to back (they must share dt)."""
    dt = trajs[0].dt
    if any(abs(t.dt - dt) > 1e-12 for t in trajs):
        raise SkillModelError("cannot chain trajectories with different dt")
    return Trajectory(
        dt,
        np.vstack([t.positions for t in trajs]),
        np.vstack([t.velocities for t in trajs]),
        np.concatenate([t.states for t in trajs]),
    )


def double_integrator(dt: float) -> tuple:
    I = np.eye(3)
    Z = np.zeros((3, 3))
    A = np.block([[I, dt * I], [Z, I]])
    B = np.vstack([0.5 * dt * dt * I, dt * I])
    return A, B


def lqt_gains(A, B, Qs, refs, R):
    """Backward Riccati pass for finite-horizon tracking of positions.

    Cost: sum_{t>=1} (p_t - r_t)' Q_t (p_t - r_t) + sum_{t<n-1} u_t' R u_t with
    p_t the first three state entries.  Returns feedback K_t and feedforward
    k_t so that u_t = -K_t x_t + k_t.
    """
    n = len(refs)
    nx = A.shape[0]
    C = np.zeros((3, nx))
    C[:, :3] = np.eye(3)
    P = C.T @ Qs[n - 1] @ C
    s = C.T @ Qs[n - 1] @ refs[n - 1]
    Ks = np.zeros((n - 1, B.shape[1], nx))
    ks = np.zeros((n - 1, B.shape[1]))
    for t in range(n - 2, -1, -1):
        BtP = B.T @ P
        G = R + BtP @ B
        K = np.linalg.solve(G, BtP @ A)
        kff = np.linalg.solve(G, B.T @ s)
        Ks[t], ks[t] = K, kff
        Acl = A - B @ K
        P = A.T @ P @ Acl
        s = Acl.T @ s
        if t > 0:
            P = P + C.T @ Qs[t] @ C
            s = s + C.T @ Qs[t] @ refs[t]
        P = 0.5 * (P + P.T)
    return Ks, ks


def reference(m: SkillModel) -> tuple:
    """Stepwise mean reference, per-sample precision, and state labels."""
    seq = state_sequence(m)
    if not seq:
        raise SkillModelError("model produces an empty state sequence")
    n = m.n_samples
    labels = np.empty(n, dtype=int)
    labels[0] = seq[0][0]
    pos = 1
    for k, steps in seq:
        labels[pos : pos + steps] = k
        pos += steps
    labels[pos:] = seq[-1][0]
    precisions = np.linalg.inv(m.covariances)
    refs = m.means[labels].copy()
    refs[0] = m.start
    Qs = precisions[labels].copy()
    Qs[0] = 0.0
    return refs, Qs, labels


def retrieve(m: SkillModel, start=None) -> Trajectory:
    """Track the state-sequence reference with a finite-horizon LQ tracker.

    The robot starts at rest at ``start`` (default: the model's start).
    """
    if m.n_samples < 2:
        raise SkillModelError("horizon shorter than two control steps")
    refs, Qs, labels = reference(m)
    x0 = np.concatenate([m.start if start is None else np.asarray(start, float), np.zeros(3)])
    refs[0] = x0[:3]
    A, B = double_integrator(m.dt)
    R = m.control_cost * np.eye(3)
    Ks, ks = lqt_gains(A, B, Qs, refs, R)
    n = len(refs)
    X = np.empty((n, 6))
    X[0] = x0
    for t in range(n - 1):
        u = ks[t] - Ks[t] @ X[t]
        X[t + 1] = A @ X[t] + B @ u
    return Trajectory(m.dt, X[:, :3], X[:, 3:], labels)


def retrieve_chain(models: Sequence[SkillModel]) -> Trajectory:
    """Retrieve skills back to back; each starts where the previous one ended."""
    trajs = []
    for m in models:
        start = None if not trajs else trajs[-1].positions[-1]
        trajs.append(retrieve(m, start))
    return concatenate(trajs)


# ------------------------------------------------------------------- fitting


def fit_model(
    times,
    positions,
    K: int,
    dt: float = DEFAULT_DT,
    boundaries: Sequence[int] | None = None,
    duration_std_ratio: float = 0.25,
    min_variance: float = 1e-4,
    horizon: float | None = None,
) -> SkillModel:
    """Segment one demonstration into K consecutive parts and fit a state to each.

    Segments are equal-size sample blocks unless ``boundaries`` (K-1 split
    indices) is given.  Each state gets the segment centroid, its per-axis
    variance (floored at ``min_variance``), and the segment duration.
    Transitions are left-to-right: 0.8 to the successor, 0.2 to the one after.
    """
    times = np.asarray(times, dtype=float).reshape(-1)
    P = np.asarray(positions, dtype=float)
    if K < 1:
        raise SkillModelError("K must be at least 1")
    if P.ndim != 2 or P.shape[1] != 3 or P.shape[0] != times.size:
        raise SkillModelError("demonstration must be N x 3 positions with N timestamps")
    if P.shape[0] < K:
        raise SkillModelError(f"demonstration has {P.shape[0]} samples, fewer than K={K}")
    demo_dt = float(np.mean(np.diff(times))) if times.size > 1 else dt
    if boundaries is None:
        parts = np.array_split(np.arange(P.shape[0]), K)
    else:
        if len(boundaries) != K - 1:
            raise SkillModelError("need K-1 segment boundaries")
        parts = np.split(np.arange(P.shape[0]), list(boundaries))
        if any(p.size == 0 for p in parts):
            raise SkillModelError("segment boundaries produce an empty segment")
    means, covs, durs = [], [], []
    for idx in parts:
        seg = P[idx]
        means.append(seg.mean(axis=0))
        covs.append(np.diag(np.maximum(seg.var(axis=0), min_variance)))
        durs.append(idx.size * demo_dt)
    durs = np.array(durs)
    A = np.zeros((K, K))
    for i in range(K):
        if i + 1 < K:
            A[i, i + 1] = 0.8
        if i + 2 < K:
            A[i, i + 2] = 0.2
    if horizon is None:
        horizon = float(durs.sum())
    return SkillModel(
        means=np.array(means),
        covariances=np.array(covs),
        duration_means=durs,
        duration_stds=duration_std_ratio * durs,
        transition=A,
        start=P[0],
        dt=dt,
        horizon=horizon,
    )


def read_demo_csv(path) -> tuple:
    """Read a ``t,x,y,z[,...]`` demonstration file."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise SkillModelError(f"{path}: empty demonstration file")
    header = [h.strip() for h in rows[0]]
    try:
        cols = [header.index(c) for c in ("t", "x", "y", "z")]
    except ValueError:
        raise SkillModelError(f"{path}: header must contain t,x,y,z") from None
    try:
        data = np.array([[float(r[c]) for c in cols] for r in rows[1:]])
    except (ValueError, IndexError) as exc:
        raise SkillModelError(f"{path}: {exc}") from None
    if data.size == 0:
        raise SkillModelError(f"{path}: demonstration has no samples")
    return data[:, 0], data[:, 1:4]
