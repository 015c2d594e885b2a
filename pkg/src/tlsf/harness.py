"""Deterministic stand-in for the robot and the bundled experiments.

The executor turns a kinematic trajectory into a Signal with channels
``x, y, z`` (end-effector position, m) and ``f`` (contact force norm, N)
from a linear penetration model against axis-aligned obstacle boxes.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .bayesopt import BoConfig, SkillProblem
from .robustness import RobustnessConfig
from .skill import A_RED_PATTERN, Layout, SkillModel, Trajectory, fit_model
from .stl import Formula, RegionSpec, Signal, StlError, load_predicate_table, parse_stl, predicates

DEFAULT_STIFFNESS = 500.0
REGION_SIZE = 0.06


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Obstacle:
    name: str
    lower: tuple
    upper: tuple
    stiffness: float = DEFAULT_STIFFNESS

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        if len(lo) != 3 or len(hi) != 3 or not all(a < b for a, b in zip(lo, hi)):
            raise ConfigError(f"obstacle {self.name!r}: need lower < upper on every axis")
        if self.stiffness < 0:
            raise ConfigError(f"obstacle {self.name!r}: stiffness must be >= 0")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def penetration(self, P: np.ndarray) -> np.ndarray:
        """Depth of each point below the nearest face; 0 outside the box."""
        lo, hi = np.array(self.lower), np.array(self.upper)
        d = np.minimum(P - lo, hi - P).min(axis=1)
        return np.maximum(d, 0.0)

    def to_dict(self) -> dict:
        return {"name": self.name, "lower": list(self.lower), "upper": list(self.upper), "stiffness": self.stiffness}

    @classmethod
    def from_dict(cls, d) -> "Obstacle":
        return cls(d["name"], tuple(d["lower"]), tuple(d["upper"]), float(d.get("stiffness", DEFAULT_STIFFNESS)))


@dataclass(frozen=True)
class Scene:
    regions: tuple = ()
    obstacles: tuple = ()

    def region(self, name: str) -> RegionSpec:
        for r in self.regions:
            if r.name == name:
                return r
        raise ConfigError(f"scene has no region {name!r}")

    def to_dict(self) -> dict:
        return {"regions": [r.to_dict() for r in self.regions], "obstacles": [o.to_dict() for o in self.obstacles]}

    @classmethod
    def from_dict(cls, d) -> "Scene":
        return cls(
            tuple(RegionSpec.from_dict(r) for r in d.get("regions", ())),
            tuple(Obstacle.from_dict(o) for o in d.get("obstacles", ())),
        )


def contact_force(P: np.ndarray, scene: Scene) -> np.ndarray:
    f = np.zeros(len(P))
    for ob in scene.obstacles:
        f = np.maximum(f, ob.stiffness * ob.penetration(P))
    return f


def execute(traj: Trajectory, scene: Scene) -> Signal:
    """Record position channels and the synthetic contact force along ``traj``."""
    P = traj.positions
    return Signal(
        traj.dt,
        {"x": P[:, 0], "y": P[:, 1], "z": P[:, 2], "f": contact_force(P, scene)},
    )


def signed_distance(P: np.ndarray, region: RegionSpec) -> np.ndarray:
    """Distance to the region boundary, negative inside."""
    lo, hi = region.lower, region.upper
    outside = np.maximum(np.maximum(lo - P, P - hi), 0.0)
    out = np.linalg.norm(outside, axis=1)
    inside = np.minimum(P - lo, hi - P).min(axis=1)
    return np.where(inside > 0, -inside, out)


def box(name: str, center, size=REGION_SIZE) -> RegionSpec:
    c = np.asarray(center, dtype=float)
    h = size / 2.0
    return RegionSpec(name, (c[0] - h, c[0] + h), (c[1] - h, c[1] + h), (c[2] - h, c[2] + h))


# ---------------------------------------------------------------- experiments


@dataclass
class ExperimentConfig:
    name: str
    models: list
    scene: Scene
    stl: str
    predicates: dict
    layouts: list
    bo: BoConfig = field(default_factory=BoConfig)
    robustness: RobustnessConfig = field(default_factory=RobustnessConfig)
    events: dict = field(default_factory=dict)
    model_files: list | None = None

    def formula(self) -> Formula:
        table = load_predicate_table(self.predicates, self.scene.regions)
        return parse_stl(self.stl, table)

    def problem(self) -> SkillProblem:
        return SkillProblem(self.models, self.layouts)

    def executor(self):
        scene = self.scene
        return lambda traj: execute(traj, scene)

    def check_closed(self) -> None:
        """Every layout entry and predicate channel must resolve."""
        for m, lay in zip(self.models, self.layouts):
            lay.validate(m)
        if len(self.models) != len(self.layouts):
            raise ConfigError("one layout per model is required")
        try:
            phi = self.formula()
        except StlError as exc:
            raise ConfigError(str(exc)) from None
        for p in predicates(phi):
            if p.channel not in ("x", "y", "z", "f"):
                raise ConfigError(f"predicate {p.name!r} reads unknown channel {p.channel!r}")

    def to_dict(self, inline_models: bool = True) -> dict:
        if inline_models or not self.model_files:
            model = [m.to_dict() for m in self.models]
        else:
            model = list(self.model_files)
        layout = [lay.to_dict() for lay in self.layouts]
        single = len(self.models) == 1
        return {
            "name": self.name,
            "model": model[0] if single else model,
            "scene": self.scene.to_dict(),
            "stl": self.stl,
            "predicates": self.predicates,
            "layout": layout[0] if single else layout,
            "bo": self.bo.to_dict(),
            "robustness": {"semantics": self.robustness.semantics, "nu": self.robustness.nu},
            "events": self.events,
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        try:
            models_raw = d["model"]
            if not isinstance(models_raw, list):
                models_raw = [models_raw]
            models, files = [], []
            for entry in models_raw:
                if isinstance(entry, str):
                    path = Path(entry)
                    if base_dir is not None and not path.is_absolute():
                        path = base_dir / path
                    models.append(SkillModel.load(path))
                    files.append(entry)
                else:
                    models.append(SkillModel.from_dict(entry))
            layouts_raw = d.get("layout", {})
            if not isinstance(layouts_raw, list):
                layouts_raw = [layouts_raw]
            cfg = cls(
                name=d.get("name", "experiment"),
                models=models,
                scene=Scene.from_dict(d.get("scene", {})),
                stl=d["stl"],
                predicates=d.get("predicates", {}),
                layouts=[Layout.from_dict(x) for x in layouts_raw],
                bo=BoConfig.from_dict(d.get("bo", {})),
                robustness=RobustnessConfig(**d.get("robustness", {})),
                events=d.get("events", {}),
                model_files=files if len(files) == len(models) else None,
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed experiment config: {exc}") from None
        cfg.check_closed()
        return cfg

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(d, path.parent)


# ---------------------------------------------------------- bundled geometry

Z0 = 0.25

# Visiting regions of the reaching skill.  L4 is new: the demonstration never
# enters it.
L1 = box("L1", (-0.30, 0.22, Z0))
L2 = box("L2", (0.40, 0.20, Z0))
L3 = box("L3", (-0.05, 0.45, Z0))
L4 = box("L4", (0.08, 0.32, Z0))

# Demonstration waypoints: (position, arrival time, dwell until).
DEMO_WAYPOINTS = (
    ((-0.22, 0.17, Z0), 0.0, 0.0),
    ((-0.30, 0.22, Z0), 1.0, 5.0),
    ((-0.06, 0.32, Z0), 6.5, 6.5),
    ((0.14, 0.28, Z0), 8.5, 8.5),
    ((0.40, 0.20, Z0), 10.0, 15.0),
    ((0.175, 0.325, Z0), 17.5, 17.5),
    ((-0.05, 0.45, Z0), 20.0, 25.0),
    ((-0.03, 0.43, Z0), 27.0, 30.0),
)
DEMO_DT = 0.05
DEMO_DURATION = 30.0
# Stand-in for the timing variability a handful of demonstrations would show.
DURATION_STD_RATIO = 0.4


def synthetic_demo(waypoints=DEMO_WAYPOINTS, dt=DEMO_DT, duration=DEMO_DURATION) -> tuple:
    """Piecewise-linear demonstration with dwells; returns (times, positions)."""
    knots_t, knots_p = [], []
    for p, arrive, leave in waypoints:
        knots_t.append(arrive)
        knots_p.append(p)
        if leave > arrive:
            knots_t.append(leave)
            knots_p.append(p)
    knots_t = np.array(knots_t)
    knots_p = np.array(knots_p)
    t = np.arange(round(duration / dt)) * dt
    P = np.column_stack([np.interp(t, knots_t, knots_p[:, a]) for a in range(3)])
    return t, P


def demo_model(K: int = 6) -> SkillModel:
    """K = 6 reaching skill fitted by equal-time segmentation of the demo."""
    t, P = synthetic_demo()
    return fit_model(t, P, K, dt=0.05, duration_std_ratio=DURATION_STD_RATIO, horizon=DEMO_DURATION)


def region_predicates(names) -> dict:
    return {n: {"region": n} for n in names}


def build_phi1() -> ExperimentConfig:
    """Visit L1, L3; stay in L2 over [12, 17] s; pass L4 within [8, 12] s."""
    return ExperimentConfig(
        name="phi1",
        models=[demo_model()],
        scene=Scene((L1, L2, L3, L4), ()),
        stl="F(L1) and G[12,17](L2) and F(L3) and F[8,12](L4)",
        predicates=region_predicates(["L1", "L2", "L3", "L4"]),
        layouts=[Layout.build(means=[0, 1], durations=range(6))],
        bo=BoConfig(N=32, M=5),
    )


def build_phi2() -> ExperimentConfig:
    """As phi1 but L2 must be avoided over [12, 17] s; transitions are free."""
    return ExperimentConfig(
        name="phi2",
        models=[demo_model()],
        scene=Scene((L1, L2, L3, L4), ()),
        stl="F(L1) and G[12,17](not L2) and F(L3) and F[8,12](L4)",
        predicates=region_predicates(["L1", "L2", "L3", "L4"]),
        layouts=[Layout.build(means=[0, 1], durations=range(6), transitions=A_RED_PATTERN)],
        bo=BoConfig(N=32, M=5),
    )


# Pick-and-insert scene.  The holder is a slot between two walls; the insert
# demonstration ends slightly off the slot centre so the tip clips a wall.
ZT = 0.10
OBJ = box("obj", (0.45, -0.10, ZT), size=0.04)
HOLDER_SLOT_X = 0.50
HOLDER_WALLS = (
    Obstacle("holder_left", (HOLDER_SLOT_X - 0.05, 0.18, 0.0), (HOLDER_SLOT_X - 0.006, 0.26, 0.08)),
    Obstacle("holder_right", (HOLDER_SLOT_X + 0.006, 0.18, 0.0), (HOLDER_SLOT_X + 0.05, 0.26, 0.08)),
)

PICK_WAYPOINTS = (
    ((0.30, 0.05, 0.30), 0.0, 0.0),
    ((0.33, 0.02, 0.28), 2.5, 4.5),
    ((0.37, -0.02, 0.24), 7.0, 9.5),
    ((0.40, -0.05, 0.20), 12.0, 14.5),
    ((0.43, -0.08, 0.16), 17.0, 19.5),
    ((0.45, -0.10, ZT), 22.5, 27.5),
    ((0.45, -0.10, 0.22), 30.5, 33.0),
)
PICK_DURATION = 33.0
# A soft conjunction lets the force margin still move the reward once the
# pick clause holds; with nu = 1 the small spatial margin swamps it.
PHI3_NU = 0.001
INSERT_WAYPOINTS = (
    ((0.45, -0.10, 0.22), 0.0, 0.0),
    ((0.46, 0.00, 0.26), 3.0, 4.0),
    ((0.48, 0.10, 0.26), 6.0, 8.0),
    ((0.50, 0.18, 0.24), 10.0, 12.0),
    ((0.512, 0.22, 0.16), 14.0, 17.5),
    ((0.512, 0.22, 0.04), 19.5, 24.0),
)


def pick_model() -> SkillModel:
    t, P = synthetic_demo(PICK_WAYPOINTS, duration=PICK_DURATION)
    return fit_model(t, P, 6, horizon=PICK_DURATION)


def insert_model() -> SkillModel:
    t, P = synthetic_demo(INSERT_WAYPOINTS, duration=24.0)
    return fit_model(t, P, 6, horizon=24.0)


def build_phi3() -> ExperimentConfig:
    """Pick the object within 20 s, then insert keeping contact force under 2 N."""
    return ExperimentConfig(
        name="phi3",
        models=[pick_model(), insert_model()],
        scene=Scene((OBJ,), HOLDER_WALLS),
        stl="F[0,20](obj) and F(force)",
        predicates={"obj": {"region": "obj"}, "force": {"channel": "f", "kind": "threshold", "c": 2.0}},
        layouts=[
            Layout.build(durations=range(6), transitions=A_RED_PATTERN),
            Layout.build(means=[5]),
        ],
        bo=BoConfig(N=16, M=5),
        robustness=RobustnessConfig("new", PHI3_NU),
        events={"grasp": "end of skill 0", "release": "end of skill 1"},
    )


BUILDERS = {"phi1": build_phi1, "phi2": build_phi2, "phi3": build_phi3}


def bundled(name: str) -> ExperimentConfig:
    try:
        return BUILDERS[name]()
    except KeyError:
        raise ConfigError(f"unknown bundled experiment {name!r}; choose from {sorted(BUILDERS)}") from None


# ------------------------------------------------------ two-signal example

# F[2,4] A and G[2,8] not B over a scalar channel; A and B are bands.
EXAMPLE_SPEC = {
    "stl": "F[2,4](A) and G[2,8](not B)",
    "predicates": {
        "A": {"channel": "s", "kind": "band", "lb": 0.4, "ub": 0.6},
        "B": {"channel": "s", "kind": "band", "lb": 0.15, "ub": 0.35},
    },
}
# Knots (t, value).  S1 touches the centre of A at t = 3 and stays at least
# 0.1 above B; S2 enters B from above and turns back 0.05 deep at t = 6.
EXAMPLE_S1 = ((0.0, 0.30), (2.0, 0.45), (3.0, 0.50), (4.0, 0.47), (8.0, 0.55), (8.5, 0.55))
EXAMPLE_S2 = ((0.0, 0.30), (2.0, 0.45), (3.0, 0.50), (4.0, 0.45), (6.0, 0.30), (7.0, 0.40), (8.5, 0.45))


def example_signal(knots, dt: float = 0.1) -> Signal:
    kt, kv = np.array(knots).T
    n = int(round(kt[-1] / dt)) + 1
    return Signal(dt, {"s": np.interp(np.arange(n) * dt, kt, kv)})
