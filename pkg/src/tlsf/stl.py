"""STL formulas over discrete-time signals: AST, parser, printer, boolean semantics.

Formulas are immutable trees.  Predicates carry an affine margin function of a
single signal channel; a predicate holds at a sample iff its margin is > 0.
"""
from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np

# Tolerance for snapping interval endpoints onto the sampling grid.
GRID_EPS = 1e-9


class StlError(ValueError):
    """Base class for formula and signal errors."""


class StlSyntaxError(StlError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class UnknownPredicateError(StlError):
    pass


class IntervalError(StlError):
    pass


class EmptyWindowError(StlError):
    """A temporal window clamps to no samples of the signal."""


class SignalError(StlError):
    pass


# --------------------------------------------------------------------- predicates

PREDICATE_KINDS = ("lower", "upper", "band", "threshold")


@dataclass(frozen=True)
class Predicate:
    """Atomic proposition ``margin(x) > 0`` on one channel.

    kinds:
      lower      x - lb
      upper      ub - x
      band       (ub - lb)/2 - |x - (ub + lb)/2|
      threshold  c - |x|
    """

    name: str
    channel: str
    kind: str
    lb: float = 0.0
    ub: float = 0.0
    c: float = 0.0

    def __post_init__(self):
        if self.kind not in PREDICATE_KINDS:
            raise StlError(f"unknown predicate kind {self.kind!r}")
        if self.kind == "band" and not self.lb < self.ub:
            raise StlError(f"band predicate {self.name!r} needs lb < ub, got ({self.lb}, {self.ub})")

    def margin(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "lower":
            return x - self.lb
        if self.kind == "upper":
            return self.ub - x
        if self.kind == "band":
            return (self.ub - self.lb) / 2.0 - np.abs(x - (self.ub + self.lb) / 2.0)
        return self.c - np.abs(x)

    @classmethod
    def from_dict(cls, name: str, d: Mapping) -> "Predicate":
        return cls(
            name=name,
            channel=d["channel"],
            kind=d["kind"],
            lb=float(d.get("lb", 0.0)),
            ub=float(d.get("ub", 0.0)),
            c=float(d.get("c", 0.0)),
        )

    def to_dict(self) -> dict:
        d = {"channel": self.channel, "kind": self.kind}
        if self.kind in ("lower", "band"):
            d["lb"] = self.lb
        if self.kind in ("upper", "band"):
            d["ub"] = self.ub
        if self.kind == "threshold":
            d["c"] = self.c
        return d


# --------------------------------------------------------------------------- AST

Interval = Union[tuple, None]  # (a, b) in seconds; None means [0, horizon]


def _check_interval(interval):
    if interval is None:
        return None
    a, b = float(interval[0]), float(interval[1])
    if not (math.isfinite(a) and math.isfinite(b)):
        raise IntervalError(f"interval bounds must be finite, got [{a}, {b}]")
    if a < 0 or b < 0:
        raise IntervalError(f"interval bounds must be non-negative, got [{a}, {b}]")
    if a > b:
        raise IntervalError(f"empty interval [{a}, {b}]: lower bound exceeds upper bound")
    return (a, b)


@dataclass(frozen=True)
class Pred:
    pred: Predicate


@dataclass(frozen=True)
class Not:
    child: "Formula"


@dataclass(frozen=True)
class And:
    children: tuple

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if len(self.children) < 2:
            raise StlError("conjunction needs at least two operands")


@dataclass(frozen=True)
class Or:
    children: tuple

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if len(self.children) < 2:
            raise StlError("disjunction needs at least two operands")


@dataclass(frozen=True)
class Globally:
    interval: Interval
    child: "Formula"

    def __post_init__(self):
        object.__setattr__(self, "interval", _check_interval(self.interval))


@dataclass(frozen=True)
class Eventually:
    interval: Interval
    child: "Formula"

    def __post_init__(self):
        object.__setattr__(self, "interval", _check_interval(self.interval))


@dataclass(frozen=True)
class Until:
    interval: tuple
    left: "Formula"
    right: "Formula"

    def __post_init__(self):
        if self.interval is None:
            raise IntervalError("until requires an explicit interval")
        object.__setattr__(self, "interval", _check_interval(self.interval))


Formula = Union[Pred, Not, And, Or, Globally, Eventually, Until]


def predicates(phi: Formula) -> list:
    """All predicates referenced by ``phi`` (depth-first, with repeats removed)."""
    out, seen = [], set()

    def walk(node):
        if isinstance(node, Pred):
            if node.pred not in seen:
                seen.add(node.pred)
                out.append(node.pred)
        elif isinstance(node, Not):
            walk(node.child)
        elif isinstance(node, (And, Or)):
            for c in node.children:
                walk(c)
        elif isinstance(node, (Globally, Eventually)):
            walk(node.child)
        elif isinstance(node, Until):
            walk(node.left)
            walk(node.right)

    walk(phi)
    return out


# ------------------------------------------------------------------------ signals


@dataclass(frozen=True)
class Signal:
    """Uniformly sampled multi-channel trace; sample i is at time i * dt."""

    dt: float
    channels: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise SignalError(f"dt must be positive, got {self.dt}")
        if not self.channels:
            raise SignalError("signal has no channels")
        chans = {}
        length = None
        for name, values in self.channels.items():
            arr = np.array(values, dtype=float).reshape(-1)
            if arr.size == 0:
                raise SignalError(f"channel {name!r} is empty")
            if not np.all(np.isfinite(arr)):
                raise SignalError(f"channel {name!r} has non-finite values")
            if length is None:
                length = arr.size
            elif arr.size != length:
                raise SignalError("all channels must have the same length")
            arr.setflags(write=False)
            chans[name] = arr
        object.__setattr__(self, "channels", chans)

    def __len__(self):
        return next(iter(self.channels.values())).size

    @property
    def k(self) -> int:
        """Index of the last sample."""
        return len(self) - 1

    @property
    def horizon(self) -> float:
        return self.k * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self)) * self.dt

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.channels[name]
        except KeyError:
            raise SignalError(f"signal has no channel {name!r}") from None

    def index_of(self, t: float) -> int:
        x = t / self.dt
        i = int(round(x))
        if abs(x - i) > 1e-6:
            raise SignalError(f"time {t} is not on the sampling grid (dt={self.dt})")
        if not 0 <= i <= self.k:
            raise SignalError(f"time {t} outside signal horizon [0, {self.horizon}]")
        return i

    def to_csv(self, path) -> None:
        names = list(self.channels)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + names)
            for i in range(len(self)):
                w.writerow([repr(i * self.dt)] + [repr(float(self.channels[n][i])) for n in names])

    @classmethod
    def from_csv(cls, path, dt: float | None = None) -> "Signal":
        """Read ``t,<ch1>,<ch2>,...``; dt is inferred from the t column."""
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
        if not rows:
            raise SignalError(f"{path}: empty signal file")
        header = [h.strip() for h in rows[0]]
        if len(header) < 2 or header[0] != "t":
            raise SignalError(f"{path}: header must be 't,<channel>,...'")
        body = rows[1:]
        if not body:
            raise SignalError(f"{path}: signal has no samples")
        try:
            data = np.array([[float(c) for c in r] for r in body])
        except ValueError as exc:
            raise SignalError(f"{path}: {exc}") from None
        if data.shape[1] != len(header):
            raise SignalError(f"{path}: rows do not match header width")
        t = data[:, 0]
        if dt is None:
            if t.size >= 2:
                steps = np.diff(t)
                dt = float(np.mean(steps))
                if dt <= 0 or np.max(np.abs(steps - dt)) > 1e-6 * max(1.0, dt):
                    raise SignalError(f"{path}: time column is not uniformly sampled")
            else:
                dt = 1.0
        return cls(dt=dt, channels={h: data[:, j] for j, h in enumerate(header) if j > 0})


# --------------------------------------------------------------- regions / helpers


@dataclass(frozen=True)
class RegionSpec:
    """Axis-aligned box given by per-axis (lb, ub) bounds in meters."""

    name: str
    x: tuple
    y: tuple
    z: tuple

    def __post_init__(self):
        for axis in ("x", "y", "z"):
            lb, ub = (float(v) for v in getattr(self, axis))
            if not lb < ub:
                raise StlError(f"region {self.name!r}: axis {axis} needs lb < ub, got ({lb}, {ub})")
            object.__setattr__(self, axis, (lb, ub))

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.x[0], self.y[0], self.z[0]])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.x[1], self.y[1], self.z[1]])

    @property
    def center(self) -> np.ndarray:
        return (self.lower + self.upper) / 2.0

    @classmethod
    def from_dict(cls, d: Mapping) -> "RegionSpec":
        return cls(name=d["name"], x=tuple(d["x"]), y=tuple(d["y"]), z=tuple(d["z"]))

    def to_dict(self) -> dict:
        return {"name": self.name, "x": list(self.x), "y": list(self.y), "z": list(self.z)}


def region_predicates(r: RegionSpec, channels=("x", "y", "z")) -> list:
    if len(channels) != 3 or not all(channels):
        raise StlError("region needs three channel names")
    return [
        Predicate(f"{r.name}_{axis}", ch, "band", lb=b[0], ub=b[1])
        for axis, ch, b in zip("xyz", channels, (r.x, r.y, r.z))
    ]


def region_to_formula(r: RegionSpec, channels=("x", "y", "z")) -> And:
    """Conjunction of one band predicate per axis."""
    return And(tuple(Pred(p) for p in region_predicates(r, channels)))


def window_offsets(interval: Interval, dt: float, k: int) -> tuple:
    """Sample offsets (A, B) such that [t+a, t+b] covers samples i+A .. i+B."""
    if interval is None:
        return 0, k
    a, b = interval
    return math.ceil(a / dt - GRID_EPS), math.floor(b / dt + GRID_EPS)


# ------------------------------------------------------------------------- parser

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<number>[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_.]*)
  | (?P<punct>[()\[\],])
    """,
    re.VERBOSE,
)

_KEYWORDS = {"and", "or", "not", "F", "G", "U"}


@dataclass
class _Token:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list:
    tokens, pos, line, line_start = [], 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise StlSyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        tok = m.group()
        if kind == "ws":
            for i, ch in enumerate(tok):
                if ch == "\n":
                    line += 1
                    line_start = pos + i + 1
        else:
            if kind == "ident" and tok in _KEYWORDS:
                kind = "kw"
            tokens.append(_Token(kind, tok, line, pos - line_start + 1))
        pos = m.end()
    tokens.append(_Token("eof", "", line, pos - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, text: str, table: Mapping):
        self.toks = _tokenize(text)
        self.i = 0
        self.table = table

    @property
    def tok(self) -> _Token:
        return self.toks[self.i]

    def error(self, msg, tok=None):
        tok = tok or self.tok
        return StlSyntaxError(msg, tok.line, tok.col)

    def accept(self, text):
        if self.tok.text == text and self.tok.kind in ("kw", "punct"):
            self.i += 1
            return True
        return False

    def expect(self, text):
        if not self.accept(text):
            found = self.tok.text or "end of input"
            raise self.error(f"expected {text!r}, found {found!r}")

    def parse(self):
        phi = self.formula()
        if self.tok.kind != "eof":
            raise self.error(f"unexpected {self.tok.text!r}")
        return phi

    def formula(self):
        return self.disjunction()

    def disjunction(self):
        items = [self.conjunction()]
        while self.accept("or"):
            items.append(self.conjunction())
        return items[0] if len(items) == 1 else Or(tuple(items))

    def conjunction(self):
        items = [self.unary()]
        while self.accept("and"):
            items.append(self.unary())
        return items[0] if len(items) == 1 else And(tuple(items))

    def unary(self):
        if self.accept("not"):
            return Not(self.unary())
        if self.tok.kind == "kw" and self.tok.text in ("F", "G", "U"):
            return self.temporal()
        return self.atom()

    def number(self):
        tok = self.tok
        if tok.kind != "number":
            raise self.error(f"expected a number, found {tok.text or 'end of input'!r}")
        self.i += 1
        return float(tok.text)

    def interval(self):
        start = self.tok
        self.expect("[")
        a = self.number()
        self.expect(",")
        b = self.number()
        self.expect("]")
        try:
            return _check_interval((a, b))
        except IntervalError as exc:
            raise IntervalError(f"{exc} (line {start.line}, column {start.col})") from None

    def temporal(self):
        op = self.tok.text
        self.i += 1
        if op == "U":
            if self.tok.text != "[":
                raise self.error("until requires an interval")
            iv = self.interval()
            self.expect("(")
            left = self.formula()
            self.expect(",")
            right = self.formula()
            self.expect(")")
            return Until(iv, left, right)
        iv = self.interval() if self.tok.text == "[" else None
        self.expect("(")
        child = self.formula()
        self.expect(")")
        return Eventually(iv, child) if op == "F" else Globally(iv, child)

    def atom(self):
        tok = self.tok
        if tok.kind == "ident":
            self.i += 1
            try:
                entry = self.table[tok.text]
            except KeyError:
                raise UnknownPredicateError(
                    f"unknown predicate {tok.text!r} (line {tok.line}, column {tok.col})"
                ) from None
            return Pred(entry) if isinstance(entry, Predicate) else entry
        if self.accept("("):
            phi = self.formula()
            self.expect(")")
            return phi
        raise self.error(f"unexpected {tok.text or 'end of input'!r}")


def parse_stl(text: str, predicate_table: Mapping) -> Formula:
    """Parse STL text.

    ``predicate_table`` maps identifiers to a :class:`Predicate` or to a whole
    formula (e.g. a region conjunction), which is substituted in place.
    """
    return _Parser(text, predicate_table).parse()


# ------------------------------------------------------------------------ printer


def _num(v: float) -> str:
    s = f"{v:g}"
    return s if float(s) == v else repr(v)


def _iv(interval) -> str:
    return "" if interval is None else f"[{_num(interval[0])},{_num(interval[1])}]"


def to_text(phi: Formula) -> str:
    """Pretty-print; ``parse_stl(to_text(phi), table)`` rebuilds ``phi``."""
    if isinstance(phi, Pred):
        return phi.pred.name
    if isinstance(phi, Not):
        inner = to_text(phi.child)
        if isinstance(phi.child, (And, Or)):
            inner = f"({inner})"
        return f"not {inner}"
    if isinstance(phi, (And, Or)):
        sep = " and " if isinstance(phi, And) else " or "
        parts = []
        for c in phi.children:
            s = to_text(c)
            if isinstance(c, (And, Or)):
                s = f"({s})"
            parts.append(s)
        return sep.join(parts)
    if isinstance(phi, Globally):
        return f"G{_iv(phi.interval)}({to_text(phi.child)})"
    if isinstance(phi, Eventually):
        return f"F{_iv(phi.interval)}({to_text(phi.child)})"
    if isinstance(phi, Until):
        return f"U{_iv(phi.interval)}({to_text(phi.left)}, {to_text(phi.right)})"
    raise TypeError(f"not a formula: {phi!r}")


def top_clauses(phi: Formula) -> list:
    """Operands of a top-level conjunction, or ``[phi]``."""
    return list(phi.children) if isinstance(phi, And) else [phi]


# ------------------------------------------------------------------ boolean oracle


def _window(i, interval, dt, k):
    A, B = window_offsets(interval, dt, k)
    lo, hi = max(i + A, 0), min(i + B, k)
    if lo > hi:
        raise EmptyWindowError(f"temporal window at sample {i} lies outside the signal")
    return lo, hi


def _sat(phi, s: Signal, i: int) -> bool:
    # Plain pointwise recursion.  Every operand is evaluated (no short-circuit)
    # so that window errors surface exactly as in the quantitative semantics.
    if isinstance(phi, Pred):
        return bool(phi.pred.margin(s[phi.pred.channel][i]) > 0)
    if isinstance(phi, Not):
        return not _sat(phi.child, s, i)
    if isinstance(phi, And):
        vals = [_sat(c, s, i) for c in phi.children]
        return all(vals)
    if isinstance(phi, Or):
        vals = [_sat(c, s, i) for c in phi.children]
        return any(vals)
    if isinstance(phi, (Globally, Eventually)):
        lo, hi = _window(i, phi.interval, s.dt, s.k)
        vals = [_sat(phi.child, s, j) for j in range(lo, hi + 1)]
        return all(vals) if isinstance(phi, Globally) else any(vals)
    if isinstance(phi, Until):
        lo, hi = _window(i, phi.interval, s.dt, s.k)
        left = [_sat(phi.left, s, j) for j in range(i, hi)]
        right = [_sat(phi.right, s, j) for j in range(lo, hi + 1)]
        for tp in range(lo, hi + 1):
            if right[tp - lo] and all(left[: tp - i]):
                return True
        return False
    raise TypeError(f"not a formula: {phi!r}")


def sat_bool(phi: Formula, s: Signal, t: float = 0.0) -> bool:
    """Boolean satisfaction of ``phi`` by ``s`` at time ``t``."""
    for p in predicates(phi):
        s[p.channel]
    return _sat(phi, s, s.index_of(t))


def load_predicate_table(spec: Mapping, regions: Sequence = ()) -> dict:
    """Build a parser table from a JSON-style mapping.

    Entries are either predicate dicts (``channel``, ``kind``, bounds) or
    ``{"region": name}`` which expands to the region's axis conjunction.
    The axis predicates ``<region>_x`` etc. are also registered so printed
    formulas re-parse.
    """
    by_name = {r.name: r for r in regions}
    table: dict = {}
    for name, entry in spec.items():
        if "region" in entry:
            rname = entry["region"]
            if rname not in by_name:
                raise UnknownPredicateError(f"predicate {name!r} refers to unknown region {rname!r}")
            chans = tuple(entry.get("channels", ("x", "y", "z")))
            preds = region_predicates(by_name[rname], chans)
            for p in preds:
                table.setdefault(p.name, p)
            table[name] = And(tuple(Pred(p) for p in preds))
        else:
            table[name] = Predicate.from_dict(name, entry)
    return table
