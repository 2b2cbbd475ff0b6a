"""Arrival-rate functions with exact cumulative arrivals E(t)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class ArrivalRate:
    """lambda(t) >= 0 of one of three forms.

    ``constant``: value; ``piecewise``: values[i] on [times[i], times[i+1]) with
    times[0] = 0 and the last value held forever; ``sinusoid``:
    max(a + b sin(c t + phi), 0).
    """

    kind: str
    value: float = 0.0
    times: tuple = field(default_factory=tuple)
    values: tuple = field(default_factory=tuple)
    a: float = 0.0
    b: float = 0.0
    c: float = 1.0
    phi: float = 0.0

    def __post_init__(self):
        if self.kind == "constant":
            if not self.value >= 0:
                raise ConfigError("arrival rate must be nonnegative")
        elif self.kind == "piecewise":
            t = np.asarray(self.times, dtype=float)
            v = np.asarray(self.values, dtype=float)
            if t.size == 0 or t.shape != v.shape or t[0] != 0 or np.any(np.diff(t) <= 0):
                raise ConfigError("piecewise rate needs increasing times starting at 0, one value each")
            if np.any(v < 0):
                raise ConfigError("arrival rate must be nonnegative")
            cum = np.concatenate([[0.0], np.cumsum(v[:-1] * np.diff(t))])
            object.__setattr__(self, "_t", t)
            object.__setattr__(self, "_v", v)
            object.__setattr__(self, "_cum", cum)
        elif self.kind == "sinusoid":
            if not self.c > 0:
                raise ConfigError("sinusoid frequency c must be positive")
        else:
            raise ConfigError(f"unknown arrival-rate kind {self.kind!r}")

    @classmethod
    def constant(cls, value: float) -> "ArrivalRate":
        return cls("constant", value=float(value))

    @classmethod
    def piecewise(cls, times, values) -> "ArrivalRate":
        return cls("piecewise", times=tuple(map(float, times)), values=tuple(map(float, values)))

    @classmethod
    def sinusoid(cls, a, b, c, phi=0.0) -> "ArrivalRate":
        return cls("sinusoid", a=float(a), b=float(b), c=float(c), phi=float(phi))

    @classmethod
    def from_spec(cls, spec) -> "ArrivalRate":
        if isinstance(spec, (int, float)):
            return cls.constant(spec)
        if not isinstance(spec, dict) or "kind" not in spec:
            raise ConfigError(f"arrival spec needs a 'kind': {spec!r}")
        allowed = {"constant": {"value"}, "piecewise": {"times", "values"},
                   "sinusoid": {"a", "b", "c", "phi"}}
        kind = spec["kind"]
        if kind not in allowed:
            raise ConfigError(f"unknown arrival-rate kind {kind!r}")
        extra = set(spec) - allowed[kind] - {"kind"}
        if extra:
            raise ConfigError(f"unknown keys for {kind} arrivals: {sorted(extra)}")
        try:
            if kind == "constant":
                return cls.constant(spec["value"])
            if kind == "piecewise":
                return cls.piecewise(spec["times"], spec["values"])
            return cls.sinusoid(spec["a"], spec["b"], spec["c"], spec.get("phi", 0.0))
        except KeyError as exc:
            raise ConfigError(f"missing arrival parameter {exc}") from None

    def to_spec(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "value": self.value}
        if self.kind == "piecewise":
            return {"kind": "piecewise", "times": list(self.times), "values": list(self.values)}
        return {"kind": "sinusoid", "a": self.a, "b": self.b, "c": self.c, "phi": self.phi}

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant" or (self.kind == "piecewise" and len(set(self.values)) == 1)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            out = np.full_like(t, self.value)
        elif self.kind == "piecewise":
            idx = np.clip(np.searchsorted(self._t, t, side="right") - 1, 0, self._v.size - 1)
            out = self._v[idx]
        else:
            out = np.maximum(self.a + self.b * np.sin(self.c * t + self.phi), 0.0)
        return float(out) if out.ndim == 0 else out

    def cumulative(self, t):
        """E(t) = int_0^t lambda(s) ds, exact."""
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            out = self.value * t
        elif self.kind == "piecewise":
            idx = np.clip(np.searchsorted(self._t, t, side="right") - 1, 0, self._v.size - 1)
            out = self._cum[idx] + self._v[idx] * (t - self._t[idx])
        else:
            out = (self._sin_primitive(self.c * t + self.phi) - self._sin_primitive(self.phi)) / self.c
        return float(out) if np.ndim(out) == 0 else out

    def _sin_primitive(self, u):
        """A primitive in u of max(a + b sin u, 0)."""
        a, b = self.a, self.b
        u = np.asarray(u, dtype=float)
        if b < 0:
            # a + b sin u = a + |b| sin(u + pi)
            return ArrivalRate.sinusoid(a, -b, 1.0)._sin_primitive(u + math.pi)
        if a >= b:
            return a * u - b * np.cos(u)
        if a <= -b:
            return np.zeros_like(u)
        beta = math.asin(-a / b)
        width = math.pi - 2.0 * beta
        period_int = a * width + 2.0 * b * math.cos(beta)
        n = np.floor((u - beta) / (2.0 * math.pi))
        r = u - beta - 2.0 * math.pi * n
        top = beta + np.minimum(r, width)
        part = a * (top - beta) - b * (np.cos(top) - math.cos(beta))
        return n * period_int + part

    def sup(self, T: float) -> float:
        """An upper bound for lambda on [0, T]."""
        if self.kind == "constant":
            return self.value
        if self.kind == "piecewise":
            idx = int(np.searchsorted(self._t, T, side="right"))
            return float(self._v[: max(idx, 1)].max())
        return max(self.a + abs(self.b), 0.0)

    def jump_times(self, T: float) -> np.ndarray:
        if self.kind != "piecewise":
            return np.zeros(0)
        return self._t[(self._t > 0) & (self._t <= T)]
