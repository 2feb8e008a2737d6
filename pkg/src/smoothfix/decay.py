"""Decay profiles h for Poisson shot-noise weights X_i = h(tau_i).

A profile is right-continuous, nonincreasing and integrable on [0, inf).
Two concrete families cover everything the package needs:

* ``SegmentDecay``: piecewise made of constant pieces and exponential
  pieces ``a * exp(-(t - start) / d)``. Exponential decay, step profiles
  and every profile generated from a law made of atoms and uniform pieces
  fall in this family, and all functionals have closed forms.
* ``TabulatedDecay``: linear interpolation of a nonincreasing table,
  zero after the last knot.

Every functional used elsewhere (power integrals, generalized inverse,
capped area, certified truncation horizon, power-biased arrival times)
is evaluated in closed form segment by segment.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import brentq

from .errors import ConfigError, HorizonUnbounded

DEFAULT_MAX_HORIZON = 1e7


class DecayProfile:
    """Interface shared by the concrete profiles."""

    h0: float
    support_end: float

    def __call__(self, t):
        raise NotImplementedError

    def inverse(self, z):
        raise NotImplementedError

    def integral(self) -> float:
        return self.power_integral(1.0)

    def tail_integral(self, T: float) -> float:
        raise NotImplementedError

    def power_integral(self, beta: float) -> float:
        raise NotImplementedError

    def power_log_integral(self, beta: float) -> float:
        raise NotImplementedError

    def min_integral(self, x):
        raise NotImplementedError

    def horizon(self, tol: float, max_horizon: float = DEFAULT_MAX_HORIZON) -> float:
        raise NotImplementedError

    def sample_power_biased_times(self, beta, size, rng):
        raise NotImplementedError

    def breakpoints(self) -> list[float]:
        raise NotImplementedError

    def is_unit_step(self) -> bool:
        return False

    def to_json(self) -> dict:
        raise NotImplementedError


class SegmentDecay(DecayProfile):
    """Concatenation of constant and exponential pieces starting at t = 0.

    Each segment is ``(length, kind, a, d)`` with kind ``"const"`` (value a)
    or ``"exp"`` (value ``a * exp(-u / d)`` at offset u). Only the final
    segment may have infinite length, and then it must be exponential.
    """

    def __init__(self, segments):
        segs = []
        start = 0.0
        prev_end_value = math.inf
        for raw in segments:
            length, kind, a, d = raw
            length = float(length)
            a = float(a)
            d = float(d) if d is not None else 0.0
            if kind not in ("const", "exp"):
                raise ConfigError(f"unknown segment kind {kind!r}")
            if not length > 0.0:
                continue
            if a < 0.0:
                raise ConfigError("decay values must be nonnegative")
            if a > prev_end_value * (1 + 1e-12):
                raise ConfigError("decay profile must be nonincreasing")
            if math.isinf(length) and kind != "exp":
                raise ConfigError("only an exponential piece may extend to infinity")
            if kind == "exp" and not d > 0.0:
                raise ConfigError("exponential piece needs positive scale d")
            end = start + length
            segs.append((start, end, kind, a, d))
            prev_end_value = a if kind == "const" else a * math.exp(-length / d)
            start = end
            if math.isinf(end):
                break
        self.segments = tuple(segs)
        self.support_end = start if segs else 0.0
        self.h0 = segs[0][3] if segs else 0.0
        self._starts = np.array([s[0] for s in segs])

    # evaluation -----------------------------------------------------
    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape)
        for start, end, kind, a, d in self.segments:
            m = (t >= start) & (t < end) if start > 0 else (t < end)
            if not np.any(m):
                continue
            if kind == "const":
                out[m] = a
            else:
                out[m] = a * np.exp(-(np.maximum(t[m], start) - start) / d)
        return out if out.ndim else float(out)

    def inverse(self, z):
        z = np.asarray(z, dtype=float)
        out = np.full(z.shape, self.support_end)
        done = z >= self.h0
        out[done] = 0.0
        out[z <= 0.0] = math.inf
        done = done | (z <= 0.0)
        for start, end, kind, a, d in self.segments:
            if kind == "const":
                m = ~done & (a < z)
                out[m] = start
            else:
                low = 0.0 if math.isinf(end) else a * math.exp(-(end - start) / d)
                m = ~done & (low < z)
                below = m & (a < z)
                out[below] = start
                inside = m & ~(a < z)
                out[inside] = start + d * np.log(a / z[inside])
            done = done | m
        return out if out.ndim else float(out)

    # integrals ------------------------------------------------------
    def power_integral(self, beta: float) -> float:
        total = 0.0
        for start, end, kind, a, d in self.segments:
            length = end - start
            if a == 0.0:
                continue
            if kind == "const":
                total += a**beta * length
            else:
                total += a**beta * (d / beta) * -math.expm1(-beta * length / d)
        return total

    def power_log_integral(self, beta: float) -> float:
        total = 0.0
        for start, end, kind, a, d in self.segments:
            length = end - start
            if a == 0.0:
                continue
            if kind == "const":
                total += a**beta * math.log(a) * length
            else:
                k = beta / d
                first = math.log(a) * -math.expm1(-k * length) / k
                if math.isinf(length):
                    second = 1.0 / k**2
                else:
                    second = (1.0 - math.exp(-k * length) * (1.0 + k * length)) / k**2
                total += a**beta * (first - second / d)
        return total

    def tail_integral(self, T: float) -> float:
        total = 0.0
        for start, end, kind, a, d in self.segments:
            if end <= T:
                continue
            lo = max(start, T)
            if kind == "const":
                total += a * (end - lo)
            else:
                v_lo = a * math.exp(-(lo - start) / d)
                v_hi = 0.0 if math.isinf(end) else a * math.exp(-(end - start) / d)
                total += d * (v_lo - v_hi)
        return total

    def min_integral(self, x):
        x = np.asarray(x, dtype=float)
        total = np.zeros(x.shape)
        for start, end, kind, a, d in self.segments:
            length = end - start
            if kind == "const":
                total += np.minimum(a, x) * length
                continue
            with np.errstate(divide="ignore"):
                ustar = np.where(a > x, d * np.log(a / np.maximum(x, 1e-300)), 0.0)
            u1 = np.minimum(ustar, length)
            tail_end = 0.0 if math.isinf(length) else math.exp(-length / d)
            capped = np.where(u1 > 0, x * u1, 0.0)
            total += capped + a * d * (np.exp(-u1 / d) - tail_end)
        return total if total.ndim else float(total)

    def horizon(self, tol: float, max_horizon: float = DEFAULT_MAX_HORIZON) -> float:
        if tol <= 0:
            raise ValueError("tol must be positive")
        if self.tail_integral(0.0) <= tol:
            return 0.0
        rest = 0.0
        for start, end, kind, a, d in reversed(self.segments):
            seg_total = self.tail_integral(start) - rest
            if rest + seg_total > tol:
                need = tol - rest
                if kind == "const":
                    T = end - need / a
                else:
                    v_end = 0.0 if math.isinf(end) else a * math.exp(-(end - start) / d)
                    T = start + d * math.log(a / (need / d + v_end))
                T = min(max(T, start), end)
                if T > max_horizon:
                    raise HorizonUnbounded(
                        f"truncation horizon {T:.3g} exceeds the configured maximum {max_horizon:.3g}"
                    )
                return float(T)
            rest += seg_total
        return 0.0

    # sampling -------------------------------------------------------
    def sample_power_biased_times(self, beta, size, rng):
        masses = []
        for start, end, kind, a, d in self.segments:
            length = end - start
            if kind == "const":
                masses.append(a**beta * length)
            else:
                masses.append(a**beta * (d / beta) * -math.expm1(-beta * length / d))
        masses = np.array(masses)
        idx = rng.choice(len(masses), size=size, p=masses / masses.sum())
        u = rng.random(size)
        out = np.empty(size)
        for j, (start, end, kind, a, d) in enumerate(self.segments):
            m = idx == j
            if not np.any(m):
                continue
            length = end - start
            if kind == "const":
                out[m] = start + u[m] * length
            else:
                k = beta / d
                frac = -math.expm1(-k * length)
                out[m] = start - np.log1p(-u[m] * frac) / k
        return out

    def breakpoints(self):
        return [s[0] for s in self.segments] + ([self.support_end] if math.isfinite(self.support_end) else [])

    def is_unit_step(self) -> bool:
        return bool(self.segments) and all(k == "const" and a == 1.0 for _, _, k, a, _ in self.segments)

    def to_json(self):
        return {"segments": [[end - start if math.isfinite(end) else "inf", kind, a, d]
                             for start, end, kind, a, d in self.segments]}


class ExpDecay(SegmentDecay):
    """h(t) = scale * exp(-rate * t)."""

    def __init__(self, rate: float = 1.0, scale: float = 1.0):
        if not rate > 0 or not scale > 0:
            raise ConfigError("exponential decay needs positive rate and scale")
        self.rate = float(rate)
        self.scale = float(scale)
        super().__init__([(math.inf, "exp", scale, 1.0 / rate)])

    def to_json(self):
        return {"name": "exp", "rate": self.rate, "scale": self.scale}


class StepDecay(SegmentDecay):
    """h = height on [0, length), zero afterwards."""

    def __init__(self, height: float, length: float):
        if not height > 0 or not length > 0:
            raise ConfigError("step decay needs positive height and length")
        self.height = float(height)
        self.length = float(length)
        super().__init__([(length, "const", height, None)])

    def to_json(self):
        return {"name": "step", "height": self.height, "length": self.length}


class TabulatedDecay(DecayProfile):
    """Linear interpolation through nonincreasing knots (t_j, h_j), zero after."""

    def __init__(self, t, h):
        t = np.asarray(t, dtype=float)
        h = np.asarray(h, dtype=float)
        if t.ndim != 1 or t.shape != h.shape or t.size < 2:
            raise ConfigError("tabulated decay needs matching 1-d arrays with at least two knots")
        if np.any(np.diff(t) <= 0):
            raise ConfigError("tabulated decay arguments must increase strictly")
        if np.any(np.diff(h) > 0) or np.any(h < 0):
            raise ConfigError("tabulated decay values must be nonnegative and nonincreasing")
        if t[0] < 0:
            raise ConfigError("tabulated decay must start at t >= 0")
        if t[0] > 0:
            t = np.concatenate([[0.0], t])
            h = np.concatenate([[h[0]], h])
        self.t = t
        self.h = h
        self.h0 = float(h[0])
        self.support_end = float(t[-1])
        self._len = np.diff(t)
        self._a = h[:-1]
        self._b = h[1:]

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.interp(t, self.t, self.h)
        out = np.where(t >= self.support_end, 0.0, out)
        return out if out.ndim else float(out)

    def inverse(self, z):
        z = np.asarray(z, dtype=float)
        j = np.searchsorted(-self.h, -z, side="right")
        out = np.full(z.shape, self.support_end)
        mid = (j > 0) & (j < self.h.size)
        jm = j[mid]
        a, b = self.h[jm - 1], self.h[jm]
        t0, t1 = self.t[jm - 1], self.t[jm]
        out[mid] = t0 + (a - z[mid]) / (a - b) * (t1 - t0)
        out[z >= self.h0] = 0.0
        out[z <= 0.0] = math.inf
        return out if out.ndim else float(out)

    def _segment_power(self, beta):
        a, b, L = self._a, self._b, self._len
        flat = np.isclose(a, b, rtol=0, atol=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = (b - a) / L
            sloped = (b ** (beta + 1) - a ** (beta + 1)) / ((beta + 1) * slope)
        return np.where(flat, a**beta * L, sloped)

    def power_integral(self, beta: float) -> float:
        return float(np.sum(self._segment_power(beta)))

    def power_log_integral(self, beta: float) -> float:
        a, b, L = self._a, self._b, self._len

        def anti(y):
            with np.errstate(divide="ignore", invalid="ignore"):
                v = y ** (beta + 1) * (np.log(y) / (beta + 1) - 1.0 / (beta + 1) ** 2)
            return np.where(y > 0, v, 0.0)

        flat = a == b
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = (b - a) / L
            sloped = (anti(b) - anti(a)) / slope
            flat_v = np.where(a > 0, a**beta * np.log(np.where(a > 0, a, 1.0)) * L, 0.0)
        return float(np.sum(np.where(flat, flat_v, sloped)))

    def tail_integral(self, T: float) -> float:
        if T >= self.support_end:
            return 0.0
        T = max(T, 0.0)
        j = int(np.searchsorted(self.t, T, side="right")) - 1
        hT = float(self(T))
        partial = 0.5 * (hT + self.h[j + 1]) * (self.t[j + 1] - T)
        rest = float(np.sum(0.5 * (self._a[j + 1:] + self._b[j + 1:]) * self._len[j + 1:]))
        return partial + rest

    def min_integral(self, x):
        x = np.asarray(x, dtype=float)
        a = self._a[None, :]
        b = self._b[None, :]
        L = self._len[None, :]
        xx = x.reshape(-1)[:, None]
        full = 0.5 * (a + b) * L
        with np.errstate(divide="ignore", invalid="ignore"):
            ustar = np.where(a > b, (a - xx) / (a - b) * L, 0.0)
            crossing = xx * ustar + 0.5 * (xx + b) * (L - ustar)
        val = np.where(a <= xx, full, np.where(b >= xx, xx * L, crossing))
        out = val.sum(axis=1).reshape(x.shape)
        return out if out.ndim else float(out)

    def horizon(self, tol: float, max_horizon: float = DEFAULT_MAX_HORIZON) -> float:
        if tol <= 0:
            raise ValueError("tol must be positive")
        if self.tail_integral(0.0) <= tol:
            return 0.0
        T = brentq(lambda s: self.tail_integral(s) - tol, 0.0, self.support_end, xtol=1e-13)
        if T > max_horizon:
            raise HorizonUnbounded(f"truncation horizon {T:.3g} exceeds {max_horizon:.3g}")
        return float(T)

    def sample_power_biased_times(self, beta, size, rng):
        masses = self._segment_power(beta)
        idx = rng.choice(masses.size, size=size, p=masses / masses.sum())
        u = rng.random(size)
        a, b, L = self._a[idx], self._b[idx], self._len[idx]
        flat = a == b
        with np.errstate(divide="ignore", invalid="ignore"):
            y = (a ** (beta + 1) + u * (b ** (beta + 1) - a ** (beta + 1))) ** (1.0 / (beta + 1))
            off = (y - a) / (b - a) * L
        off = np.where(flat, u * L, off)
        return self.t[idx] + off

    def breakpoints(self):
        return list(self.t)

    def is_unit_step(self) -> bool:
        return bool(np.all(self.h == 1.0))

    def to_json(self):
        return {"t": [float(v) for v in self.t], "h": [float(v) for v in self.h]}


def decay_from_json(obj) -> DecayProfile:
    if isinstance(obj, DecayProfile):
        return obj
    if not isinstance(obj, dict):
        raise ConfigError("decay profile must be a JSON object")
    name = obj.get("name")
    if name in ("exp", "exponential"):
        return ExpDecay(float(obj.get("rate", 1.0)), float(obj.get("scale", 1.0)))
    if name == "step":
        return StepDecay(float(obj["height"]), float(obj["length"]))
    if "t" in obj and "h" in obj:
        return TabulatedDecay(obj["t"], obj["h"])
    if "segments" in obj:
        segs = []
        for length, kind, a, d in obj["segments"]:
            segs.append((math.inf if length == "inf" else float(length), kind, a, d))
        return SegmentDecay(segs)
    raise ConfigError(f"unrecognized decay profile {obj!r}")
