"""Singular two-parameter kernels on triangle domains.

A :class:`Kernel` is a nonnegative weight k(t, s) on one of the two open
triangles

* causal:      0 <= s < t <= T   (weights multiplying forward integrals),
* anticausal:  0 <= t < s <= T   (weights multiplying backward integrals),

allowed to blow up only on the boundary lines s = t, s = 0, t = 0, t = T.
The module provides constructors for the standard singular families
(fractional, doubly singular, convolution, fractional-Brownian,
exponential sums), product-integration cell weights, slice norms, the
square-integrability / partitionable-slice / bounded-sliding-slice
classifications, and JSON-serializable classification reports.

Conventions
-----------
The "slice" at a point x always fixes the *smaller* time variable and
integrates the larger one: for anticausal kernels slice(x, b) integrates
k(x, s)^2 over s in (x, b]; for causal kernels it integrates k(t, x)^2
over t in (x, b].  All classification quantities are numerical estimates
on refined grids and are reported together with the grids and tolerances
used; they are falsifiable measurements, never certificates.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy import integrate
from scipy import special as sps

from .special import gamma_fn, mittag_leffler  # noqa: F401 (re-export)

CAUSAL = "causal"
ANTICAUSAL = "anticausal"

DEFAULT_EPS_GRID = (1.0, 0.5, 0.25, 0.125)
DEFAULT_BREAKPOINT_CAP = 4096
_GROWTH_FACTOR = 1.5  # refinement growth ratio that flags a divergent integral
_BISECT_MARGIN = 1e-3  # relative shrink applied to greedy breakpoints


class KernelEvalError(RuntimeError):
    """Kernel evaluation failed strictly inside its domain."""


class QuadratureError(RuntimeError):
    """Adaptive quadrature failed to converge; carries the refinement trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class KernelClassWarning(UserWarning):
    pass


def _power_integral(q: float, lo, hi):
    """Exact integral of r^q dr over [lo, hi], 0 <= lo <= hi; inf if divergent.

    Vectorized over lo/hi; divergence happens exactly when lo = 0 and
    q <= -1.
    """
    lo_a = np.asarray(lo, dtype=float)
    hi_a = np.asarray(hi, dtype=float)
    scalar = lo_a.ndim == 0 and hi_a.ndim == 0
    lo_a, hi_a = np.broadcast_arrays(np.atleast_1d(lo_a), np.atleast_1d(hi_a))
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if q == -1.0:
            out = np.where(lo_a <= 0.0, np.inf, np.log(hi_a / lo_a))
        else:
            p = q + 1.0
            hp = np.power(hi_a, p)
            lp = np.where(lo_a > 0.0, np.power(lo_a, p),
                          0.0 if p > 0.0 else np.inf)
            out = (hp - lp) / p
    out = np.where(hi_a <= lo_a, 0.0, out)
    return float(out[0]) if scalar else out


@dataclass(frozen=True)
class Kernel:
    """Two-parameter nonnegative weight with singularity metadata.

    Parameters
    ----------
    label : str
        Identifier used in reports and configs.
    orientation : str
        ``"causal"`` (domain s < t) or ``"anticausal"`` (domain t < s).
    horizon : float
        Right endpoint T of the time interval.
    eval_fn : callable
        ``eval_fn(t, s)``, vectorized in ``s``; must be finite and
        nonnegative strictly inside the domain.
    singularity_hint : tuple, optional
        ``(diagonal_exponent, edge_exponent)``: the kernel behaves like
        ``|t - s|**-diagonal_exponent`` near the diagonal and like
        ``x**-edge_exponent`` near the zero edge of its smaller variable.
        Drives the product-integration rules.
    cell_fn, cell_sq_fn : callable, optional
        Closed-form ``int_a^b k(t, s) ds`` and ``int_a^b k(t, s)^2 ds``
        over inner-variable cells (may return ``inf``).
    cell_m1_fn : callable, optional
        Closed-form first moment ``int_a^b s * k(t, s) ds``.
    slice_sq_fn : callable, optional
        Closed-form slice integral (see module docstring); only needed for
        causal kernels, anticausal ones reuse ``cell_sq_fn``.  When the
        meta flag ``vector_slices`` is set the hook must accept arrays in
        its first two arguments.
    """

    label: str
    orientation: str
    horizon: float
    eval_fn: Callable
    singularity_hint: Optional[tuple] = None
    cell_fn: Optional[Callable] = None
    cell_sq_fn: Optional[Callable] = None
    cell_m1_fn: Optional[Callable] = None
    slice_sq_fn: Optional[Callable] = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.orientation not in (CAUSAL, ANTICAUSAL):
            raise ValueError(f"unknown orientation {self.orientation!r}")
        if not self.horizon > 0.0:
            raise ValueError("horizon must be positive")
        self._probe()

    def _probe(self):
        # nonnegativity / finiteness spot check strictly inside the domain
        T = self.horizon
        for x in np.array([0.13, 0.41, 0.77]) * T:
            inner = x + np.array([0.11, 0.47, 0.9]) * (T - x) \
                if self.orientation == ANTICAUSAL \
                else np.array([0.11, 0.47, 0.9]) * x
            vals = np.asarray(self.eval_fn(x, inner), dtype=float)
            if not np.all(np.isfinite(vals)):
                raise KernelEvalError(
                    f"kernel {self.label!r} is not finite at interior points")
            if np.any(vals < 0):
                raise ValueError(f"kernel {self.label!r} takes negative values")

    def __call__(self, t, s):
        return self.eval_fn(t, s)

    @property
    def diag_exponent(self) -> float:
        return self.singularity_hint[0] if self.singularity_hint else 0.0

    @property
    def edge_exponent(self) -> float:
        return self.singularity_hint[1] if self.singularity_hint else 0.0

    # -- inner-variable cell integrals (product-integration building blocks) --

    def cell(self, t: float, a: float, b: float) -> float:
        """Exact-or-adaptive integral of k(t, s) ds over the cell [a, b]."""
        if b < a:
            raise ValueError("cell requires a <= b")
        if b == a:
            return 0.0
        if self.cell_fn is not None:
            return float(self.cell_fn(t, a, b))
        return self._numeric_cell(t, a, b, power=1)

    def cell_sq(self, t: float, a: float, b: float) -> float:
        if b < a:
            raise ValueError("cell_sq requires a <= b")
        if b == a:
            return 0.0
        if self.cell_sq_fn is not None:
            return float(self.cell_sq_fn(t, a, b))
        return self._numeric_cell(t, a, b, power=2)

    def cell_m1(self, t: float, a: float, b: float) -> float:
        """First moment int_a^b s k(t, s) ds, used by collocation solvers."""
        if self.cell_m1_fn is not None:
            return float(self.cell_m1_fn(t, a, b))
        return self._numeric_cell(t, a, b, power=1, moment=1)

    def _numeric_cell(self, t, a, b, power, moment=0):
        p = power * self.diag_exponent
        e = power * self.edge_exponent
        left_exp = right_exp = 0.0
        # the diagonal sits at s = t: left end of anticausal cells, right
        # end of causal ones; the zero edge can only touch a = 0
        if self.orientation == ANTICAUSAL:
            if a <= t:
                left_exp = p
        else:
            if b >= t:
                right_exp = p
            if a == 0.0:
                left_exp = e

        def f(s):
            v = float(self.eval_fn(t, s)) ** power
            return v * s ** moment

        return _quad_power_aware(f, a, b, left_exp, right_exp)

    # -- slice integrals (fix the smaller variable, integrate the larger) --

    def slice_sq(self, x: float, a: float, b: float) -> float:
        """Integral of the squared slice at x over [a, b] subset of (x, T]."""
        if b < a:
            raise ValueError("slice_sq requires a <= b")
        if b == a:
            return 0.0
        if self.slice_sq_fn is not None:
            return float(self.slice_sq_fn(x, a, b))
        if self.orientation == ANTICAUSAL:
            return self.cell_sq(x, a, b)
        p = 2.0 * self.diag_exponent
        left_exp = p if a <= x else 0.0

        def f(tau):
            return float(self.eval_fn(tau, x)) ** 2

        return _quad_power_aware(f, a, b, left_exp, 0.0)

    def slice_l2_profile(self, xs: np.ndarray, b: float) -> np.ndarray:
        """Vector of slice L2 norms slice_l2(x, b) over x in xs."""
        xs = np.asarray(xs, dtype=float)
        if self.meta.get("vector_slices"):
            if self.slice_sq_fn is not None:
                v = self.slice_sq_fn(xs, xs, b)
            else:
                v = self.cell_sq_fn(xs, xs, b)
            v = np.asarray(v, dtype=float)
            v = np.where(np.isfinite(v), np.maximum(v, 0.0), np.inf)
            return np.sqrt(v)
        return np.array([slice_l2(self, float(x), b) for x in xs])


def _quad_power_aware(f, a, b, left_exp=0.0, right_exp=0.0):
    """Adaptive quadrature exact for endpoint power singularities.

    The integrand is assumed to behave like (x-a)^-left_exp near a and
    (b-x)^-right_exp near b; nonintegrable exponents return inf directly.
    Negative exponents describe algebraically *vanishing* factors, which
    the weighted rule also integrates exactly.
    """
    if left_exp >= 1.0 or right_exp >= 1.0:
        return math.inf
    if left_exp <= -1.0 or right_exp <= -1.0:
        raise ValueError("weight exponents must exceed -1")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        if left_exp != 0.0 or right_exp != 0.0:
            guard = (b - a) * 1e-15

            def phi(x):
                # f times the compensating powers is smooth up to the
                # boundary; evaluate it a hair inside so the quadrature
                # never forms inf * 0 at the endpoints themselves
                x = min(max(x, a + guard), b - guard)
                return f(x) * (x - a) ** left_exp * (b - x) ** right_exp

            val, _ = integrate.quad(phi, a, b, weight="alg",
                                    wvar=(-left_exp, -right_exp), limit=200)
        else:
            val, _ = integrate.quad(f, a, b, limit=200)
    if not math.isfinite(val):
        return math.inf
    return val


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------

def make_fractional(alpha: float, orientation: str = CAUSAL,
                    horizon: float = 1.0, scale: float = 1.0,
                    label: str = None) -> Kernel:
    """Power kernel scale * lag**(alpha - 1) with lag = |t - s|.

    ``alpha`` may exceed 1, in which case the kernel is bounded.
    """
    if alpha <= 0.0:
        raise ValueError("alpha must be positive")
    if scale < 0.0:
        raise ValueError("scale must be nonnegative")
    anticausal = orientation == ANTICAUSAL

    def ev(t, s):
        lag = (np.asarray(s) - t) if anticausal else (t - np.asarray(s))
        with np.errstate(divide="ignore"):
            return scale * np.power(lag, alpha - 1.0)

    def lag_bounds(t, a, b):
        if anticausal:
            return a - t, b - t
        return t - b, t - a

    def cell(t, a, b):
        lo, hi = lag_bounds(t, a, b)
        return scale * _power_integral(alpha - 1.0, lo, hi)

    def cell_sq(t, a, b):
        lo, hi = lag_bounds(t, a, b)
        return scale ** 2 * _power_integral(2.0 * alpha - 2.0, lo, hi)

    def cell_m1(t, a, b):
        # int s * lag^(alpha-1) ds expressed through lag moments
        lo, hi = lag_bounds(t, a, b)
        m0 = _power_integral(alpha - 1.0, lo, hi)
        m1 = _power_integral(alpha, lo, hi)
        return scale * (t * m0 + m1) if anticausal else scale * (t * m0 - m1)

    def slice_sq(x, a, b):
        # slices run along the lag in both orientations
        x_a = np.asarray(x, dtype=float)
        return scale ** 2 * _power_integral(2.0 * alpha - 2.0,
                                            np.asarray(a) - x_a,
                                            np.asarray(b) - x_a)

    hint = (max(1.0 - alpha, 0.0), 0.0)
    return Kernel(label or f"fractional(alpha={alpha})", orientation, horizon,
                  ev, hint, cell, cell_sq, cell_m1, slice_sq_fn=slice_sq,
                  meta={"family": "fractional", "alpha": alpha,
                        "scale": scale, "vector_slices": True})


def make_doubly_singular(alpha: float, beta: float,
                         orientation: str = ANTICAUSAL,
                         horizon: float = 1.0, label: str = None) -> Kernel:
    """Kernel lag**(-alpha) * x**(-beta) with x the smaller time variable."""
    if not (0.0 <= alpha < 1.0 and 0.0 <= beta < 1.0):
        raise ValueError("alpha, beta must lie in [0, 1)")
    anticausal = orientation == ANTICAUSAL

    def ev(t, s):
        s = np.asarray(s, dtype=float)
        if anticausal:
            lag, edge = s - t, t
        else:
            lag, edge = t - s, s
        with np.errstate(divide="ignore"):
            return np.power(lag, -alpha) * np.power(edge, -beta)

    def slice_sq(x, a, b):
        # same closed form in both orientations: the edge factor is frozen
        x_a = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            edge = np.power(x_a, -2.0 * beta)
        return edge * _power_integral(-2.0 * alpha, np.asarray(a) - x_a,
                                      np.asarray(b) - x_a)

    kwargs = {}
    if anticausal:
        def cell(t, a, b):
            if t == 0.0 and beta > 0.0:
                return math.inf
            return t ** -beta * _power_integral(-alpha, a - t, b - t)

        kwargs = dict(cell_fn=cell, cell_sq_fn=slice_sq)
    elif max(2.0 * alpha, 2.0 * beta) < 1.0:
        # incomplete-Beta closed forms for the causal variant
        def cell(t, a, b):
            base = t ** (1.0 - alpha - beta) * sps.beta(1.0 - beta, 1.0 - alpha)
            return base * (sps.betainc(1.0 - beta, 1.0 - alpha, min(b / t, 1.0))
                           - sps.betainc(1.0 - beta, 1.0 - alpha, a / t))

        def cell_sq(t, a, b):
            base = t ** (1.0 - 2 * alpha - 2 * beta) \
                * sps.beta(1.0 - 2 * beta, 1.0 - 2 * alpha)
            return base * (sps.betainc(1 - 2 * beta, 1 - 2 * alpha,
                                       min(b / t, 1.0))
                           - sps.betainc(1 - 2 * beta, 1 - 2 * alpha, a / t))

        kwargs = dict(cell_fn=cell, cell_sq_fn=cell_sq)

    return Kernel(label or f"doubly_singular(alpha={alpha},beta={beta})",
                  orientation, horizon, ev, (alpha, beta),
                  slice_sq_fn=slice_sq,
                  meta={"family": "doubly_singular", "alpha": alpha,
                        "beta": beta, "vector_slices": True},
                  **kwargs)


def make_convolution(h: Callable, horizon: float = 1.0,
                     orientation: str = CAUSAL,
                     square_integrable: bool = True,
                     h_antiderivative: Callable = None,
                     h_sq_antiderivative: Callable = None,
                     diag_exponent: float = 0.0,
                     label: str = None) -> Kernel:
    """Convolution kernel h(lag) with lag = |t - s|.

    ``h_antiderivative(r)`` = int_0^r h(u) du and ``h_sq_antiderivative``
    its squared counterpart, when available, give exact cell weights and
    slice integrals (including exact divergence flags at the boundary);
    the squared one must accept numpy arrays.  ``diag_exponent`` hints the
    blow-up of h at lag 0 for the numeric path.
    """
    def ev(t, s):
        lag = (np.asarray(s) - t) if orientation == ANTICAUSAL \
            else (t - np.asarray(s))
        return h(lag)

    cell = None
    if h_antiderivative is not None:
        if orientation == ANTICAUSAL:
            def cell(t, a, b):
                return h_antiderivative(b - t) - h_antiderivative(a - t)
        else:
            def cell(t, a, b):
                return h_antiderivative(t - a) - h_antiderivative(t - b)

    slice_sq = None
    vector = False
    if h_sq_antiderivative is not None:
        def slice_sq(x, a, b):
            x_a = np.asarray(x, dtype=float)
            return (np.asarray(h_sq_antiderivative(np.asarray(b) - x_a))
                    - np.asarray(h_sq_antiderivative(np.asarray(a) - x_a)))
        vector = True

    return Kernel(label or "convolution", orientation, horizon, ev,
                  (diag_exponent, 0.0), cell_fn=cell, slice_sq_fn=slice_sq,
                  meta={"family": "convolution", "h": h,
                        "h_antiderivative": h_antiderivative,
                        "h_sq_antiderivative": h_sq_antiderivative,
                        "diag_exponent": diag_exponent,
                        "square_integrable": bool(square_integrable),
                        "vector_slices": vector})


def make_exp_sum(weights, rates, horizon: float = 1.0,
                 orientation: str = CAUSAL, label: str = None) -> Kernel:
    """Completely monotone representative sum_i w_i exp(-rate_i * lag)."""
    w = np.asarray(weights, dtype=float)
    lam = np.asarray(rates, dtype=float)
    if w.shape != lam.shape or w.ndim != 1:
        raise ValueError("weights and rates must be 1-d of equal length")
    if np.any(w < 0):
        raise ValueError("completely monotone representation needs w_i >= 0")
    anticausal = orientation == ANTICAUSAL

    def ev(t, s):
        lag = (np.asarray(s) - t) if anticausal else (t - np.asarray(s))
        lag = np.asarray(lag, dtype=float)
        return np.einsum("i,i...->...", w,
                         np.exp(-np.multiply.outer(lam, lag)))

    def _exp_integral(c, lo, hi):
        if c == 0.0:
            return hi - lo
        return (np.exp(-c * np.asarray(lo)) - np.exp(-c * np.asarray(hi))) / c

    def lag_bounds(t, a, b):
        if anticausal:
            return np.asarray(a) - t, np.asarray(b) - t
        return t - np.asarray(b), t - np.asarray(a)

    def cell(t, a, b):
        lo, hi = lag_bounds(t, a, b)
        return sum(w[i] * _exp_integral(lam[i], lo, hi) for i in range(len(w)))

    def _sq_between(lo, hi):
        total = 0.0
        for i in range(len(w)):
            for j in range(len(w)):
                total = total + w[i] * w[j] * _exp_integral(lam[i] + lam[j],
                                                            lo, hi)
        return total

    def cell_sq(t, a, b):
        lo, hi = lag_bounds(t, a, b)
        return _sq_between(lo, hi)

    def slice_sq(x, a, b):
        # slices are lag integrals regardless of orientation
        x_a = np.asarray(x, dtype=float)
        return _sq_between(np.asarray(a) - x_a, np.asarray(b) - x_a)

    return Kernel(label or "exp_sum", orientation, horizon, ev, (0.0, 0.0),
                  cell, cell_sq, slice_sq_fn=slice_sq,
                  meta={"family": "exp_sum",
                        "weights": list(map(float, w)),
                        "rates": list(map(float, lam)),
                        "vector_slices": True})


def make_constant(value: float, horizon: float = 1.0,
                  orientation: str = CAUSAL, label: str = None) -> Kernel:
    if value < 0:
        raise ValueError("constant kernels must be nonnegative")

    def ev(t, s):
        return np.full_like(np.asarray(s, dtype=float), value)

    return Kernel(label or f"constant({value})", orientation, horizon, ev,
                  (0.0, 0.0),
                  cell_fn=lambda t, a, b: value * (b - a),
                  cell_sq_fn=lambda t, a, b: value ** 2 * (np.asarray(b)
                                                           - np.asarray(a)),
                  cell_m1_fn=lambda t, a, b: value * (b * b - a * a) / 2.0,
                  slice_sq_fn=lambda x, a, b: value ** 2 * (np.asarray(b)
                                                            - np.asarray(a)),
                  meta={"family": "constant", "value": value,
                        "vector_slices": True})


def make_counterexample_sup(horizon: float = 1.0) -> Kernel:
    """Anticausal kernel sqrt(2 / (T - t)): bounded slices, no partition.

    Every slice over (t, T] has squared norm exactly 2, so the sliced
    esssup is finite while no finite partition can push local slice norms
    below sqrt(2).
    """
    T = horizon

    def ev(t, s):
        return np.full_like(np.asarray(s, dtype=float),
                            math.sqrt(2.0 / (T - t)))

    def cell(t, a, b):
        return (b - a) * math.sqrt(2.0 / (T - t))

    def cell_sq(t, a, b):
        t_a = np.asarray(t, dtype=float)
        return (np.asarray(b) - np.asarray(a)) * 2.0 / (T - t_a)

    return Kernel("counterexample_sup", ANTICAUSAL, T, ev, None,
                  cell, cell_sq,
                  meta={"family": "counterexample_sup",
                        "vector_slices": True})


def _fbm_c(H: float) -> float:
    return math.sqrt(2.0 * H * gamma_fn(1.5 - H)
                     / (gamma_fn(H + 0.5) * gamma_fn(2.0 - 2.0 * H)))


@lru_cache(maxsize=4096)
def _fbm_F(u: float, H: float, method: str = "product") -> float:
    """F(u) = c_H (1/2 - H) int_1^u (r-1)^(H-3/2) (1 - r^(H-1/2)) dr.

    The integrand behaves like -(H - 1/2)(r-1)^(H-1/2) near r = 1, so the
    product rule integrates the (r-1)^(H-1/2) factor exactly; the
    "substitution" method maps r = 1 + x^2 and integrates adaptively,
    serving as the independent cross-check.
    """
    if u < 1.0:
        raise ValueError("F is defined for u >= 1")
    if u == 1.0 or H == 0.5:
        return 0.0
    pref = _fbm_c(H) * (0.5 - H)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        if method == "product":
            def phi(r):
                rm1 = r - 1.0
                if rm1 <= 0.0:
                    return H - 0.5  # continuous limit of the quotient
                return (1.0 - r ** (H - 0.5)) / rm1
            val, _ = integrate.quad(phi, 1.0, u, weight="alg",
                                    wvar=(H - 0.5, 0.0), limit=200)
        elif method == "substitution":
            def g(x):
                r = 1.0 + x * x
                return 2.0 * x ** (2.0 * H - 2.0) * (1.0 - r ** (H - 0.5))
            val, _ = integrate.quad(g, 0.0, math.sqrt(u - 1.0), limit=200)
        else:
            raise ValueError(f"unknown method {method!r}")
    return pref * val


def make_fbm_rl(H: float, horizon: float = 1.0) -> Kernel:
    """Riemann-Liouville fractional kernel lag**(H - 1/2) / Gamma(H + 1/2)."""
    if not 0.0 < H < 1.0:
        raise ValueError("H must lie in (0, 1)")
    k = make_fractional(H + 0.5, CAUSAL, horizon,
                        scale=1.0 / gamma_fn(H + 0.5),
                        label=f"fbm_rl(H={H})")
    k.meta["H"] = H
    return k


def make_fbm_full(H: float, horizon: float = 1.0) -> Kernel:
    """Full fractional-Brownian kernel c_H lag**(H-1/2) + s**(H-1/2) F(t/s)."""
    if not 0.0 < H < 1.0:
        raise ValueError("H must lie in (0, 1)")
    cH = _fbm_c(H)

    def ev(t, s):
        s = np.asarray(s, dtype=float)
        scalar = s.ndim == 0
        s1 = np.atleast_1d(s)
        out = np.empty_like(s1)
        for i, si in enumerate(s1):
            lag = t - si
            if lag <= 0.0 or si < 0.0:
                out[i] = math.inf
                continue
            first = cH * lag ** (H - 0.5)
            if si == 0.0:
                out[i] = math.inf if H != 0.5 else 1.0
                continue
            out[i] = first + si ** (H - 0.5) * _fbm_F(t / si, H)
        return out[0] if scalar else out

    hint = (max(0.5 - H, 0.0), abs(H - 0.5))
    return Kernel(f"fbm_full(H={H})", CAUSAL, horizon, ev, hint,
                  meta={"family": "fbm_full", "H": H, "c_H": cH})


# ---------------------------------------------------------------------------
# slice norms, sup estimation, triangle norms
# ---------------------------------------------------------------------------

def slice_l2(kernel: Kernel, t: float, b: float) -> float:
    """L2 norm of the slice at t over (t, b]; inf when divergent."""
    if not t < b <= kernel.horizon + 1e-12:
        raise ValueError(f"invalid slice interval ({t}, {b}]")
    val = kernel.slice_sq(t, t, b)
    if not math.isfinite(val):
        return math.inf
    if val < 0:
        raise KernelEvalError(
            f"negative slice integral for kernel {kernel.label!r}")
    return math.sqrt(val)


def _sup_grid(a: float, b: float, n_uniform: int, n_cluster: int) -> np.ndarray:
    """Interior grid on (a, b), geometrically clustered toward both ends."""
    w = b - a
    offs = w * 2.0 ** -np.arange(1.0, n_cluster + 1.0)
    pts = np.concatenate([a + offs, b - offs,
                          np.linspace(a, b, n_uniform + 2)[1:-1]])
    lo = a + 1e-14 * max(w, 1.0)
    hi = b - 1e-14 * max(w, 1.0)
    return np.unique(np.clip(pts, lo, hi))


def _sup_slice(kernel: Kernel, a: float, b: float, upper: float,
               base_uniform: int = 9, base_cluster: int = 9,
               include_left_endpoint: bool = True) -> float:
    """Estimated esssup over x in (a, b) of slice_l2(x, upper).

    Max over a clustered grid, refined once; one Richardson step corrects
    profiles still increasing under refinement, and growth beyond the
    divergence factor flags inf.
    """
    hi = min(b, upper - 1e-14 * max(upper, 1.0))
    if hi <= a:
        return 0.0
    xs1 = _sup_grid(a, hi, base_uniform, base_cluster)
    xs2 = _sup_grid(a, hi, 2 * base_uniform, base_cluster + 8)
    v1 = kernel.slice_l2_profile(xs1, upper)
    v2 = kernel.slice_l2_profile(xs2, upper)
    m1, m2 = float(np.max(v1)), float(np.max(v2))
    if math.isinf(m1) or math.isinf(m2):
        return math.inf
    if m1 > 0 and m2 > _GROWTH_FACTOR * m1:
        return math.inf
    est = m2 + max(0.0, m2 - m1)
    if include_left_endpoint and (kernel.slice_sq_fn is not None
                                  or kernel.cell_sq_fn is not None):
        try:
            edge = float(kernel.slice_sq(a, a, upper))
        except (ValueError, ZeroDivisionError, OverflowError):
            edge = None
        if edge is not None:
            if not math.isfinite(edge):
                return math.inf
            est = max(est, math.sqrt(max(edge, 0.0)))
    return est


def script_norm(kernel: Kernel, **kw) -> float:
    """esssup over x of the slice L2 norm up to the horizon (condition 1)."""
    return _sup_slice(kernel, 0.0, kernel.horizon, kernel.horizon,
                      base_uniform=15, base_cluster=14, **kw)


def triangle_l2_norm(kernel: Kernel) -> float:
    """L2 norm of the kernel over its whole triangle; inf on divergence."""
    T = kernel.horizon
    if 2.0 * kernel.diag_exponent >= 1.0:
        return math.inf
    if 2.0 * kernel.edge_exponent >= 1.0:
        return math.inf
    e = 2.0 * kernel.edge_exponent
    # near x = T the slice profile vanishes like (T-x)^(1-2p)
    p = kernel.diag_exponent
    vanish = -(1.0 - 2.0 * p) if p > 0.0 else 0.0
    vanish = max(vanish, -0.999)

    def f(x):
        return kernel.slice_sq(x, x, T)

    val = _quad_power_aware(f, 0.0, T, left_exp=e, right_exp=vanish)
    if not math.isfinite(val):
        # refinement trace: shrink away from the zero edge and watch growth
        trace = []
        prev = None
        for delta in (1e-3, 1e-5, 1e-7):
            v = _quad_power_aware(f, delta * T, T, 0.0, 0.0)
            trace.append((delta, v))
            if prev is not None and v > _GROWTH_FACTOR * prev:
                return math.inf
            prev = v
        if prev is None or not math.isfinite(prev):
            raise QuadratureError(
                f"triangle norm quadrature failed for {kernel.label!r}", trace)
        return math.sqrt(max(prev, 0.0))
    return math.sqrt(max(val, 0.0))


# ---------------------------------------------------------------------------
# partitions (condition 2)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Partition:
    """Strictly increasing breakpoints pinned to 0 and T."""

    breakpoints: tuple

    def __post_init__(self):
        bp = self.breakpoints
        if len(bp) < 2:
            raise ValueError("a partition needs at least two breakpoints")
        if any(b2 <= b1 for b1, b2 in zip(bp, bp[1:])):
            raise ValueError("breakpoints must be strictly increasing")

    @property
    def intervals(self):
        return list(zip(self.breakpoints, self.breakpoints[1:]))

    def __len__(self):
        return len(self.breakpoints) - 1


@dataclass(frozen=True)
class PartitionInfeasible:
    """Witness that the greedy construction could not finish.

    ``reason`` is "mathematical" when probing shows no interval placement
    can satisfy the bound, "budget" when only the breakpoint cap stopped
    the construction.
    """

    eps: float
    reason: str
    witness_t: float
    measured_sup: float


def _block_sup(kernel: Kernel, a: float, b: float, fine: bool = False) -> float:
    base, clus = (25, 16) if fine else (9, 9)
    return _sup_slice(kernel, a, b, b, base_uniform=base, base_cluster=clus)


def find_partition(kernel: Kernel, eps: float,
                   cap: int = DEFAULT_BREAKPOINT_CAP,
                   breakpoint_rel_tol: float = 1e-6):
    """Greedy left-to-right partition with local slice norms below eps.

    Each breakpoint is the (bisected) maximal extension of the current
    interval, shrunk by a small safety margin so the finer re-verification
    grid stays below eps; when the previous width keeps working within a
    couple of percent it is reused without a full bisection.  Returns a
    re-verified :class:`Partition` or a :class:`PartitionInfeasible`.
    """
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    T = kernel.horizon
    breakpoints = [0.0]
    prev_width = None
    min_step = 1e-9 * T

    def feasible(a, b):
        return _block_sup(kernel, a, b) < eps

    def left_edge_infeasible(a):
        # no interval starting at a works at any length: blow-up witness
        g = max(2.0 * min_step, (T - a) * 2.0 ** -12)
        xs = _sup_grid(a, a + g, 9, 9)
        vals = kernel.slice_l2_profile(xs, a + g)
        idx = int(np.argmax(vals))
        return PartitionInfeasible(eps, "mathematical", float(xs[idx]),
                                   float(vals[idx]))

    def tail_classification(a):
        # extensions exist but the construction could not close at T:
        # probe whether *any* terminal interval (u, T] satisfies the bound
        g = T - a
        while g > min_step:
            if feasible(T - g, T):
                return PartitionInfeasible(eps, "budget", a,
                                           float(_block_sup(kernel, a, T)))
            g /= 2.0
        xs = _sup_grid(T - max(2 * min_step, T * 2.0 ** -20), T, 15, 12)
        vals = kernel.slice_l2_profile(xs, T)
        best = np.flatnonzero(vals >= np.max(vals) - 1e-12)
        return PartitionInfeasible(eps, "mathematical", float(xs[best[-1]]),
                                   float(np.max(vals)))

    while True:
        a = breakpoints[-1]
        if feasible(a, T):
            breakpoints.append(T)
            break
        if len(breakpoints) > cap:
            return tail_classification(a)
        # fast path: previous width still nearly maximal
        b = None
        if prev_width is not None and a + prev_width < T \
                and feasible(a, a + prev_width):
            if a + 1.02 * prev_width >= T \
                    or not feasible(a, a + 1.02 * prev_width):
                b = a + prev_width
        if b is None:
            # bracket a feasible extension, then bisect
            guess = prev_width if prev_width else (T - a) / 2.0
            g = min(guess, (T - a) * 0.5)
            lo = None
            while g > min_step:
                if feasible(a, a + g):
                    lo = a + g
                    break
                g /= 2.0
            if lo is None:
                return left_edge_infeasible(a)
            hi = min(a + 4.0 * (lo - a), T)
            if feasible(a, hi):
                lo, hi = hi, T
            tol = max(breakpoint_rel_tol * T, 0.5e-3 * (lo - a))
            while hi - lo > tol:
                mid = 0.5 * (lo + hi)
                if feasible(a, mid):
                    lo = mid
                else:
                    hi = mid
            b = a + (1.0 - _BISECT_MARGIN) * (lo - a)
        if b - a < min_step:
            return tail_classification(a)
        breakpoints.append(b)
        prev_width = b - a

    part = Partition(tuple(breakpoints))
    bad = reverify_partition(kernel, part, eps)
    if bad is not None:
        # margin was too thin for the refined grid; shrink the offender once
        i, sup = bad
        bp = list(part.breakpoints)
        if i + 1 < len(bp) - 1:
            bp[i + 1] = bp[i] + 0.9 * (bp[i + 1] - bp[i])
            part = Partition(tuple(bp))
            if reverify_partition(kernel, part, eps) is None:
                return part
        raise QuadratureError(
            f"partition re-verification failed on interval {i} "
            f"(measured sup {sup:.6g} >= eps {eps:.6g})")
    return part


def reverify_partition(kernel: Kernel, part: Partition, eps: float):
    """Remeasure each interval's sup on a finer grid; None when all pass."""
    for i, (a, b) in enumerate(part.intervals):
        sup = _block_sup(kernel, a, b, fine=True)
        if not sup < eps:
            return i, sup
    return None


# ---------------------------------------------------------------------------
# Zhang-type bounded-sliding-slice class
# ---------------------------------------------------------------------------

def k0_membership(kernel: Kernel, t_grid_size: int = 33,
                  eps_sequence=None, tol: float = 1e-2,
                  min_decay_slope: float = 0.05):
    """Bounded L1 slices plus vanishing sliding slices (numerical check).

    Measures ``sup_t int_0^t k(t, s) ds`` on a fixed grid and the sliding
    quantity ``max_t int_t^(t+eps) k(t+eps, s) ds`` along a decreasing eps
    sequence; membership requires the first to stay bounded under grid
    refinement and the second to decay (below ``tol`` or with fitted
    log-log slope at least ``min_decay_slope``).

    Returns ``(member, diagnostics)``.
    """
    if kernel.orientation != CAUSAL:
        raise ValueError("the bounded-sliding-slice class is defined for "
                         "causal kernels")
    T = kernel.horizon
    if eps_sequence is None:
        eps_sequence = T * 0.1 * 2.0 ** -np.arange(0.0, 8.0)

    def sup_l1(n):
        ts = np.linspace(T / n, T, n)
        vals = [kernel.cell(float(t), 0.0, float(t)) for t in ts]
        return float(np.max(vals))

    sup1 = sup_l1(t_grid_size)
    sup2 = sup_l1(2 * t_grid_size)
    bounded = math.isfinite(sup2) and (sup1 == 0.0
                                       or sup2 <= _GROWTH_FACTOR * sup1)

    eps_max = float(np.max(eps_sequence))
    ts = np.linspace(T / t_grid_size, T - eps_max, t_grid_size)
    sliding = []
    for eps in eps_sequence:
        vals = [kernel.cell(float(t + eps), float(t), float(t + eps))
                for t in ts]
        sliding.append(float(np.max(vals)))
    sliding = np.asarray(sliding)

    if sliding[-1] <= tol * max(1.0, sup2):
        vanishes = True
        slope = math.inf
    else:
        decreasing = bool(np.all(np.diff(sliding) <= 1e-12))
        pos = sliding > 0
        if np.count_nonzero(pos) >= 3:
            slope = float(np.polyfit(np.log(np.asarray(eps_sequence)[pos]),
                                     np.log(sliding[pos]), 1)[0])
        else:
            slope = math.inf
        vanishes = decreasing and slope >= min_decay_slope

    member = bounded and vanishes
    diagnostics = {
        "sup_l1_slice": sup2,
        "sup_l1_slice_coarse": sup1,
        "sliding_eps": [float(e) for e in eps_sequence],
        "sliding_values": [float(v) for v in sliding],
        "decay_slope": slope if math.isfinite(slope) else None,
        "bounded": bounded,
        "vanishes": vanishes,
    }
    return member, diagnostics


# ---------------------------------------------------------------------------
# classification report
# ---------------------------------------------------------------------------

@dataclass
class KernelClassReport:
    label: str
    l2_triangle_norm: float
    script_norm: float
    partition_results: dict
    in_L2: bool
    in_scriptL2: bool
    in_K0: bool
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        # class inclusion on a finite horizon
        if self.in_scriptL2 and not self.in_L2:
            raise ValueError("inconsistent report: partitionable-slice "
                             "membership implies square integrability")

    def to_dict(self) -> dict:
        def enc_norm(v):
            return v if math.isfinite(v) else "inf"

        parts = {}
        for eps, res in self.partition_results.items():
            if isinstance(res, Partition):
                parts[repr(float(eps))] = {
                    "feasible": True,
                    "breakpoints": [float(b) for b in res.breakpoints],
                }
            else:
                parts[repr(float(eps))] = {
                    "feasible": False,
                    "reason": res.reason,
                    "witness_t": res.witness_t,
                    "measured_sup": enc_norm(res.measured_sup),
                }
        return {
            "label": self.label,
            "l2_triangle_norm": enc_norm(self.l2_triangle_norm),
            "script_norm": enc_norm(self.script_norm),
            "partition_results": parts,
            "in_L2": self.in_L2,
            "in_scriptL2": self.in_scriptL2,
            "in_K0": self.in_K0,
            "diagnostics": self.diagnostics,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kw)


def mirror_kernel(kernel: Kernel) -> Kernel:
    """Swap the time arguments, flipping the domain orientation."""
    other = CAUSAL if kernel.orientation == ANTICAUSAL else ANTICAUSAL
    fam = kernel.meta.get("family")
    T = kernel.horizon
    if fam == "fractional":
        return make_fractional(kernel.meta["alpha"], other, T,
                               kernel.meta["scale"],
                               label=kernel.label + "|mirrored")
    if fam == "doubly_singular":
        return make_doubly_singular(kernel.meta["alpha"],
                                    kernel.meta["beta"], other, T,
                                    label=kernel.label + "|mirrored")
    if fam == "constant":
        return make_constant(kernel.meta["value"], T, other,
                             label=kernel.label + "|mirrored")
    if fam == "exp_sum":
        return make_exp_sum(kernel.meta["weights"], kernel.meta["rates"],
                            T, other, label=kernel.label + "|mirrored")
    if fam == "convolution":
        return make_convolution(kernel.meta["h"], T, other,
                                kernel.meta.get("square_integrable", True),
                                kernel.meta.get("h_antiderivative"),
                                kernel.meta.get("h_sq_antiderivative"),
                                kernel.meta.get("diag_exponent", 0.0),
                                label=kernel.label + "|mirrored")

    def ev(t, s):
        s_arr = np.asarray(s, dtype=float)
        flat = np.asarray([kernel.eval_fn(float(si), t)
                           for si in np.atleast_1d(s_arr)], dtype=float)
        return flat.reshape(s_arr.shape) if s_arr.ndim else flat[0]

    return Kernel(kernel.label + "|mirrored", other, T, ev,
                  kernel.singularity_hint, meta={"family": "mirrored"})


def classify(kernel: Kernel, eps_grid=DEFAULT_EPS_GRID,
             cap: int = DEFAULT_BREAKPOINT_CAP) -> KernelClassReport:
    """Measure both norms, build partitions for every eps, test all classes.

    Membership verdicts are relative to the grids, the eps grid and the
    breakpoint cap used; they are recorded in the diagnostics.
    """
    eps_grid = tuple(eps_grid)
    if not eps_grid:
        raise ValueError("eps_grid must be nonempty")
    l2 = triangle_l2_norm(kernel)
    sup = script_norm(kernel)
    partitions = {}
    for eps in eps_grid:
        partitions[float(eps)] = find_partition(kernel, float(eps), cap=cap)
    feasible_all = all(isinstance(p, Partition) for p in partitions.values())
    in_script = math.isfinite(sup) and feasible_all
    in_l2 = math.isfinite(l2) or in_script

    causal_kernel = kernel if kernel.orientation == CAUSAL \
        else mirror_kernel(kernel)
    try:
        in_k0, k0_diag = k0_membership(causal_kernel)
    except (QuadratureError, KernelEvalError) as exc:
        in_k0, k0_diag = False, {"error": str(exc)}

    diagnostics = {
        "eps_grid": [float(e) for e in eps_grid],
        "breakpoint_cap": cap,
        "k0": k0_diag,
        "k0_on_mirror": kernel.orientation != CAUSAL,
        "note": "finite eps grid only; memberships are grid-relative "
                "measurements, not certificates",
    }
    return KernelClassReport(kernel.label, l2, sup, partitions,
                             in_l2, in_script, in_k0, diagnostics)


# ---------------------------------------------------------------------------
# product-integration weights
# ---------------------------------------------------------------------------

def product_weights(kernel: Kernel, t: float, grid) -> np.ndarray:
    """Exact cell integrals of k(t, .) over consecutive grid cells.

    ``grid`` must be increasing and lie on the correct side of t for the
    kernel's orientation (<= t causal, >= t anticausal); returns one weight
    per cell, so ``len(grid) - 1`` values.
    """
    g = np.asarray(grid, dtype=float)
    if g.ndim != 1 or len(g) < 2:
        raise ValueError("grid must contain at least two points")
    if np.any(np.diff(g) <= 0):
        raise ValueError("grid must be strictly increasing")
    if kernel.orientation == CAUSAL and g[-1] > t + 1e-12:
        raise ValueError("causal product weights need grid <= t")
    if kernel.orientation == ANTICAUSAL and g[0] < t - 1e-12:
        raise ValueError("anticausal product weights need grid >= t")
    return np.array([kernel.cell(t, float(a), float(b))
                     for a, b in zip(g[:-1], g[1:])])


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

def _shifted_inverse_sqrt(T: float) -> Kernel:
    """Anticausal convolution (T - lag)**(-1/2): partitionable, esssup infinite."""
    def h(lag):
        lag = np.asarray(lag, dtype=float)
        with np.errstate(divide="ignore"):
            return np.power(T - lag, -0.5)

    def h2_anti(r):
        # int_0^r (T - u)^-1 du
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore"):
            return np.where(r >= T, np.inf, np.log(T / (T - r)))

    return make_convolution(h, T, ANTICAUSAL, square_integrable=False,
                            h_sq_antiderivative=h2_anti,
                            label="shifted_inverse_sqrt")


_KERNEL_BUILDERS = {
    "fractional": lambda p: make_fractional(
        p["alpha"], p.get("orientation", CAUSAL), p.get("T", 1.0),
        p.get("scale", 1.0)),
    "doubly_singular": lambda p: make_doubly_singular(
        p["alpha"], p["beta"], p.get("orientation", ANTICAUSAL),
        p.get("T", 1.0)),
    "constant": lambda p: make_constant(
        p.get("value", 1.0), p.get("T", 1.0), p.get("orientation", CAUSAL)),
    "counterexample_sup": lambda p: make_counterexample_sup(p.get("T", 1.0)),
    "fbm_rl": lambda p: make_fbm_rl(p["H"], p.get("T", 1.0)),
    "fbm_full": lambda p: make_fbm_full(p["H"], p.get("T", 1.0)),
    "exp_sum": lambda p: make_exp_sum(
        p["weights"], p["rates"], p.get("T", 1.0),
        p.get("orientation", CAUSAL)),
    "shifted_inverse_sqrt": lambda p: _shifted_inverse_sqrt(p.get("T", 1.0)),
}


def kernel_from_config(spec: dict) -> Kernel:
    """Build a kernel from a {"name": ..., parameters...} mapping."""
    if "name" not in spec:
        raise ValueError("kernel spec needs a 'name' field")
    name = spec["name"]
    if name not in _KERNEL_BUILDERS:
        raise ValueError(f"unknown kernel name {name!r}; known: "
                         f"{sorted(_KERNEL_BUILDERS)}")
    return _KERNEL_BUILDERS[name](spec)
