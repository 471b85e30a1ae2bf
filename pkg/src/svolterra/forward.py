"""Forward stochastic Volterra equation solvers.

Solves X(t) = phi(t) + int_0^t A(t,s,X(s)) ds + int_0^t B(t,s,X(s)) dW(s)
on the scenario tree (explicit recursion or blockwise Picard iteration
mirroring the contraction construction) and by path Monte Carlo, with
product-integration weights so singular drift kernels are integrated
exactly over cells touching the diagonal.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.linalg import expm

from .kernels import (CAUSAL, Kernel, Partition, find_partition,
                      make_convolution)
from .lattice import AdaptedProcess, Tree
from .special import mittag_leffler


class PartitionInfeasibleError(RuntimeError):
    """The contraction partition required by the Picard solver does not exist."""


class ContractionError(RuntimeError):
    """Measured Picard iteration failed to contract."""


class LipschitzWarning(UserWarning):
    pass


@dataclass
class SVIEProblem:
    """Coefficients of a forward Volterra equation.

    The free term is a deterministic function ``t -> (d,)`` or an
    :class:`AdaptedProcess`.  Drift and diffusion are given either as raw
    maps ``A(t, s, x)`` / ``B(t, s, x)`` acting on node arrays, or in
    separable form ``kernel(t, s) * factor(s, x)`` which unlocks exact
    kernel cell weights (mandatory when the kernel blows up on the
    diagonal: point evaluation there is undefined).
    """

    horizon: float
    phi: Union[Callable, AdaptedProcess]
    d: int = 1
    m: int = 1
    drift: Optional[Callable] = None
    diffusion: Optional[Callable] = None
    drift_kernel: Optional[Kernel] = None
    drift_factor: Optional[Callable] = None
    diffusion_kernel: Optional[Kernel] = None
    diffusion_factor: Optional[Callable] = None
    lipschitz_K1: Optional[Kernel] = None
    lipschitz_K2: Optional[Kernel] = None
    l2_matched_diffusion: bool = False
    label: str = ""

    def __post_init__(self):
        if (self.drift_kernel is None) != (self.drift_factor is None):
            raise ValueError("separable drift needs kernel and factor")
        if (self.diffusion_kernel is None) != (self.diffusion_factor is None):
            raise ValueError("separable diffusion needs kernel and factor")
        if self.drift is not None and self.drift_kernel is not None:
            raise ValueError("give the drift either raw or separable")
        if self.diffusion is not None and self.diffusion_kernel is not None:
            raise ValueError("give the diffusion either raw or separable")
        self._probe_zero_coefficients()
        self._probe_lipschitz()

    # -- coefficient access ------------------------------------------------

    @property
    def has_drift(self):
        return self.drift is not None or self.drift_kernel is not None

    @property
    def has_diffusion(self):
        return self.diffusion is not None or self.diffusion_kernel is not None

    def phi_field(self, tree: Tree, i: int) -> np.ndarray:
        if isinstance(self.phi, AdaptedProcess):
            return self.phi[i]
        v = np.asarray(self.phi(tree.times[i]), dtype=float).reshape(-1)
        return np.tile(v, (tree.node_count(i), 1))

    def _probe_zero_coefficients(self):
        # values at x = 0 must be finite strictly inside the domain
        T = self.horizon
        zero = np.zeros((1, self.d))
        for (t, s) in [(0.9 * T, 0.3 * T), (0.5 * T, 0.1 * T)]:
            vals = []
            if self.drift is not None:
                vals.append(self.drift(t, s, zero))
            if self.drift_factor is not None:
                vals.append(self.drift_factor(s, zero))
            if self.diffusion is not None:
                vals.append(self.diffusion(t, s, zero))
            if self.diffusion_factor is not None:
                vals.append(self.diffusion_factor(s, zero))
            for v in vals:
                if not np.all(np.isfinite(np.asarray(v, dtype=float))):
                    raise ValueError(
                        f"coefficient not finite at x=0, (t,s)=({t},{s})")

    def _probe_lipschitz(self, n_probes: int = 8, seed: int = 0):
        # soft check: declared kernels should dominate difference quotients
        rng = np.random.default_rng(seed)
        T = self.horizon
        checks = []
        if self.lipschitz_K1 is not None and self.drift is not None:
            checks.append((self.drift, self.lipschitz_K1, "drift"))
        if self.lipschitz_K2 is not None and self.diffusion is not None:
            checks.append((self.diffusion, self.lipschitz_K2, "diffusion"))
        for fn, kern, name in checks:
            for _ in range(n_probes):
                s = rng.uniform(0.05, 0.85) * T
                t = rng.uniform(s + 0.05 * T, T)
                x = rng.normal(size=(1, self.d))
                y = rng.normal(size=(1, self.d))
                dx = np.linalg.norm(x - y)
                if dx < 1e-12:
                    continue
                quot = np.linalg.norm(
                    np.asarray(fn(t, s, x)) - np.asarray(fn(t, s, y))) / dx
                bound = float(kern(t, np.array(s)))
                if quot > bound * (1.0 + 1e-6) + 1e-12:
                    warnings.warn(
                        f"{name} difference quotient {quot:.4g} exceeds the "
                        f"declared Lipschitz kernel value {bound:.4g} at "
                        f"(t,s)=({t:.3g},{s:.3g})", LipschitzWarning)
                    break


@dataclass
class SVIESolution:
    X: AdaptedProcess
    diagnostics: dict = field(default_factory=dict)


def _drift_weights(problem: SVIEProblem, tree: Tree) -> np.ndarray:
    """Cell weights w[i, j] = integral of the drift kernel over cell j at t_i."""
    N = tree.N
    t = tree.times
    kern = problem.drift_kernel
    w = np.zeros((N + 1, N))
    for i in range(1, N + 1):
        a, b = t[:i], t[1:i + 1]
        if kern.cell_fn is not None:
            try:
                row = np.asarray(kern.cell_fn(t[i], a, b), dtype=float)
                if row.shape == a.shape:
                    w[i, :i] = row
                    continue
            except (TypeError, ValueError):
                pass
        w[i, :i] = [kern.cell(t[i], float(x), float(y))
                    for x, y in zip(a, b)]
    return w


def _diffusion_coeff(problem: SVIEProblem, tree: Tree, i: int,
                     j: int) -> float:
    """Scalar diffusion weight for cell j seen from time t_i (separable)."""
    t = tree.times
    if problem.l2_matched_diffusion:
        cs = problem.diffusion_kernel.cell_sq(t[i], t[j], t[j + 1])
        return math.sqrt(cs / tree.dt)
    return float(problem.diffusion_kernel(t[i], np.array(t[j])))


def solve_lattice(problem: SVIEProblem, tree: Tree) -> SVIESolution:
    """Explicit forward recursion on the tree.

    Only strictly earlier values enter each X(t_i), so no fixed point is
    needed; drift cells use exact kernel integrals, diffusion cells use
    left-point kernel values (or the L2-matched cell norm behind the
    ``l2_matched_diffusion`` flag).
    """
    N, t = tree.N, tree.times
    w = _drift_weights(problem, tree) if problem.drift_kernel is not None \
        else None
    if tree.m == 0 and not problem.has_diffusion:
        return _solve_lattice_deterministic(problem, tree, w)
    factor_cache = {}

    def drift_val(j, xj):
        # the separable smooth factor only depends on the inner time
        if j not in factor_cache:
            factor_cache[j] = np.asarray(
                problem.drift_factor(t[j], xj), dtype=float)
        return factor_cache[j]

    X = [problem.phi_field(tree, 0)]
    for i in range(1, N + 1):
        acc = problem.phi_field(tree, i).copy()
        z_list = []
        for j in range(i):
            if problem.drift_kernel is not None:
                dval = w[i, j] * drift_val(j, X[j])
            elif problem.drift is not None:
                dval = tree.dt * np.asarray(problem.drift(t[i], t[j], X[j]),
                                            dtype=float)
            else:
                dval = None
            if dval is not None:
                acc += tree.broadcast(dval, j, i)
            if problem.diffusion_kernel is not None:
                g = _diffusion_coeff(problem, tree, i, j) \
                    * problem.diffusion_factor(t[j], X[j])
            elif problem.diffusion is not None:
                g = problem.diffusion(t[i], t[j], X[j])
            else:
                g = None
            z_list.append(np.asarray(g, dtype=float) if g is not None
                          else np.zeros((tree.node_count(j), problem.d,
                                         tree.m)))
        if problem.has_diffusion:
            acc += tree.stochastic_integral(z_list, 0, i)
        X.append(acc)
    sol = AdaptedProcess(tree, X)
    res = _equation_residual(problem, tree, sol)
    return SVIESolution(sol, {"method": "lattice", "residual": res})


def _solve_lattice_deterministic(problem: SVIEProblem, tree: Tree,
                                 w) -> SVIESolution:
    """Single-path recursion: the weighted history sum is one dot product."""
    N, t = tree.N, tree.times
    d = problem.d
    X = np.zeros((N + 1, d))
    F = np.zeros((N + 1, d))  # drift values along the path

    def phi_at(i):
        return problem.phi_field(tree, i).reshape(d)

    def drift_at(i, j):
        if problem.drift_kernel is not None:
            return F[j]
        if problem.drift is not None:
            return np.asarray(problem.drift(t[i], t[j], X[j][None, :]),
                              dtype=float).reshape(d)
        return np.zeros(d)

    X[0] = phi_at(0)
    if problem.drift_kernel is not None:
        F[0] = np.asarray(problem.drift_factor(t[0], X[0][None, :]),
                          dtype=float).reshape(d)
    for i in range(1, N + 1):
        if problem.drift_kernel is not None:
            X[i] = phi_at(i) + w[i, :i] @ F[:i]
        elif problem.drift is not None:
            X[i] = phi_at(i) + tree.dt * sum(drift_at(i, j)
                                             for j in range(i))
        else:
            X[i] = phi_at(i)
        if problem.drift_kernel is not None:
            F[i] = np.asarray(problem.drift_factor(t[i], X[i][None, :]),
                              dtype=float).reshape(d)
    # residual re-check through the same weighted sums
    res = 0.0
    for i in range(N + 1):
        if problem.drift_kernel is not None:
            rhs = phi_at(i) + (w[i, :i] @ F[:i] if i else 0.0)
        elif problem.drift is not None:
            rhs = phi_at(i) + tree.dt * sum(drift_at(i, j)
                                            for j in range(i))
        else:
            rhs = phi_at(i)
        res = max(res, float(np.max(np.abs(X[i] - rhs))))
    sol = AdaptedProcess(tree, [X[i][None, :] for i in range(N + 1)])
    return SVIESolution(sol, {"method": "lattice", "residual": res})


def _equation_residual(problem: SVIEProblem, tree: Tree,
                       X: AdaptedProcess) -> float:
    """Max node-wise defect of the discrete equation (re-evaluation pass)."""
    N, t = tree.N, tree.times
    w = _drift_weights(problem, tree) if problem.drift_kernel is not None \
        else None
    worst = 0.0
    for i in range(N + 1):
        rhs = problem.phi_field(tree, i).copy()
        z_list = []
        for j in range(i):
            if problem.drift_kernel is not None:
                rhs += tree.broadcast(w[i, j]
                                      * problem.drift_factor(t[j], X[j]),
                                      j, i)
            elif problem.drift is not None:
                rhs += tree.broadcast(tree.dt
                                      * problem.drift(t[i], t[j], X[j]),
                                      j, i)
            if problem.diffusion_kernel is not None:
                z_list.append(_diffusion_coeff(problem, tree, i, j)
                              * problem.diffusion_factor(t[j], X[j]))
            elif problem.diffusion is not None:
                z_list.append(np.asarray(problem.diffusion(t[i], t[j], X[j]),
                                         dtype=float))
        if z_list:
            rhs += tree.stochastic_integral(z_list, 0, i)
        worst = max(worst, float(np.max(np.abs(X[i] - rhs)))
                    if X[i].size else 0.0)
    return worst


def solve_picard(problem: SVIEProblem, tree: Tree, tol: float = 1e-10,
                 max_sweeps: int = 400) -> SVIESolution:
    """Blockwise Picard iteration on a contraction partition.

    The partition keeps, on every block, the drift kernel's triangle mass
    and the diffusion kernel's sliced sup below an even split of the 1/4
    contraction budget; earlier blocks are folded into the free term as
    the iteration advances.
    """
    K1 = problem.lipschitz_K1 or problem.drift_kernel
    K2 = problem.lipschitz_K2 or problem.diffusion_kernel
    blocks = _contraction_blocks(tree, K1, K2, budget=0.25)
    t = tree.times
    N = tree.N
    w = _drift_weights(problem, tree) if problem.drift_kernel is not None \
        else None

    X = [problem.phi_field(tree, i) for i in range(N + 1)]
    ratios = []
    sweeps_per_block = []

    def rhs_for(i, values):
        acc = problem.phi_field(tree, i).copy()
        z_list = []
        for j in range(i):
            if problem.drift_kernel is not None:
                acc += tree.broadcast(w[i, j]
                                      * problem.drift_factor(t[j], values[j]),
                                      j, i)
            elif problem.drift is not None:
                acc += tree.broadcast(
                    tree.dt * problem.drift(t[i], t[j], values[j]), j, i)
            if problem.diffusion_kernel is not None:
                z_list.append(_diffusion_coeff(problem, tree, i, j)
                              * problem.diffusion_factor(t[j], values[j]))
            elif problem.diffusion is not None:
                z_list.append(np.asarray(
                    problem.diffusion(t[i], t[j], values[j]), dtype=float))
            else:
                z_list.append(np.zeros((tree.node_count(j), problem.d,
                                        tree.m)))
        if problem.has_diffusion:
            acc += tree.stochastic_integral(z_list, 0, i)
        return acc

    for (lo, hi) in blocks:
        prev_update = None
        block_ratios = []
        for sweep in range(max_sweeps):
            update_sq = 0.0
            new_vals = {}
            for i in range(max(lo, 1), hi + 1):
                new = rhs_for(i, X)
                diff = new - X[i]
                update_sq += tree.dt * float(
                    tree.expectation((diff ** 2).sum(axis=1)))
                new_vals[i] = new
            for i, v in new_vals.items():
                X[i] = v
            update = math.sqrt(update_sq)
            if prev_update is not None and prev_update > 0:
                block_ratios.append(update / prev_update)
                if len(block_ratios) >= 3 and \
                        all(r >= 1.0 for r in block_ratios[-3:]):
                    raise ContractionError(
                        f"Picard iteration not contracting on block "
                        f"[{t[lo]:.4g}, {t[hi]:.4g}]; ratios "
                        f"{block_ratios[-3:]}")
            if update <= tol * 1e-2 or update == 0.0:
                sweeps_per_block.append(sweep + 1)
                break
            prev_update = update
        else:
            raise ContractionError("Picard sweep budget exhausted")
        ratios.append(max(block_ratios) if block_ratios else 0.0)

    sol = AdaptedProcess(tree, X)
    res = _equation_residual(problem, tree, sol)
    return SVIESolution(sol, {
        "method": "picard",
        "blocks": [(t[lo], t[hi]) for lo, hi in blocks],
        "contraction_ratios": ratios,
        "sweeps_per_block": sweeps_per_block,
        "residual": res,
    })


def _contraction_blocks(tree: Tree, K1: Optional[Kernel],
                        K2: Optional[Kernel], budget: float):
    """Grid-aligned blocks keeping both kernel masses below budget/2 each."""
    T = tree.T
    half = budget / 2.0
    if K2 is not None:
        part = find_partition(K2, math.sqrt(half))
        if isinstance(part, Partition):
            breakpoints = list(part.breakpoints)
        else:
            raise PartitionInfeasibleError(
                f"diffusion kernel admits no partition at eps^2 = {half}: "
                f"{part.reason}, witness t = {part.witness_t:.4g}")
    else:
        breakpoints = [0.0, T]

    def k1_mass(a, b):
        # triangle mass of K1^2 over the block, inf when slices diverge
        if K1 is None:
            return 0.0
        xs = np.linspace(a, b, 33)
        vals = np.array([K1.slice_sq(float(x), float(x), b)
                         for x in xs[:-1]])
        if not np.all(np.isfinite(vals)):
            return math.inf
        return float(np.trapezoid(vals, xs[:-1])) if len(xs) > 2 else 0.0

    refined = [breakpoints[0]]
    for a, b in zip(breakpoints, breakpoints[1:]):
        stack = [(a, b)]
        out = []
        while stack:
            lo, hi = stack.pop()
            mass = k1_mass(lo, hi)
            if mass > half and hi - lo > 1e-6 * T:
                mid = 0.5 * (lo + hi)
                stack.extend([(mid, hi), (lo, mid)])
            elif not math.isfinite(mass):
                raise PartitionInfeasibleError(
                    "drift kernel triangle mass diverges on arbitrarily "
                    "small blocks; the kernel is not square integrable")
            else:
                out.append((lo, hi))
        out.sort()
        refined.extend(h for _, h in out)

    # snap down to the tree grid, keeping at least one step per block
    idx = sorted({min(max(int(math.floor(u / tree.dt)), 0), tree.N)
                  for u in refined})
    if idx[0] != 0:
        idx.insert(0, 0)
    if idx[-1] != tree.N:
        idx.append(tree.N)
    blocks = [(a, b) for a, b in zip(idx, idx[1:]) if b > a]
    return blocks


# ---------------------------------------------------------------------------
# Monte Carlo backend
# ---------------------------------------------------------------------------

@dataclass
class PathEnsemble:
    times: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    mean_stderr: np.ndarray
    n_paths: int
    seed: int
    paths: Optional[np.ndarray] = None


def solve_paths(problem: SVIEProblem, n_paths: int, n_steps: int,
                seed: int, keep_paths: bool = False) -> PathEnsemble:
    """Euler-Maruyama over independent Gaussian paths.

    Drift cells use the same product-integration weights as the lattice
    solver; the run is reproducible for a fixed seed.
    """
    T = problem.horizon
    dt = T / n_steps
    t = np.linspace(0.0, T, n_steps + 1)
    rng = np.random.default_rng(seed)
    dW = rng.normal(scale=math.sqrt(dt), size=(n_paths, n_steps, problem.m))
    d = problem.d
    X = np.zeros((n_paths, n_steps + 1, d))

    def phi_at(i):
        if isinstance(problem.phi, AdaptedProcess):
            raise ValueError("path Monte Carlo needs a deterministic free "
                             "term")
        return np.asarray(problem.phi(t[i]), dtype=float).reshape(-1)

    X[:, 0] = phi_at(0)
    for i in range(1, n_steps + 1):
        acc = np.tile(phi_at(i), (n_paths, 1))
        for j in range(i):
            if problem.drift_kernel is not None:
                wij = problem.drift_kernel.cell(t[i], t[j], t[j + 1])
                acc += wij * problem.drift_factor(t[j], X[:, j])
            elif problem.drift is not None:
                acc += dt * problem.drift(t[i], t[j], X[:, j])
            if problem.diffusion_kernel is not None:
                coef = float(problem.diffusion_kernel(t[i], np.array(t[j])))
                g = coef * problem.diffusion_factor(t[j], X[:, j])
            elif problem.diffusion is not None:
                g = np.asarray(problem.diffusion(t[i], t[j], X[:, j]))
            else:
                g = None
            if g is not None:
                acc += np.einsum("ndk,nk->nd", g, dW[:, j])
        X[:, i] = acc

    mean = X.mean(axis=0)
    var = X.var(axis=0, ddof=1) if n_paths > 1 else np.zeros_like(mean)
    stderr = np.sqrt(var / n_paths)
    return PathEnsemble(t, mean, var, stderr, n_paths, seed,
                        X if keep_paths else None)


# ---------------------------------------------------------------------------
# stability and deterministic resolvents
# ---------------------------------------------------------------------------

def stability_gap(p: SVIEProblem, p2: SVIEProblem, tree: Tree) -> float:
    """Ratio of the solution gap to the coefficient gap (C = 1 normalized).

    Solves both problems and evaluates the two sides of the stability
    estimate; a 0/0 gap is reported as exactly zero.
    """
    X = solve_lattice(p, tree).X
    X2 = solve_lattice(p2, tree).X
    t = tree.times
    lhs_sq = sum(tree.dt * float(tree.expectation(
        ((X[i] - X2[i]) ** 2).sum(axis=1))) for i in range(tree.N + 1))

    def coeff(problem, which, ti, tj, x):
        if which == "drift":
            if problem.drift_kernel is not None:
                # cell-averaged value, exact for separable coefficients
                w = problem.drift_kernel.cell(ti, tj, tj + tree.dt) / tree.dt
                return w * problem.drift_factor(tj, x)
            if problem.drift is not None:
                return problem.drift(ti, tj, x)
            return np.zeros_like(x)
        if problem.diffusion_kernel is not None:
            c = float(problem.diffusion_kernel(ti, np.array(tj)))
            return c * problem.diffusion_factor(tj, x)
        if problem.diffusion is not None:
            return np.asarray(problem.diffusion(ti, tj, x))
        return np.zeros((x.shape[0], p.d, tree.m))

    rhs_sq = 0.0
    for i in range(tree.N + 1):
        dphi = p.phi_field(tree, i) - p2.phi_field(tree, i)
        rhs_sq += tree.dt * float(tree.expectation((dphi ** 2).sum(axis=1)))
        drift_gap = np.zeros(tree.node_count(i))
        diff_gap = 0.0
        for j in range(i):
            da = coeff(p, "drift", t[i], t[j], X2[j]) \
                - coeff(p2, "drift", t[i], t[j], X2[j])
            drift_gap += tree.broadcast(
                tree.dt * np.linalg.norm(np.asarray(da), axis=-1), j, i)
            db = coeff(p, "diff", t[i], t[j], X2[j]) \
                - coeff(p2, "diff", t[i], t[j], X2[j])
            diff_gap += tree.dt * float(tree.expectation(
                (np.asarray(db) ** 2).sum(axis=(1, 2))))
        rhs_sq += tree.dt * float(tree.expectation(drift_gap ** 2))
        rhs_sq += tree.dt * diff_gap
    if lhs_sq == 0.0:
        return 0.0
    if rhs_sq == 0.0:
        return math.inf
    return math.sqrt(lhs_sq) / math.sqrt(rhs_sq)


def _cells_vectorized(fn, ti, a, b):
    """Evaluate a closed-form cell hook over arrays, looping as a fallback."""
    try:
        out = np.asarray(fn(ti, a, b), dtype=float)
        if out.shape == a.shape:
            return out
    except (TypeError, ValueError):
        pass
    return np.array([float(fn(ti, float(x), float(y)))
                     for x, y in zip(a, b)])


def resolvent_linear(kernel: Kernel, lam: float, grid) -> np.ndarray:
    """Deterministic linear Volterra solve x(t) = 1 + lam int_0^t k(t,s)x(s)ds.

    Product-trapezoidal collocation: x is piecewise linear on the grid and
    the kernel factor is integrated exactly on each cell (zeroth and first
    moments), with the last cell's right value treated implicitly.
    Returns the value table aligned with ``grid``.
    """
    if kernel.orientation != CAUSAL:
        raise ValueError("resolvent_linear expects a causal kernel")
    g = np.asarray(grid, dtype=float)
    n = len(g) - 1
    cell0 = kernel.cell_fn or kernel.cell
    cell1 = kernel.cell_m1_fn or kernel.cell_m1
    x = np.empty(n + 1)
    x[0] = 1.0
    for i in range(1, n + 1):
        ti = g[i]
        a, b = g[:i], g[1:i + 1]
        h = b - a
        I0 = _cells_vectorized(cell0, ti, a, b)
        I1 = _cells_vectorized(cell1, ti, a, b)
        w_left = (b * I0 - I1) / h
        w_right = (I1 - a * I0) / h
        acc = 1.0 + lam * float(w_left @ x[:i]) \
            + lam * float(w_right[:-1] @ x[1:i])
        x[i] = acc / (1.0 - lam * w_right[-1])
    return x


def graded_grid(T: float, n: int, exponent: float) -> np.ndarray:
    """Mesh T * (i/n)**exponent, clustered at 0 for singular solutions."""
    return T * (np.arange(n + 1) / n) ** exponent


# ---------------------------------------------------------------------------
# named example constructors
# ---------------------------------------------------------------------------

def make_evolution_example(M: np.ndarray, Phi: Callable, Psi: Callable,
                           x0, horizon: float = 1.0,
                           m: int = 1) -> SVIEProblem:
    """Semigroup-driven evolution problem.

    X(t) = e^{tM} x0 + int_0^t e^{(t-s)M} Phi(s, X(s)) ds
                     + int_0^t e^{(t-s)M} Psi(s, X(s)) dW(s).
    """
    M = np.asarray(M, dtype=float)
    d = M.shape[0]
    x0 = np.asarray(x0, dtype=float).reshape(d)
    cache = {}

    def S(lag):
        key = round(float(lag), 14)
        if key not in cache:
            cache[key] = expm(key * M)
        return cache[key]

    def phi(t):
        return S(t) @ x0

    def drift(t, s, x):
        return np.einsum("ab,nb->na", S(t - s), Phi(s, x))

    def diffusion(t, s, x):
        return np.einsum("ab,nbk->nak", S(t - s), Psi(s, x))

    return SVIEProblem(horizon, phi, d=d, m=m, drift=drift,
                       diffusion=diffusion, label="evolution_semigroup")


def make_caputo_example(q: float, a: float, f: Optional[Callable],
                        g: Optional[Callable], x0: float,
                        horizon: float = 1.0, m: int = 1) -> SVIEProblem:
    """Scalar memory-derivative evolution problem in mild form.

    X(t) = E_q(a t^q) x0 + int_0^t (t-s)^{q-1} E_{q,q}(a (t-s)^q) f(s, X) ds
                         + int_0^t (t-s)^{q-1} E_{q,q}(a (t-s)^q) g(s, X) dW.

    The lag kernel has the closed antiderivative r^q E_{q,q+1}(a r^q), so
    its diagonal cells carry exact product weights.
    """
    if not 0.5 < q < 1.0:
        raise ValueError("q must lie in (1/2, 1)")

    def h(lag):
        lag = np.atleast_1d(np.asarray(lag, dtype=float))
        out = np.array([l ** (q - 1.0) * mittag_leffler(q, q, a * l ** q)
                        if l > 0 else math.inf for l in lag])
        return out if out.size > 1 else out[0]

    def H(r):
        arr = np.atleast_1d(np.asarray(r, dtype=float))
        out = np.array([0.0 if x <= 0.0
                        else x ** q * mittag_leffler(q, q + 1.0, a * x ** q)
                        for x in arr])
        return out if np.ndim(r) else float(out[0])

    kern = make_convolution(h, horizon, CAUSAL, diag_exponent=1.0 - q,
                            h_antiderivative=H,
                            label=f"caputo_resolvent(q={q})")

    def phi(t):
        return np.array([mittag_leffler(q, 1.0, a * t ** q) * x0])

    problem = SVIEProblem(
        horizon, phi, d=1, m=m,
        drift_kernel=kern if f is not None else None,
        drift_factor=(lambda s, x: f(s, x)) if f is not None else None,
        diffusion_kernel=kern if g is not None else None,
        diffusion_factor=(lambda s, x: g(s, x)) if g is not None else None,
        l2_matched_diffusion=g is not None,
        label=f"caputo(q={q})")
    return problem
