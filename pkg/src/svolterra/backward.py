"""Backward stochastic Volterra equations and adapted M-solutions.

The discrete backward equation on the scenario tree reads, node-wise at
the leaves and for every outer index i,

    Y(t_i) = psi(t_i) + sum_{j >= i} w_ij g(t_i, t_j, Y(t_j), Z(t_i, t_j),
                                            Z(t_j, t_i))
                      - sum_{j >= i} Z(t_i, t_j) dW_j,

with Z below the diagonal pinned by the martingale-representation
identity Y(t_i) = E Y(t_i) + sum_{j < i} Z(t_i, t_j) dW_j.  Two solution
routes are provided: a global sweep iteration (the y and transposed-z
couplings come from the previous sweep, the within-step integrand is
pinned exactly by the tree representation before the generator is
applied) and a blockwise scheme that solves the terminal block first,
extends Z by representation, folds the remaining tail into a new free
term through a stochastic Fredholm pass, and recurses on earlier blocks.
Both converge to the same discrete system, so they agree to solver
tolerance.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .kernels import (ANTICAUSAL, Kernel, Partition, find_partition,
                      make_fractional, script_norm, triangle_l2_norm)
from .lattice import (AdaptedProcess, TerminalField, Tree,
                      TwoParameterProcess)
from .special import gamma_fn


class DivergenceError(RuntimeError):
    """Sweep iteration failed to contract."""


class BlockPartitionError(RuntimeError):
    """No contraction partition available for the block method."""


class KernelClassWarning(UserWarning):
    pass


@dataclass
class GeneratorTerm:
    """One additive piece of the generator: weight(t, s) * fn(...).

    ``fn(t, s, y, z1, z2)`` receives node arrays ``y`` of shape (n, d) and
    ``z1``, ``z2`` of shape (n, d, m) and returns (n, d); it must be
    finite at s = t (the diagonal cell evaluates there).  The quadrature
    weight over the inner cell [t_j, t_{j+1}] is the exact cell integral
    of ``kernel`` when given, the plain cell width when not, or the
    explicit ``weights[i, j]`` override (used by adjoint constructions
    that transpose a forward discretization).
    """

    fn: Callable
    kernel: Optional[Kernel] = None
    weights: Optional[np.ndarray] = None


@dataclass
class BSVIEProblem:
    """Free term plus generator terms, with Lipschitz kernel metadata."""

    psi: TerminalField
    terms: list
    d: int = 1
    m: int = 1
    L_y: Optional[Kernel] = None
    L_z1: Optional[Kernel] = None
    L_z2: Optional[Kernel] = None
    label: str = ""
    check_zero: bool = True

    def __post_init__(self):
        if self.check_zero:
            self._probe_zero()
        self._verify_kernel_classes()

    def _probe_zero(self):
        T = self.psi.tree.T
        y = np.zeros((1, self.d))
        z = np.zeros((1, self.d, self.m))
        for (t, s) in [(0.25 * T, 0.5 * T), (0.5 * T, 0.9 * T)]:
            for term in self.terms:
                try:
                    v = np.asarray(term.fn(t, s, y, z, z), dtype=float)
                except Exception:
                    continue  # index-bound adjoint terms probe at solve time
                if not np.allclose(v, 0.0, atol=1e-12):
                    raise ValueError(
                        "generator does not vanish at (y, z1, z2) = 0; "
                        "fold g(t, s, 0, 0, 0) into the free term first")

    def _verify_kernel_classes(self):
        def check(kernel, measure, message):
            if kernel is None:
                return
            try:
                value = measure(kernel)
            except Exception as exc:  # soft check: report, never block
                warnings.warn(f"{message}: measurement failed ({exc})",
                              KernelClassWarning)
                return
            if not math.isfinite(value):
                warnings.warn(message, KernelClassWarning)

        check(self.L_y, triangle_l2_norm,
              "declared y-Lipschitz kernel has divergent triangle norm")
        check(self.L_z1, script_norm,
              "declared z1-Lipschitz kernel has unbounded slice norms")
        check(self.L_z2, script_norm,
              "declared z2-Lipschitz kernel has unbounded slice norms")

    @property
    def tree(self) -> Tree:
        return self.psi.tree


@dataclass
class MSolution:
    """Adapted pair (Y, Z) with the below-diagonal Z pinned by
    martingale representation; diagnostics carry the method tag,
    iteration counts and residuals."""

    Y: AdaptedProcess
    Z: TwoParameterProcess
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# plain backward equations (the non-Volterra special case)
# ---------------------------------------------------------------------------

def solve_bsde(xi: np.ndarray, g: Callable, tree: Tree,
               y_scheme: str = "explicit"):
    """Backward recursion for Y(t) = xi + int g(s, Y, Z) ds - int Z dW.

    ``g(s, y, z)`` acts on node arrays; the step integrand Z comes from
    the exact one-step representation of Y(t_{j+1}).  The y input of the
    generator is the conditional mean ("explicit") or the current unknown
    resolved by a small fixed point, exact for affine generators
    ("implicit").
    """
    if y_scheme not in ("explicit", "implicit"):
        raise ValueError(f"unknown y_scheme {y_scheme!r}")
    xi = np.asarray(xi, dtype=float)
    if xi.ndim == 1:
        xi = xi[:, None]
    N = tree.N
    Y = [None] * (N + 1)
    Z = [None] * N
    Y[N] = xi
    for j in range(N - 1, -1, -1):
        mean, zs = tree.martingale_representation(Y[j + 1], j + 1, j)
        Z[j] = zs[0]
        t = tree.times[j]
        if y_scheme == "explicit":
            Y[j] = mean + tree.dt * np.asarray(g(t, mean, Z[j]), dtype=float)
        else:
            y = mean.copy()
            for _ in range(50):
                y_new = mean + tree.dt * np.asarray(g(t, y, Z[j]),
                                                    dtype=float)
                if np.max(np.abs(y_new - y)) < 1e-15:
                    y = y_new
                    break
                y = y_new
            Y[j] = y
    return AdaptedProcess(tree, Y), Z


# ---------------------------------------------------------------------------
# the shared backward-pass engine
# ---------------------------------------------------------------------------

def _term_weights(problem: BSVIEProblem, tree: Tree) -> list:
    """Per-term (N+1, N) cell weight tables."""
    N, t = tree.N, tree.times
    tables = []
    for term in problem.terms:
        if term.weights is not None:
            w = np.asarray(term.weights, dtype=float)
            if w.shape != (N + 1, N):
                raise ValueError(f"weight override must have shape "
                                 f"{(N + 1, N)}, got {w.shape}")
        elif term.kernel is not None:
            w = np.zeros((N + 1, N))
            for i in range(N + 1):
                for j in range(i, N):
                    w[i, j] = term.kernel.cell(t[i], t[j], t[j + 1])
                    if not math.isfinite(w[i, j]):
                        raise ValueError(
                            f"generator kernel {term.kernel.label!r} has "
                            f"a divergent cell weight at outer time "
                            f"t={t[i]:.4g} (cell {j}); the kernel blows "
                            f"up on the outer boundary - clamp or shift "
                            f"it before solving")
        else:
            w = np.full((N + 1, N), tree.dt)
        tables.append(w)
    return tables


def _outer_pass(tree: Tree, problem: BSVIEProblem, weight_tables, i: int,
                start_field: np.ndarray, start_depth: int, stop_depth: int,
                y_at: Callable, z2_at: Callable, keep_levels: bool = False):
    """Backward recursion in the inner time for one outer index i.

    Starting from ``start_field`` at ``start_depth``, each step splits off
    the exact representation integrand mu_j, then adds the weighted
    generator drift; the z1 argument is mu_j itself (pinned before the
    generator applies) and the z2 argument comes from ``z2_at`` except on
    the diagonal cell where it coincides with mu_j.
    """
    t = tree.times
    lam = start_field
    mu = {}
    levels = {start_depth: lam} if keep_levels else None
    for j in range(start_depth - 1, stop_depth - 1, -1):
        mean, zs = tree.martingale_representation(lam, j + 1, j)
        mu_j = zs[0]
        drift = np.zeros_like(mean)
        for idx, term in enumerate(problem.terms):
            w = weight_tables[idx][i, j]
            if w == 0.0:
                continue
            z2 = mu_j if j == i else z2_at(j, i)
            drift = drift + w * np.asarray(
                term.fn(t[i], t[j], y_at(j), mu_j, z2), dtype=float)
        lam = mean + drift
        mu[j] = mu_j
        if keep_levels:
            levels[j] = lam
    return lam, mu, levels


def _block_fixed_point(problem: BSVIEProblem, tree: Tree, weight_tables,
                       lo: int, hi: int, psi_fields: dict, outers,
                       tol: float, max_sweeps: int):
    """Sweep iteration for the sub-system with outer indices ``outers``,
    inner cells [i, hi), free terms at depth ``hi``.

    Returns converged (Y, mu, below) fields plus iteration diagnostics;
    ``below[j][i]`` holds Z(t_j, t_i) for lo <= i < j within the block.
    """
    # initial guess: conditional expectations of the free terms and their
    # representation integrands
    y = {}
    below = {j: {} for j in outers}
    for i in outers:
        y[i] = tree.conditional_expectation(psi_fields[i], hi, i)
        _, zs = tree.martingale_representation(psi_fields[i], hi, lo)
        for j_idx, l in enumerate(range(lo, min(i, hi))):
            below[i][l] = zs[j_idx]
    mu = {i: {} for i in outers}
    sweeps = 0
    ratios = []
    prev_update = None
    for sweep in range(max_sweeps):
        sweeps = sweep + 1
        new_y, new_mu = {}, {}
        for i in outers:
            lam, mu_i, _ = _outer_pass(
                tree, problem, weight_tables, i, psi_fields[i], hi, i,
                y_at=lambda j: y[j],
                z2_at=lambda j, ii: tree.broadcast(below[j][ii], ii, j))
            new_y[i] = lam
            new_mu[i] = mu_i
        update_sq = 0.0
        for i in outers:
            dy = new_y[i] - y[i]
            update_sq += tree.dt * float(
                tree.expectation((dy ** 2).sum(axis=1)))
            for j, m_val in new_mu[i].items():
                if j in mu[i]:
                    dz = m_val - mu[i][j]
                    update_sq += tree.dt ** 2 * float(
                        tree.expectation((dz ** 2).sum(axis=(1, 2))))
        y, mu = new_y, new_mu
        for i in outers:
            _, zs = tree.martingale_representation(y[i], i, lo)
            below[i] = {l: zs[l - lo] for l in range(lo, i)}
        update = math.sqrt(update_sq)
        if not math.isfinite(update):
            raise DivergenceError(
                "sweep produced non-finite values; check the generator "
                "and its kernel weights")
        if prev_update is not None and prev_update > 0.0:
            ratios.append(update / prev_update)
            if len(ratios) >= 3 and all(r >= 1.0 for r in ratios[-3:]):
                raise DivergenceError(
                    f"sweep updates not contracting on block "
                    f"[{lo}, {hi}]: ratios {ratios[-3:]}")
        if update <= tol:
            break
        prev_update = update
    else:
        raise DivergenceError(f"no convergence within {max_sweeps} sweeps "
                              f"(last update {update:.3e})")
    return y, mu, below, {"sweeps": sweeps, "ratios": ratios}


def solve_bsvie(problem: BSVIEProblem, tree: Tree = None,
                method: str = "fixed_point", tol: float = 1e-12,
                max_sweeps: int = 500,
                partition_budget: float = 0.5) -> MSolution:
    """Adapted M-solution of the backward Volterra equation.

    ``fixed_point`` iterates the whole system; ``block`` partitions the
    horizon so the y/z2 coupling strength stays below
    ``partition_budget`` (split evenly between the two), solves the
    terminal block, and folds the tail into earlier blocks through
    stochastic Fredholm passes.  Both produce the same discrete solution.
    """
    tree = tree or problem.tree
    if tree is not problem.tree:
        raise ValueError("problem free term lives on a different tree")
    N = tree.N
    weight_tables = _term_weights(problem, tree)
    diag = {"method": method, "tol": tol}

    if method == "fixed_point":
        blocks = [(0, N)]
    elif method == "block":
        blocks = _bsvie_blocks(problem, tree, partition_budget)
        diag["blocks"] = blocks
    else:
        raise ValueError(f"unknown method {method!r}")

    Y_fields = [None] * (N + 1)
    Z = TwoParameterProcess.zeros(tree, problem.d)
    sweep_info = []
    psi_fields = {i: problem.psi[i] for i in range(N + 1)}

    for (lo, hi) in reversed(blocks):
        last_block = hi == N
        outers = list(range(lo, N + 1)) if last_block \
            else list(range(lo, hi))
        if not last_block:
            # Fredholm pass: fold the solved tail into free terms at depth
            # hi and record the tail integrands Z(t_i, t_j), j >= hi
            for i in outers:
                lam, mu_i, _ = _outer_pass(
                    tree, problem, weight_tables, i, psi_fields[i], N, hi,
                    y_at=lambda j: Y_fields[j],
                    z2_at=lambda j, ii: tree.broadcast(Z.entry(j, ii),
                                                       ii, j))
                psi_fields[i] = lam
                for j, m_val in mu_i.items():
                    Z.set_entry(i, j, m_val)
        y, mu, below, info = _block_fixed_point(
            problem, tree, weight_tables, lo, hi, psi_fields, outers,
            tol, max_sweeps)
        sweep_info.append(info)
        for i in outers:
            Y_fields[i] = y[i]
            for j, m_val in mu[i].items():
                Z.set_entry(i, j, m_val)
            # full below-diagonal representation (the M-condition)
            _, zs = tree.martingale_representation(y[i], i, 0)
            for j in range(i):
                Z.set_entry(i, j, zs[j])

    Y = AdaptedProcess(tree, Y_fields)
    sol = MSolution(Y, Z, diag)
    diag["sweeps"] = [s["sweeps"] for s in sweep_info]
    diag["contraction_ratios"] = [max(s["ratios"]) if s["ratios"] else 0.0
                                  for s in sweep_info]
    diag["m_condition_residual"] = m_condition_residual(sol, tree)
    diag["equation_residual"] = equation_residual(sol, problem, tree)
    return sol


def _bsvie_blocks(problem: BSVIEProblem, tree: Tree, budget: float):
    """Grid blocks keeping the y/z2 coupling below the contraction budget."""
    if problem.L_z2 is None and problem.L_y is None:
        raise BlockPartitionError(
            "the block method needs declared Lipschitz kernels (L_y, L_z2)")
    half = budget / 2.0
    T = tree.T
    if problem.L_z2 is not None:
        part = find_partition(problem.L_z2, math.sqrt(half))
        if not isinstance(part, Partition):
            raise BlockPartitionError(
                f"z2-kernel partition infeasible: {part.reason}, witness "
                f"t = {part.witness_t:.4g}")
        breakpoints = list(part.breakpoints)
    else:
        breakpoints = [0.0, T]

    def ly_mass(a, b):
        if problem.L_y is None:
            return 0.0
        xs = np.linspace(a, b, 33)
        vals = np.array([problem.L_y.slice_sq(float(x), float(x), b)
                         for x in xs[:-1]])
        if not np.all(np.isfinite(vals)):
            return math.inf
        return float(np.trapezoid(vals, xs[:-1]))

    refined = [0.0]
    for a, b in zip(breakpoints, breakpoints[1:]):
        stack, out = [(a, b)], []
        while stack:
            lo_t, hi_t = stack.pop()
            mass = ly_mass(lo_t, hi_t)
            if mass > half and hi_t - lo_t > 1e-6 * T:
                mid = 0.5 * (lo_t + hi_t)
                stack.extend([(mid, hi_t), (lo_t, mid)])
            elif not math.isfinite(mass):
                raise BlockPartitionError(
                    "y-kernel triangle mass diverges on small blocks")
            else:
                out.append((lo_t, hi_t))
        out.sort()
        refined.extend(h for _, h in out)

    idx = sorted({min(max(int(math.floor(u / tree.dt)), 0), tree.N)
                  for u in refined})
    if idx[0] != 0:
        idx.insert(0, 0)
    if idx[-1] != tree.N:
        idx.append(tree.N)
    return [(a, b) for a, b in zip(idx, idx[1:]) if b > a]


# ---------------------------------------------------------------------------
# parameterized families and Fredholm equations
# ---------------------------------------------------------------------------

@dataclass
class ParamBSDEFamily:
    """Solution of the t-parameterized family of backward equations.

    ``lam[i][r]`` is the value field at inner depth r for outer index i;
    ``mu[i][j]`` the representation integrand on step j.
    """

    lam: dict
    mu: dict


def solve_param_bsde_family(psi: TerminalField, h: Callable, tree: Tree,
                            R_index: int, S_index: int) -> ParamBSDEFamily:
    """Family of backward equations parameterized by the outer time.

    For each outer index i in [S_index, N] the equation runs backward
    from the horizon to depth R_index with generator ``h(t, s, z)``; the
    within-step z is pinned by the exact tree representation, so a single
    pass solves each member.
    """
    if not 0 <= R_index <= S_index <= tree.N:
        raise ValueError("need 0 <= R_index <= S_index <= N")
    d = psi.d
    dummy = _h_problem(psi, h, d, tree.m)
    tables = _term_weights(dummy, tree)
    lam_all, mu_all = {}, {}
    for i in range(S_index, tree.N + 1):
        lam, mu, levels = _outer_pass(
            tree, dummy, tables, i, psi[i], tree.N, R_index,
            y_at=lambda j: None, z2_at=lambda j, ii: None,
            keep_levels=True)
        lam_all[i] = levels
        mu_all[i] = mu
    return ParamBSDEFamily(lam_all, mu_all)


def _h_problem(psi, h, d, m):
    term = GeneratorTerm(fn=lambda t, s, y, z1, z2: h(t, s, z1))
    return BSVIEProblem(psi, [term], d=d, m=m, check_zero=False)


def solve_sfie(psi: TerminalField, h: Callable, tree: Tree,
               R_index: int, S_index: int):
    """Stochastic Fredholm pass over the window [t_S, T].

    For outer indices i in [R_index, S_index] returns the window-start
    fields psi_S(t_i) (measurable at depth S_index) and the integrands
    Z(t_i, t_j) for cells j in [S_index, N); the unknown left endpoint is
    only measurable at the window start, not adapted throughout.
    """
    if not 0 <= R_index <= S_index <= tree.N:
        raise ValueError("need 0 <= R_index <= S_index <= N")
    dummy = _h_problem(psi, h, psi.d, tree.m)
    tables = _term_weights(dummy, tree)
    psi_S, Z = {}, {}
    for i in range(R_index, S_index + 1):
        lam, mu, _ = _outer_pass(
            tree, dummy, tables, i, psi[i], tree.N, S_index,
            y_at=lambda j: None, z2_at=lambda j, ii: None)
        psi_S[i] = lam
        Z[i] = mu
    return psi_S, Z


# ---------------------------------------------------------------------------
# residuals and stability
# ---------------------------------------------------------------------------

def m_condition_residual(sol: MSolution, tree: Tree) -> float:
    """Max node defect of Y(t_i) = E Y(t_i) + sum_{j<i} Z(t_i,t_j) dW_j."""
    worst = 0.0
    for i in range(tree.N + 1):
        mean = tree.conditional_expectation(sol.Y[i], i, 0)
        z_list = [sol.Z.entry(i, j) for j in range(i)]
        recon = tree.broadcast(mean, 0, i)
        if z_list:
            recon = recon + tree.stochastic_integral(z_list, 0, i)
        worst = max(worst, float(np.max(np.abs(sol.Y[i] - recon))))
    return worst


def equation_residual(sol: MSolution, problem: BSVIEProblem,
                      tree: Tree) -> float:
    """Max leaf defect of the discrete backward equation."""
    N, t = tree.N, tree.times
    tables = _term_weights(problem, tree)
    worst = 0.0
    for i in range(N + 1):
        rhs = problem.psi[i].copy()
        for j in range(i, N):
            drift = np.zeros((tree.node_count(j), problem.d))
            for idx, term in enumerate(problem.terms):
                w = tables[idx][i, j]
                if w == 0.0:
                    continue
                z2 = sol.Z.entry(i, j) if j == i \
                    else tree.broadcast(sol.Z.entry(j, i), i, j)
                drift = drift + w * np.asarray(
                    term.fn(t[i], t[j], sol.Y[j], sol.Z.entry(i, j), z2),
                    dtype=float)
            rhs = rhs + tree.broadcast(drift, j, N)
        z_list = [sol.Z.entry(i, j) for j in range(i, N)]
        if z_list:
            rhs = rhs - tree.stochastic_integral(z_list, i, N)
        lhs = tree.broadcast(sol.Y[i], i, N)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst


def stability_gap_bsvie(p: BSVIEProblem, p2: BSVIEProblem,
                        tree: Tree) -> float:
    """Solution-gap to data-gap ratio for two backward problems (C = 1)."""
    s1 = solve_bsvie(p, tree)
    s2 = solve_bsvie(p2, tree)
    lhs_sq = 0.0
    for i in range(tree.N + 1):
        dy = s1.Y[i] - s2.Y[i]
        lhs_sq += tree.dt * float(tree.expectation((dy ** 2).sum(axis=1)))
        for j in range(tree.N):
            dz = s1.Z.entry(i, j) - s2.Z.entry(i, j)
            lhs_sq += tree.dt ** 2 * float(
                tree.expectation((dz ** 2).sum(axis=(1, 2))))

    t = tree.times
    tables1 = _term_weights(p, tree)
    tables2 = _term_weights(p2, tree)
    rhs_sq = 0.0
    for i in range(tree.N + 1):
        dpsi = p.psi[i] - p2.psi[i]
        rhs_sq += tree.dt * float(tree.expectation((dpsi ** 2).sum(axis=1)))
        gsum = np.zeros(tree.node_count(tree.N))
        for j in range(i, tree.N):
            z2 = s2.Z.entry(i, j) if j == i \
                else tree.broadcast(s2.Z.entry(j, i), i, j)
            g1 = sum(tables1[idx][i, j] * np.asarray(
                term.fn(t[i], t[j], s2.Y[j], s2.Z.entry(i, j), z2),
                dtype=float) for idx, term in enumerate(p.terms))
            g2 = sum(tables2[idx][i, j] * np.asarray(
                term.fn(t[i], t[j], s2.Y[j], s2.Z.entry(i, j), z2),
                dtype=float) for idx, term in enumerate(p2.terms))
            gsum = gsum + tree.broadcast(
                np.linalg.norm(np.asarray(g1 - g2), axis=-1), j, tree.N)
        rhs_sq += tree.dt * float(tree.expectation(gsum ** 2))
    if lhs_sq == 0.0:
        return 0.0
    if rhs_sq == 0.0:
        return math.inf
    return math.sqrt(lhs_sq / rhs_sq)


# ---------------------------------------------------------------------------
# named problem constructors
# ---------------------------------------------------------------------------

def make_caputo_bsde(alpha: float, A: np.ndarray, f: Optional[Callable],
                     xi, tree: Tree) -> BSVIEProblem:
    """Backward memory-derivative equation in Volterra form.

    The transformation absorbs the lag kernel into the integrand: the
    free term is the terminal value itself and the generator reads
    (s-t)^(alpha-1) [f(s, y, (s-t)^(1-alpha) z1) - A y] / Gamma(alpha);
    the rescaled z argument vanishes on the diagonal cell, where the
    kernel weight is an exact cell integral.
    """
    if not 0.5 < alpha < 1.0:
        raise ValueError("alpha must lie in (1/2, 1)")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    d = A.shape[0]
    kern = make_fractional(alpha, ANTICAUSAL, tree.T,
                           scale=1.0 / gamma_fn(alpha))

    def fn(t, s, y, z1, z2):
        val = -np.einsum("ab,nb->na", A, y)
        if f is not None:
            val = val + np.asarray(
                f(s, y, (s - t) ** (1.0 - alpha) * z1), dtype=float)
        return val

    xi = np.asarray(xi, dtype=float)
    if xi.ndim == 1:
        xi = xi[:, None]
    psi = TerminalField(tree, [xi.copy() for _ in range(tree.N + 1)])
    return BSVIEProblem(psi, [GeneratorTerm(fn, kernel=kern)], d=d,
                        m=tree.m, L_y=kern, L_z1=kern, L_z2=None,
                        label=f"caputo_bsvie(alpha={alpha})",
                        check_zero=f is None)


def make_linear_adjoint(M1: Callable, M2: Callable, S_kernel: Callable,
                        psi: TerminalField, kernel_y: Kernel = None,
                        kernel_z2: Kernel = None,
                        label: str = "linear_adjoint") -> BSVIEProblem:
    """Linear adjoint-type equation with semigroup-shaped coefficients.

    Generator M1(t)^T S(s-t)^T Y(s) + M2(t)^T S(s-t)^T Z(s, t); optional
    scalar kernels multiply the two pieces separately (used for the
    fractional-Brownian and memory-resolvent variants).
    """
    def fn_y(t, s, y, z1, z2):
        P = (np.atleast_2d(S_kernel(s - t)) @ np.atleast_2d(M1(t))).T
        return np.einsum("ab,nb->na", P, y)

    def fn_z(t, s, y, z1, z2):
        # noise columns are contracted after the adjoint operator acts
        P = (np.atleast_2d(S_kernel(s - t)) @ np.atleast_2d(M2(t))).T
        return np.einsum("ab,nbk->na", P, z2)

    d = psi.d
    terms = [GeneratorTerm(fn_y, kernel=kernel_y),
             GeneratorTerm(fn_z, kernel=kernel_z2)]
    return BSVIEProblem(psi, terms, d=d, m=psi.tree.m,
                        L_y=kernel_y, L_z2=kernel_z2, label=label)
