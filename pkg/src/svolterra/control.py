"""Maximum-principle toolkit for controlled forward Volterra systems.

State, variational, and adjoint solves on the scenario tree, wired so the
discrete adjoint is the literal transpose of the discrete variational
operator: the duality pairing

    E sum_t dt <forcing(t), Y(t)>  =  E sum_t dt <X1(t), cost_x(t)>

then holds to machine precision, turning the first-order optimality
machinery (directional derivatives, stationarity margins, projected
gradient search) into exactly checkable identities.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .backward import BSVIEProblem, GeneratorTerm, MSolution, solve_bsvie
from .kernels import Kernel
from .lattice import AdaptedProcess, TerminalField, Tree


# ---------------------------------------------------------------------------
# convex control regions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoxControlSet:
    lower: tuple
    upper: tuple

    def __post_init__(self):
        if len(self.lower) != len(self.upper):
            raise ValueError("bound dimensions differ")
        if any(l >= u for l, u in zip(self.lower, self.upper)):
            raise ValueError("need lower < upper componentwise")

    @property
    def dim(self):
        return len(self.lower)

    def project(self, u: np.ndarray) -> np.ndarray:
        return np.clip(u, np.asarray(self.lower), np.asarray(self.upper))

    def extreme_points(self) -> np.ndarray:
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        corners = []
        for mask in range(1 << self.dim):
            corners.append([hi[k] if (mask >> k) & 1 else lo[k]
                            for k in range(self.dim)])
        return np.asarray(corners, dtype=float)

    def sample_interior(self, rng, count: int) -> np.ndarray:
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        return lo + (hi - lo) * rng.uniform(size=(count, self.dim))


@dataclass(frozen=True)
class BallControlSet:
    center: tuple
    radius: float

    @property
    def dim(self):
        return len(self.center)

    def project(self, u: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center)
        delta = u - c
        norm = np.linalg.norm(delta, axis=-1, keepdims=True)
        scale = np.minimum(1.0, self.radius / np.maximum(norm, 1e-300))
        return c + delta * scale

    def extreme_points(self) -> np.ndarray:
        c = np.asarray(self.center)
        pts = []
        for k in range(self.dim):
            for sign in (-1.0, 1.0):
                e = np.zeros(self.dim)
                e[k] = sign * self.radius
                pts.append(c + e)
        return np.asarray(pts)

    def sample_interior(self, rng, count: int) -> np.ndarray:
        raw = rng.normal(size=(count, self.dim))
        raw /= np.maximum(np.linalg.norm(raw, axis=1, keepdims=True), 1e-12)
        radii = self.radius * rng.uniform(size=(count, 1)) ** (1.0 / self.dim)
        return np.asarray(self.center) + raw * radii


# ---------------------------------------------------------------------------
# problem data
# ---------------------------------------------------------------------------

def _fd_probe(fn, dfn, args, slot, out_contract, step=1e-5, rtol=1e-4):
    """Central-difference consistency check of one derivative map."""
    base = list(args)
    x = np.asarray(base[slot], dtype=float)
    analytic = np.asarray(dfn(*base), dtype=float)
    for comp in range(x.shape[-1]):
        bump = np.zeros_like(x)
        bump[..., comp] = step
        base[slot] = x + bump
        up = np.asarray(fn(*base), dtype=float)
        base[slot] = x - bump
        dn = np.asarray(fn(*base), dtype=float)
        base[slot] = x
        fd = (up - dn) / (2.0 * step)
        ana = out_contract(analytic, comp)
        scale = max(float(np.max(np.abs(ana))), 1.0)
        if float(np.max(np.abs(fd - ana))) > rtol * scale:
            return False
    return True


@dataclass
class ControlProblem:
    """Coefficients of the controlled Volterra state equation plus cost.

    All maps act on node arrays: ``b(t, s, x, u) -> (n, d)``,
    ``sigma -> (n, d, m)``, derivatives append the differentiation axis
    (``b_x -> (n, d, d)``, ``b_u -> (n, d, du)``, ``sigma_x ->
    (n, d, m, d)``, ``sigma_u -> (n, d, m, du)``); the running cost is
    scalar with gradients ``g_x -> (n, d)``, ``g_u -> (n, du)``.
    Derivative maps are finite-difference checked at construction.
    """

    horizon: float
    phi: Callable
    b: Callable
    sigma: Callable
    b_x: Callable
    b_u: Callable
    sigma_x: Callable
    sigma_u: Callable
    g: Callable
    g_x: Callable
    g_u: Callable
    control_set: object
    d: int = 1
    m: int = 1
    K1: Optional[Kernel] = None
    K2: Optional[Kernel] = None
    label: str = ""

    @property
    def du(self):
        return self.control_set.dim

    def __post_init__(self):
        rng = np.random.default_rng(12345)
        T = self.horizon
        for _ in range(3):
            s = rng.uniform(0.1, 0.8) * T
            t = rng.uniform(s + 0.05 * T, T)
            x = rng.normal(size=(1, self.d))
            u = np.atleast_2d(self.control_set.project(
                rng.normal(size=self.du)))
            checks = [
                (self.b, self.b_x, (t, s, x, u), 2,
                 lambda a, c: a[..., c]),
                (self.b, self.b_u, (t, s, x, u), 3,
                 lambda a, c: a[..., c]),
                (self.sigma, self.sigma_x, (t, s, x, u), 2,
                 lambda a, c: a[..., c]),
                (self.sigma, self.sigma_u, (t, s, x, u), 3,
                 lambda a, c: a[..., c]),
                (self.g, self.g_x, (t, x, u), 1, lambda a, c: a[..., c]),
                (self.g, self.g_u, (t, x, u), 2, lambda a, c: a[..., c]),
            ]
            for fn, dfn, args, slot, contract in checks:
                if not _fd_probe(fn, dfn, args, slot, contract):
                    raise ValueError(
                        "a declared derivative map fails the finite-"
                        "difference consistency probe")


def constant_control(tree: Tree, value) -> AdaptedProcess:
    value = np.asarray(value, dtype=float).reshape(-1)
    return AdaptedProcess(tree, [np.tile(value, (tree.node_count(i), 1))
                                 for i in range(tree.N + 1)])


# ---------------------------------------------------------------------------
# state / cost / variational solves
# ---------------------------------------------------------------------------

def solve_state(cp: ControlProblem, u: AdaptedProcess,
                tree: Tree) -> AdaptedProcess:
    """Forward recursion of the controlled state equation (left-point
    quadrature, one dt weight per cell)."""
    t = tree.times
    X = [np.tile(np.asarray(cp.phi(0.0), dtype=float).reshape(-1),
                 (1, 1))]
    for i in range(1, tree.N + 1):
        acc = np.tile(np.asarray(cp.phi(t[i]), dtype=float).reshape(-1),
                      (tree.node_count(i), 1))
        z_list = []
        for j in range(i):
            acc += tree.broadcast(
                tree.dt * np.asarray(cp.b(t[i], t[j], X[j], u[j]),
                                     dtype=float), j, i)
            z_list.append(np.asarray(cp.sigma(t[i], t[j], X[j], u[j]),
                                     dtype=float))
        acc += tree.stochastic_integral(z_list, 0, i)
        X.append(acc)
    return AdaptedProcess(tree, X)


def cost(cp: ControlProblem, u: AdaptedProcess, tree: Tree,
         state: AdaptedProcess = None) -> float:
    """Expected running cost, left rule over the time cells."""
    X = state if state is not None else solve_state(cp, u, tree)
    total = 0.0
    for i in range(tree.N):
        vals = np.asarray(cp.g(tree.times[i], X[i], u[i]), dtype=float)
        total += tree.dt * float(tree.expectation(vals.reshape(-1)))
    return total


def solve_variational(cp: ControlProblem, u_bar: AdaptedProcess,
                      v: AdaptedProcess, tree: Tree,
                      state: AdaptedProcess = None) -> AdaptedProcess:
    """Directional state derivative along v - u_bar (linearized recursion)."""
    X = state if state is not None else solve_state(cp, u_bar, tree)
    t = tree.times
    X1 = [np.zeros((1, cp.d))]
    for i in range(1, tree.N + 1):
        acc = np.zeros((tree.node_count(i), cp.d))
        z_list = []
        for j in range(i):
            du = v[j] - u_bar[j]
            bx = np.asarray(cp.b_x(t[i], t[j], X[j], u_bar[j]), dtype=float)
            bu = np.asarray(cp.b_u(t[i], t[j], X[j], u_bar[j]), dtype=float)
            acc += tree.broadcast(
                tree.dt * (np.einsum("nab,nb->na", bx, X1[j])
                           + np.einsum("nau,nu->na", bu, du)), j, i)
            sx = np.asarray(cp.sigma_x(t[i], t[j], X[j], u_bar[j]),
                            dtype=float)
            su = np.asarray(cp.sigma_u(t[i], t[j], X[j], u_bar[j]),
                            dtype=float)
            z_list.append(np.einsum("namb,nb->nam", sx, X1[j])
                          + np.einsum("namu,nu->nam", su, du))
        acc += tree.stochastic_integral(z_list, 0, i)
        X1.append(acc)
    return AdaptedProcess(tree, X1)


def variational_forcing(cp: ControlProblem, u_bar: AdaptedProcess,
                        v: AdaptedProcess, tree: Tree,
                        state: AdaptedProcess = None) -> AdaptedProcess:
    """The inhomogeneous part of the variational equation (control bumps)."""
    X = state if state is not None else solve_state(cp, u_bar, tree)
    t = tree.times
    out = [np.zeros((1, cp.d))]
    for i in range(1, tree.N + 1):
        acc = np.zeros((tree.node_count(i), cp.d))
        z_list = []
        for j in range(i):
            du = v[j] - u_bar[j]
            bu = np.asarray(cp.b_u(t[i], t[j], X[j], u_bar[j]), dtype=float)
            acc += tree.broadcast(
                tree.dt * np.einsum("nau,nu->na", bu, du), j, i)
            su = np.asarray(cp.sigma_u(t[i], t[j], X[j], u_bar[j]),
                            dtype=float)
            z_list.append(np.einsum("namu,nu->nam", su, du))
        acc += tree.stochastic_integral(z_list, 0, i)
        out.append(acc)
    return AdaptedProcess(tree, out)


# ---------------------------------------------------------------------------
# adjoint and duality
# ---------------------------------------------------------------------------

def solve_adjoint(cp: ControlProblem, x_bar: AdaptedProcess,
                  u_bar: AdaptedProcess, tree: Tree,
                  tol: float = 1e-14) -> MSolution:
    """Adjoint backward Volterra equation with exact-transpose weights.

    Generator b_x(s, t)^T Y(s) + sigma_x(s, t)^T Z(s, t) with coefficients
    frozen at the outer time's state; the drift weight table excludes the
    diagonal cell because the discrete variational operator has no
    diagonal entry, and the diffusion table matches the dt produced by
    squaring tree increments.
    """
    N, t, dt = tree.N, tree.times, tree.dt

    bx_cache, sx_cache = {}, {}

    def bx(j, r):
        if (j, r) not in bx_cache:
            xs = tree.broadcast(x_bar[r], r, j)
            us = tree.broadcast(u_bar[r], r, j)
            bx_cache[(j, r)] = np.asarray(
                cp.b_x(t[j], t[r], xs, us), dtype=float)
        return bx_cache[(j, r)]

    def sx(j, r):
        if (j, r) not in sx_cache:
            xs = tree.broadcast(x_bar[r], r, j)
            us = tree.broadcast(u_bar[r], r, j)
            sx_cache[(j, r)] = np.asarray(
                cp.sigma_x(t[j], t[r], xs, us), dtype=float)
        return sx_cache[(j, r)]

    def fn_b(tt, ss, y, z1, z2):
        j, r = int(round(ss / dt)), int(round(tt / dt))
        return np.einsum("nab,na->nb", bx(j, r), y)

    def fn_s(tt, ss, y, z1, z2):
        j, r = int(round(ss / dt)), int(round(tt / dt))
        return np.einsum("namb,nam->nb", sx(j, r), z2)

    weights = np.zeros((N + 1, N))
    for r in range(N + 1):
        for j in range(r + 1, N):
            weights[r, j] = dt

    psi_fields = []
    for r in range(N + 1):
        gx = np.asarray(cp.g_x(t[r], x_bar[r], u_bar[r]), dtype=float)
        psi_fields.append(tree.broadcast(gx, r, N))
    psi = TerminalField(tree, psi_fields)

    problem = BSVIEProblem(
        psi, [GeneratorTerm(fn_b, weights=weights),
              GeneratorTerm(fn_s, weights=weights.copy())],
        d=cp.d, m=tree.m, check_zero=False, label="adjoint")
    return solve_bsvie(problem, tree, tol=tol)


def duality_gap(cp: ControlProblem, u_bar: AdaptedProcess,
                v: AdaptedProcess, tree: Tree) -> float:
    """|E sum dt <forcing, Y> - E sum dt <X1, g_x>| for the pair of
    variational and adjoint solves (zero to machine precision under the
    transposed discretization)."""
    X = solve_state(cp, u_bar, tree)
    X1 = solve_variational(cp, u_bar, v, tree, state=X)
    forcing = variational_forcing(cp, u_bar, v, tree, state=X)
    adj = solve_adjoint(cp, X, u_bar, tree)
    t = tree.times
    lhs = rhs = 0.0
    for i in range(tree.N):
        lhs += tree.dt * float(tree.expectation(
            (forcing[i] * adj.Y[i]).sum(axis=1)))
        gx = np.asarray(cp.g_x(t[i], X[i], u_bar[i]), dtype=float)
        rhs += tree.dt * float(tree.expectation((X1[i] * gx).sum(axis=1)))
    return abs(lhs - rhs)


def mp_gradient(cp: ControlProblem, u_bar: AdaptedProcess, tree: Tree,
                state: AdaptedProcess = None,
                adjoint: MSolution = None) -> AdaptedProcess:
    """The variational-inequality gradient process.

    grad(t) = g_u(t) + E[ sum_{s > t} dt ( b_u(s,t)^T Y(s)
                                          + sigma_u(s,t)^T Z(s,t) ) | F_t ].
    """
    X = state if state is not None else solve_state(cp, u_bar, tree)
    adj = adjoint if adjoint is not None else solve_adjoint(cp, X, u_bar,
                                                            tree)
    t, dt = tree.times, tree.dt
    grads = []
    for r in range(tree.N):
        gu = np.asarray(cp.g_u(t[r], X[r], u_bar[r]), dtype=float)
        acc = gu.copy()
        for j in range(r + 1, tree.N):
            bu = np.asarray(cp.b_u(t[j], t[r], X[r], u_bar[r]), dtype=float)
            ce_y = tree.conditional_expectation(adj.Y[j], j, r)
            acc += dt * np.einsum("nau,na->nu", bu, ce_y)
            su = np.asarray(cp.sigma_u(t[j], t[r], X[r], u_bar[r]),
                            dtype=float)
            acc += dt * np.einsum("namu,nam->nu", su, adj.Z.entry(j, r))
        grads.append(acc)
    grads.append(np.zeros((tree.node_count(tree.N), cp.du)))
    return AdaptedProcess(tree, grads)


def pair_with_direction(tree: Tree, grad: AdaptedProcess,
                        u: AdaptedProcess, u_bar: AdaptedProcess) -> float:
    """E sum_t dt <grad(t), u(t) - u_bar(t)>."""
    total = 0.0
    for i in range(tree.N):
        total += tree.dt * float(tree.expectation(
            (grad[i] * (u[i] - u_bar[i])).sum(axis=1)))
    return total


def check_stationarity(cp: ControlProblem, u_bar: AdaptedProcess,
                       tree: Tree, probe_count: int = 16,
                       seed: int = 0) -> float:
    """Min over probe controls of the first-order pairing.

    Probes are all extreme points of the control region plus random
    interior points (constant-in-time controls); a nonnegative minimum
    certifies discrete first-order optimality at u_bar.
    """
    grad = mp_gradient(cp, u_bar, tree)
    rng = np.random.default_rng(seed)
    probes = [p for p in cp.control_set.extreme_points()]
    probes.extend(cp.control_set.sample_interior(rng, probe_count))
    margin = math.inf
    for point in probes:
        u = constant_control(tree, point)
        margin = min(margin, pair_with_direction(tree, grad, u, u_bar))
    return margin


def fd_cost_derivative(cp: ControlProblem, u_bar: AdaptedProcess,
                       v: AdaptedProcess, tree: Tree,
                       eps_list=(1e-2, 1e-3, 1e-4)) -> dict:
    """Finite-difference directional derivatives against the analytic
    pairing; the error column decays linearly in eps for smooth costs."""
    grad = mp_gradient(cp, u_bar, tree)
    analytic = pair_with_direction(tree, grad, v, u_bar)
    J0 = cost(cp, u_bar, tree)
    fd, errors = [], []
    for eps in eps_list:
        u_eps = AdaptedProcess(tree, [u_bar[i] + eps * (v[i] - u_bar[i])
                                      for i in range(tree.N + 1)])
        slope = (cost(cp, u_eps, tree) - J0) / eps
        fd.append(slope)
        errors.append(abs(slope - analytic))
    return {"eps": list(eps_list), "fd": fd, "analytic": analytic,
            "errors": errors}


def projected_gradient_search(cp: ControlProblem, u0: AdaptedProcess,
                              tree: Tree, steps: int = 200,
                              rate: float = 0.5) -> tuple:
    """Plain projected gradient descent; returns (control, trace)."""
    u = AdaptedProcess(tree, [u0[i].copy() for i in range(tree.N + 1)])
    trace = {"cost": [], "grad_norm": []}
    for _ in range(steps):
        X = solve_state(cp, u, tree)
        grad = mp_gradient(cp, u, tree, state=X)
        gnorm = math.sqrt(sum(
            tree.dt * float(tree.expectation((grad[i] ** 2).sum(axis=1)))
            for i in range(tree.N)))
        trace["cost"].append(cost(cp, u, tree, state=X))
        trace["grad_norm"].append(gnorm)
        new_vals = []
        for i in range(tree.N + 1):
            stepped = u[i] - rate * grad[i]
            new_vals.append(np.asarray(cp.control_set.project(stepped),
                                       dtype=float))
        u = AdaptedProcess(tree, new_vals)
        if gnorm < 1e-12:
            break
    return u, trace
