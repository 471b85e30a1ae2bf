"""Maximum principle for controlled delay evolution systems.

The state carries a pointwise delay y(t) = x(t - delta) and an
exponentially weighted moving average z(t) over the trailing window; the
variational dynamics are rewritten as one Volterra system with a tripled
state (x-part, delayed part, window part), whose semigroup-shaped block
coefficients make the delayed component reproduce the direct delay-buffer
recursion cell by cell.  The adjoint system is the exact transpose of
that block discretization, and the scalar processes (p, q) aggregate its
components into the Hamiltonian gradient used by the maximum condition.

The delay must sit on the time grid (delta = k * dt); the window average
uses the left-point rule with exact exponential cell weights.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import expm

from .backward import BSVIEProblem, GeneratorTerm, MSolution, solve_bsvie
from .control import _fd_probe
from .lattice import AdaptedProcess, TerminalField, Tree


@dataclass
class DelayProblem:
    """Coefficients of the controlled delay evolution system.

    The drift/diffusion/running-cost maps receive the tuple
    (t, x, y, z, u, mu) as node arrays; derivative maps append the
    differentiation axis as in :class:`ControlProblem`.  ``xi`` is the
    deterministic initial state trajectory on [-delta, 0] and ``eta`` the
    initial control on [-delta, 0).
    """

    horizon: float
    M: np.ndarray
    delta: float
    lam: float
    b: Callable
    sigma: Callable
    b_x: Callable
    b_y: Callable
    b_z: Callable
    b_u: Callable
    b_mu: Callable
    sigma_x: Callable
    sigma_y: Callable
    sigma_z: Callable
    sigma_u: Callable
    sigma_mu: Callable
    l: Callable
    l_x: Callable
    l_y: Callable
    l_z: Callable
    l_u: Callable
    l_mu: Callable
    h: Callable
    h_x: Callable
    h_y: Callable
    h_z: Callable
    xi: Callable
    eta: Callable
    control_set: object
    d: int = 1
    m: int = 1
    label: str = ""

    @property
    def du(self):
        return self.control_set.dim

    def __post_init__(self):
        self.M = np.atleast_2d(np.asarray(self.M, dtype=float))
        if not 0.0 < self.delta < self.horizon:
            raise ValueError("need 0 < delta < horizon")
        rng = np.random.default_rng(777)
        t = 0.4 * self.horizon
        x = rng.normal(size=(1, self.d))
        y = rng.normal(size=(1, self.d))
        z = rng.normal(size=(1, self.d))
        u = np.atleast_2d(self.control_set.project(
            rng.normal(size=self.du)))
        mu = np.atleast_2d(self.control_set.project(
            rng.normal(size=self.du)))
        args = (t, x, y, z, u, mu)
        pick = lambda a, c: a[..., c]
        checks = [(self.b, self.b_x, 1), (self.b, self.b_y, 2),
                  (self.b, self.b_z, 3), (self.b, self.b_u, 4),
                  (self.b, self.b_mu, 5),
                  (self.sigma, self.sigma_x, 1),
                  (self.sigma, self.sigma_y, 2),
                  (self.sigma, self.sigma_z, 3),
                  (self.sigma, self.sigma_u, 4),
                  (self.sigma, self.sigma_mu, 5),
                  (self.l, self.l_x, 1), (self.l, self.l_y, 2),
                  (self.l, self.l_z, 3), (self.l, self.l_u, 4),
                  (self.l, self.l_mu, 5)]
        for fn, dfn, slot in checks:
            if not _fd_probe(fn, dfn, args, slot, pick):
                raise ValueError("a delay-problem derivative map fails the "
                                 "finite-difference probe")
        hargs = (x, y, z)
        for dfn, slot in [(self.h_x, 0), (self.h_y, 1), (self.h_z, 2)]:
            if not _fd_probe(self.h, dfn, hargs, slot, pick):
                raise ValueError("a terminal-cost derivative map fails the "
                                 "finite-difference probe")

    def delay_steps(self, tree: Tree) -> int:
        k = self.delta / tree.dt
        if abs(k - round(k)) > 1e-9:
            raise ValueError(
                f"delta = {self.delta} is not a grid multiple of "
                f"dt = {tree.dt}; snap the delay to the grid first")
        return int(round(k))

    def semigroup(self, tree: Tree):
        """S(l * dt) for l = 0..N."""
        return [expm(l * tree.dt * self.M) for l in range(tree.N + 1)]

    def window_weights(self, tree: Tree) -> np.ndarray:
        """Exact cell integrals of e^{lam * theta} over the window cells."""
        k = self.delay_steps(tree)
        edges = -self.delta + tree.dt * np.arange(k + 1)
        if self.lam == 0.0:
            return np.diff(edges)
        return (np.exp(self.lam * edges[1:])
                - np.exp(self.lam * edges[:-1])) / self.lam


@dataclass
class DelayTrajectory:
    x: AdaptedProcess
    y: AdaptedProcess
    z: AdaptedProcess
    u: AdaptedProcess
    mu: AdaptedProcess

    def theta(self, i):
        return (self.x[i], self.y[i], self.z[i], self.u[i], self.mu[i])


def _control_with_initial(dp: DelayProblem, u: AdaptedProcess, tree: Tree,
                          i: int) -> np.ndarray:
    """mu(t_i) = u(t_i - delta), falling back to the initial control."""
    k = dp.delay_steps(tree)
    if i >= k:
        return tree.broadcast(u[i - k], i - k, i)
    return np.tile(np.asarray(dp.eta(tree.times[i] - dp.delta),
                              dtype=float).reshape(-1),
                   (tree.node_count(i), 1))


def solve_delay_state(dp: DelayProblem, u: AdaptedProcess,
                      tree: Tree) -> DelayTrajectory:
    """Mild-form recursion with explicit delay buffers.

    x(t_i) = S(t_i) xi(0) + sum_{j<i} dt S(t_i - t_j) b_j
                          + sum_{j<i} S(t_i - t_j) sigma_j dW_j,
    with the delayed value read from the buffer (or the initial
    trajectory) and the window average from the exact-weight rule.
    """
    k = dp.delay_steps(tree)
    S = dp.semigroup(tree)
    gamma = dp.window_weights(tree)
    t = tree.times
    x0 = np.asarray(dp.xi(0.0), dtype=float).reshape(-1)

    xs, ys, zs, mus = [], [], [], []

    def delayed(i):
        if i >= k:
            return tree.broadcast(xs[i - k], i - k, i)
        return np.tile(np.asarray(dp.xi(t[i] - dp.delta),
                                  dtype=float).reshape(-1),
                       (tree.node_count(i), 1))

    def window(i):
        acc = np.zeros((tree.node_count(i), dp.d))
        for l in range(k):
            q = i - k + l
            if q >= 0:
                acc += gamma[l] * tree.broadcast(xs[q], q, i)
            else:
                acc += gamma[l] * np.asarray(dp.xi(t[i] - dp.delta
                                                   + l * tree.dt),
                                             dtype=float).reshape(1, -1)
        return acc

    drifts, diffs = [], []
    for i in range(tree.N + 1):
        acc = np.tile(S[i] @ x0, (tree.node_count(i), 1))
        z_list = []
        for j in range(i):
            acc += tree.broadcast(
                tree.dt * np.einsum("ab,nb->na", S[i - j], drifts[j]), j, i)
            z_list.append(np.einsum("ab,nbk->nak", S[i - j], diffs[j]))
        if z_list:
            acc += tree.stochastic_integral(z_list, 0, i)
        xs.append(acc)
        ys.append(delayed(i))
        zs.append(window(i))
        mus.append(_control_with_initial(dp, u, tree, i))
        theta = (t[i], xs[i], ys[i], zs[i], u[i], mus[i])
        drifts.append(np.asarray(dp.b(*theta), dtype=float))
        diffs.append(np.asarray(dp.sigma(*theta), dtype=float))
    return DelayTrajectory(AdaptedProcess(tree, xs), AdaptedProcess(tree, ys),
                           AdaptedProcess(tree, zs), u,
                           AdaptedProcess(tree, mus))


def cost_delay(dp: DelayProblem, u: AdaptedProcess, tree: Tree,
               traj: DelayTrajectory = None) -> float:
    traj = traj or solve_delay_state(dp, u, tree)
    total = 0.0
    for i in range(tree.N):
        vals = np.asarray(dp.l(tree.times[i], *traj.theta(i)), dtype=float)
        total += tree.dt * float(tree.expectation(vals.reshape(-1)))
    term = np.asarray(dp.h(traj.x[tree.N], traj.y[tree.N], traj.z[tree.N]),
                      dtype=float)
    return total + float(tree.expectation(term.reshape(-1)))


# ---------------------------------------------------------------------------
# augmented Volterra form of the variational dynamics
# ---------------------------------------------------------------------------

@dataclass
class AugmentedDelaySVIE:
    """Block coefficients of the tripled variational Volterra system.

    ``A(i, j)`` maps the depth-j tripled state through a (3d, 3d) block
    matrix per node; ``C(i, j)`` adds the noise axis; the forcing pair
    ``(Bvec, Dmat)`` carries the control variation.  Solving is a plain
    forward recursion; the second block component coincides with the
    delayed first one and the third with the window average, cell by
    cell.
    """

    dp: DelayProblem
    tree: Tree
    traj: DelayTrajectory
    du_field: list
    S: list = field(default_factory=list)
    gamma: np.ndarray = None

    def __post_init__(self):
        self.S = self.dp.semigroup(self.tree)
        self.gamma = self.dp.window_weights(self.tree)
        self.k = self.dp.delay_steps(self.tree)
        t = self.tree.times
        self._coef = {}
        for j in range(self.tree.N + 1):
            theta = (t[j],) + self.traj.theta(j)
            self._coef[j] = {
                "bx": np.asarray(self.dp.b_x(*theta), dtype=float),
                "by": np.asarray(self.dp.b_y(*theta), dtype=float),
                "bz": np.asarray(self.dp.b_z(*theta), dtype=float),
                "bu": np.asarray(self.dp.b_u(*theta), dtype=float),
                "bmu": np.asarray(self.dp.b_mu(*theta), dtype=float),
                "sx": np.asarray(self.dp.sigma_x(*theta), dtype=float),
                "sy": np.asarray(self.dp.sigma_y(*theta), dtype=float),
                "sz": np.asarray(self.dp.sigma_z(*theta), dtype=float),
                "su": np.asarray(self.dp.sigma_u(*theta), dtype=float),
                "smu": np.asarray(self.dp.sigma_mu(*theta), dtype=float),
            }

    def _lagged(self, i, j):
        # semigroup lag for the delayed row; None outside the indicator
        if i - j > self.k:
            return self.S[i - j - self.k]
        return None

    def A(self, i: int, j: int) -> np.ndarray:
        d, tree = self.dp.d, self.tree
        n = tree.node_count(j)
        c = self._coef[j]
        out = np.zeros((n, 3 * d, 3 * d))
        row1 = [np.einsum("ab,nbc->nac", self.S[i - j], c[key])
                for key in ("bx", "by", "bz")]
        for blk, mat in enumerate(row1):
            out[:, 0:d, blk * d:(blk + 1) * d] = mat
        lag = self._lagged(i, j)
        if lag is not None:
            for blk, key in enumerate(("bx", "by", "bz")):
                out[:, d:2 * d, blk * d:(blk + 1) * d] = \
                    np.einsum("ab,nbc->nac", lag, c[key])
        # window row: exact cell weight over [t_j, t_{j+1}], scaled to a
        # dt-weighted Volterra entry
        if 0 < i - j <= self.k:
            w = self.gamma[self.k - (i - j)] / tree.dt
            out[:, 2 * d:3 * d, 0:d] = w * np.tile(np.eye(d), (n, 1, 1))
        return out

    def C(self, i: int, j: int) -> np.ndarray:
        d, m, tree = self.dp.d, self.dp.m, self.tree
        n = tree.node_count(j)
        c = self._coef[j]
        out = np.zeros((n, 3 * d, m, 3 * d))
        for blk, key in enumerate(("sx", "sy", "sz")):
            out[:, 0:d, :, blk * d:(blk + 1) * d] = \
                np.einsum("ab,nbmc->namc", self.S[i - j], c[key])
        lag = self._lagged(i, j)
        if lag is not None:
            for blk, key in enumerate(("sx", "sy", "sz")):
                out[:, d:2 * d, :, blk * d:(blk + 1) * d] = \
                    np.einsum("ab,nbmc->namc", lag, c[key])
        return out

    def forcing(self, i: int, j: int):
        d = self.dp.d
        n = self.tree.node_count(j)
        c = self._coef[j]
        du = self.du_field[j]
        dmu = self.dmu_field(j)
        db = np.einsum("nau,nu->na", c["bu"], du) \
            + np.einsum("nau,nu->na", c["bmu"], dmu)
        ds = np.einsum("namu,nu->nam", c["su"], du) \
            + np.einsum("namu,nu->nam", c["smu"], dmu)
        Bvec = np.zeros((n, 3 * d))
        Dmat = np.zeros((n, 3 * d, self.dp.m))
        Bvec[:, 0:d] = np.einsum("ab,nb->na", self.S[i - j], db)
        Dmat[:, 0:d] = np.einsum("ab,nbm->nam", self.S[i - j], ds)
        lag = self._lagged(i, j)
        if lag is not None:
            Bvec[:, d:2 * d] = np.einsum("ab,nb->na", lag, db)
            Dmat[:, d:2 * d] = np.einsum("ab,nbm->nam", lag, ds)
        return Bvec, Dmat

    def dmu_field(self, j):
        # control variation arriving through the delayed channel
        if j >= self.k:
            return self.tree.broadcast(self.du_field[j - self.k],
                                       j - self.k, j)
        return np.zeros((self.tree.node_count(j), self.dp.du))

    def solve(self) -> AdaptedProcess:
        tree = self.tree
        X = [np.zeros((1, 3 * self.dp.d))]
        for i in range(1, tree.N + 1):
            acc = np.zeros((tree.node_count(i), 3 * self.dp.d))
            z_list = []
            for j in range(i):
                Bvec, Dmat = self.forcing(i, j)
                acc += tree.broadcast(
                    tree.dt * (np.einsum("nab,nb->na", self.A(i, j), X[j])
                               + Bvec), j, i)
                z_list.append(np.einsum("namb,nb->nam", self.C(i, j), X[j])
                              + Dmat)
            acc += tree.stochastic_integral(z_list, 0, i)
            X.append(acc)
        return AdaptedProcess(tree, X)


def delay_to_svie(dp: DelayProblem, u_bar: AdaptedProcess,
                  v: AdaptedProcess, tree: Tree,
                  traj: DelayTrajectory = None) -> AugmentedDelaySVIE:
    """Augmented variational system along the direction v - u_bar."""
    traj = traj or solve_delay_state(dp, u_bar, tree)
    du_field = [v[i] - u_bar[i] for i in range(tree.N + 1)]
    return AugmentedDelaySVIE(dp, tree, traj, du_field)


def solve_delay_variational_direct(dp: DelayProblem, u_bar: AdaptedProcess,
                                   v: AdaptedProcess, tree: Tree,
                                   traj: DelayTrajectory = None
                                   ) -> AdaptedProcess:
    """Step-by-step linearized delay recursion with explicit buffers.

    Independent of the augmented rewrite: maintains its own delayed and
    window buffers for the first variational component.
    """
    traj = traj or solve_delay_state(dp, u_bar, tree)
    k = dp.delay_steps(tree)
    S = dp.semigroup(tree)
    gamma = dp.window_weights(tree)
    t = tree.times
    x1 = [np.zeros((1, dp.d))]
    drifts, diffs = [], []
    for i in range(tree.N + 1):
        if i > 0:
            acc = np.zeros((tree.node_count(i), dp.d))
            z_list = []
            for j in range(i):
                acc += tree.broadcast(
                    tree.dt * np.einsum("ab,nb->na", S[i - j], drifts[j]),
                    j, i)
                z_list.append(np.einsum("ab,nbk->nak", S[i - j], diffs[j]))
            acc += tree.stochastic_integral(z_list, 0, i)
            x1.append(acc)
        y1 = tree.broadcast(x1[i - k], i - k, i) if i >= k \
            else np.zeros((tree.node_count(i), dp.d))
        z1 = np.zeros((tree.node_count(i), dp.d))
        for l in range(k):
            q = i - k + l
            if q >= 0:
                z1 += gamma[l] * tree.broadcast(x1[q], q, i)
        du = v[i] - u_bar[i]
        dmu = tree.broadcast(v[i - k] - u_bar[i - k], i - k, i) if i >= k \
            else np.zeros((tree.node_count(i), dp.du))
        theta = (t[i],) + traj.theta(i)
        db = np.einsum("nab,nb->na", np.asarray(dp.b_x(*theta)), x1[i]) \
            + np.einsum("nab,nb->na", np.asarray(dp.b_y(*theta)), y1) \
            + np.einsum("nab,nb->na", np.asarray(dp.b_z(*theta)), z1) \
            + np.einsum("nau,nu->na", np.asarray(dp.b_u(*theta)), du) \
            + np.einsum("nau,nu->na", np.asarray(dp.b_mu(*theta)), dmu)
        ds = np.einsum("namb,nb->nam", np.asarray(dp.sigma_x(*theta)), x1[i]) \
            + np.einsum("namb,nb->nam", np.asarray(dp.sigma_y(*theta)), y1) \
            + np.einsum("namb,nb->nam", np.asarray(dp.sigma_z(*theta)), z1) \
            + np.einsum("namu,nu->nam", np.asarray(dp.sigma_u(*theta)), du) \
            + np.einsum("namu,nu->nam", np.asarray(dp.sigma_mu(*theta)), dmu)
        drifts.append(db)
        diffs.append(ds)
    return AdaptedProcess(tree, x1)


# ---------------------------------------------------------------------------
# adjoint system, p/q processes, Hamilton function
# ---------------------------------------------------------------------------

@dataclass
class DelayAdjoint:
    eta_bar: AdaptedProcess     # conditional expectations of the terminal
    zeta: list                  # its representation integrands per step
    solution: MSolution         # tripled (Y, Z)
    p: AdaptedProcess
    q: list                     # per depth: (nodes, d, m) arrays
    H_bar: np.ndarray


def solve_delay_adjoint(dp: DelayProblem, traj: DelayTrajectory,
                        tree: Tree, tol: float = 1e-14) -> DelayAdjoint:
    """Adjoint of the augmented system with exact-transpose weights.

    The terminal field is represented first (its integrands feed the free
    term), then the tripled backward Volterra system is solved, and the
    (p, q) aggregates are assembled from semigroup-weighted sums of the
    components.
    """
    N, t, dt = tree.N, tree.times, tree.dt
    d = dp.d
    k = dp.delay_steps(tree)
    aug = AugmentedDelaySVIE(dp, tree, traj,
                             [np.zeros((tree.node_count(i), dp.du))
                              for i in range(N + 1)])
    S = aug.S

    H_bar = np.concatenate([
        np.asarray(dp.h_x(traj.x[N], traj.y[N], traj.z[N]), dtype=float),
        np.asarray(dp.h_y(traj.x[N], traj.y[N], traj.z[N]), dtype=float),
        np.asarray(dp.h_z(traj.x[N], traj.y[N], traj.z[N]), dtype=float),
    ], axis=1)
    mean0, zeta = tree.martingale_representation(H_bar, N, 0)
    eta_bar = AdaptedProcess(
        tree, [tree.conditional_expectation(H_bar, N, r)
               for r in range(N + 1)])

    def L_bar(r):
        theta = (t[r],) + traj.theta(r)
        return np.concatenate([
            np.asarray(dp.l_x(*theta), dtype=float),
            np.asarray(dp.l_y(*theta), dtype=float),
            np.asarray(dp.l_z(*theta), dtype=float)], axis=1)

    psi_fields = []
    for r in range(N + 1):
        base = tree.broadcast(L_bar(r), r, N) if r < N \
            else np.zeros((tree.node_count(N), 3 * d))
        if r < N:
            A_Nr = tree.broadcast(aug.A(N, r), r, N)
            base = base + np.einsum("nab,na->nb", A_Nr, H_bar)
            C_Nr = tree.broadcast(aug.C(N, r), r, N)
            base = base + np.einsum("namb,nam->nb", C_Nr,
                                    tree.broadcast(zeta[r], r, N))
        psi_fields.append(base)
    psi = TerminalField(tree, psi_fields)

    def fn_A(tt, ss, y, z1, z2):
        j, r = int(round(ss / dt)), int(round(tt / dt))
        Ajr = tree.broadcast(aug.A(j, r), r, j)
        return np.einsum("nab,na->nb", Ajr, y)

    def fn_C(tt, ss, y, z1, z2):
        j, r = int(round(ss / dt)), int(round(tt / dt))
        Cjr = tree.broadcast(aug.C(j, r), r, j)
        return np.einsum("namb,nam->nb", Cjr, z2)

    weights = np.zeros((N + 1, N))
    for r in range(N + 1):
        for j in range(r + 1, N):
            weights[r, j] = dt
    problem = BSVIEProblem(
        psi, [GeneratorTerm(fn_A, weights=weights),
              GeneratorTerm(fn_C, weights=weights.copy())],
        d=3 * d, m=tree.m, check_zero=False, label="delay_adjoint")
    sol = solve_bsvie(problem, tree, tol=tol)

    # assemble p and q from the component aggregates
    hx = np.asarray(dp.h_x(traj.x[N], traj.y[N], traj.z[N]), dtype=float)
    hy = np.asarray(dp.h_y(traj.x[N], traj.y[N], traj.z[N]), dtype=float)
    p_fields, q_fields = [], []
    for r in range(N + 1):
        p = np.einsum("ba,nb->na", S[N - r],
                      tree.conditional_expectation(hx, N, r))
        if r < N - k:
            p += np.einsum("ba,nb->na", S[N - k - r],
                           tree.conditional_expectation(hy, N, r))
        zeta_r = zeta[r] if r < N else None
        q = np.einsum("ba,nbm->nam", S[N - r],
                      zeta_r[:, 0:d]) if zeta_r is not None \
            else np.zeros((tree.node_count(r), d, dp.m))
        if r < N - k and zeta_r is not None:
            q += np.einsum("ba,nbm->nam", S[N - k - r], zeta_r[:, d:2 * d])
        for i in range(r + 1, N):
            y0 = tree.conditional_expectation(sol.Y[i][:, 0:d], i, r)
            p += dt * np.einsum("ba,nb->na", S[i - r], y0)
            z0 = sol.Z.entry(i, r)[:, 0:d]
            q += dt * np.einsum("ba,nbm->nam", S[i - r], z0)
            if i > r + k:
                y1 = tree.conditional_expectation(sol.Y[i][:, d:2 * d],
                                                  i, r)
                p += dt * np.einsum("ba,nb->na", S[i - k - r], y1)
                z1 = sol.Z.entry(i, r)[:, d:2 * d]
                q += dt * np.einsum("ba,nbm->nam", S[i - k - r], z1)
        p_fields.append(p)
        q_fields.append(q)
    return DelayAdjoint(eta_bar, zeta, sol, AdaptedProcess(tree, p_fields),
                        q_fields, H_bar)


def delay_pq(dp: DelayProblem, adjoint: DelayAdjoint, tree: Tree):
    """The (p, q) aggregate pair of an already-solved adjoint system."""
    return adjoint.p, adjoint.q


def hamiltonian_G(dp: DelayProblem, t: float, x, y, z, u, mu, p, q):
    """Hamilton function l + <p, b> + <q, sigma> on node arrays."""
    lv = np.asarray(dp.l(t, x, y, z, u, mu), dtype=float).reshape(-1)
    bv = np.asarray(dp.b(t, x, y, z, u, mu), dtype=float)
    sv = np.asarray(dp.sigma(t, x, y, z, u, mu), dtype=float)
    return lv + (p * bv).sum(axis=1) + (q * sv).sum(axis=(1, 2))


def hamiltonian_gradients(dp: DelayProblem, traj: DelayTrajectory,
                          adjoint: DelayAdjoint, tree: Tree):
    """(G_u, G_mu) processes along the trajectory."""
    t = tree.times
    Gu, Gmu = [], []
    for r in range(tree.N + 1):
        theta = (t[r],) + traj.theta(r)
        p, q = adjoint.p[r], adjoint.q[r]
        gu = np.asarray(dp.l_u(*theta), dtype=float) \
            + np.einsum("nau,na->nu", np.asarray(dp.b_u(*theta)), p) \
            + np.einsum("namu,nam->nu", np.asarray(dp.sigma_u(*theta)), q)
        gm = np.asarray(dp.l_mu(*theta), dtype=float) \
            + np.einsum("nau,na->nu", np.asarray(dp.b_mu(*theta)), p) \
            + np.einsum("namu,nam->nu", np.asarray(dp.sigma_mu(*theta)), q)
        Gu.append(gu)
        Gmu.append(gm)
    return AdaptedProcess(tree, Gu), AdaptedProcess(tree, Gmu)


def delay_mp_check(dp: DelayProblem, u_star: AdaptedProcess, tree: Tree,
                   probe_count: int = 16, seed: int = 0) -> float:
    """Min over probes of the maximum-condition pairing.

    E int [<G_u, v - u*> + <G_mu, v(.-delta) - u*(.-delta)>] dt over probe
    controls that share the initial trajectory, so the delayed difference
    vanishes before the delay horizon.
    """
    traj = solve_delay_state(dp, u_star, tree)
    adjoint = solve_delay_adjoint(dp, traj, tree)
    Gu, Gmu = hamiltonian_gradients(dp, traj, adjoint, tree)
    k = dp.delay_steps(tree)
    rng = np.random.default_rng(seed)
    probes = [pt for pt in dp.control_set.extreme_points()]
    probes.extend(dp.control_set.sample_interior(rng, probe_count))

    def margin(point):
        total = 0.0
        for r in range(tree.N):
            dv = np.tile(point, (tree.node_count(r), 1)) - u_star[r]
            total += tree.dt * float(tree.expectation(
                (Gu[r] * dv).sum(axis=1)))
            if r >= k:
                dmu = tree.broadcast(
                    np.tile(point, (tree.node_count(r - k), 1))
                    - u_star[r - k], r - k, r)
                total += tree.dt * float(tree.expectation(
                    (Gmu[r] * dmu).sum(axis=1)))
        return total

    return min(margin(pt) for pt in probes)


def delay_gradient(dp: DelayProblem, u: AdaptedProcess, tree: Tree,
                   traj: DelayTrajectory = None) -> AdaptedProcess:
    """Cost gradient in the control: the direct channel plus the delayed
    channel conditioned back to the decision time."""
    traj = traj or solve_delay_state(dp, u, tree)
    adjoint = solve_delay_adjoint(dp, traj, tree)
    Gu, Gmu = hamiltonian_gradients(dp, traj, adjoint, tree)
    k = dp.delay_steps(tree)
    grads = []
    for r in range(tree.N + 1):
        g = Gu[r].copy() if r < tree.N else np.zeros_like(Gu[r])
        if r + k < tree.N:
            g += tree.conditional_expectation(Gmu[r + k], r + k, r)
        grads.append(g)
    return AdaptedProcess(tree, grads)


def delay_projected_gradient_search(dp: DelayProblem, u0: AdaptedProcess,
                                    tree: Tree, steps: int = 120,
                                    rate: float = 0.4) -> tuple:
    u = AdaptedProcess(tree, [u0[i].copy() for i in range(tree.N + 1)])
    trace = {"cost": [], "grad_norm": []}
    for _ in range(steps):
        traj = solve_delay_state(dp, u, tree)
        grad = delay_gradient(dp, u, tree, traj=traj)
        gnorm = math.sqrt(sum(
            tree.dt * float(tree.expectation((grad[i] ** 2).sum(axis=1)))
            for i in range(tree.N)))
        trace["cost"].append(cost_delay(dp, u, tree, traj=traj))
        trace["grad_norm"].append(gnorm)
        new_vals = [np.asarray(dp.control_set.project(u[i] - rate * grad[i]),
                               dtype=float) for i in range(tree.N + 1)]
        u = AdaptedProcess(tree, new_vals)
        if gnorm < 1e-12:
            break
    return u, trace
