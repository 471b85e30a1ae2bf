"""Named example problems shared by the experiment runner and the tests."""
from __future__ import annotations

import numpy as np

from . import backward as bwd
from . import control as ctl
from . import delay as dly
from . import forward as fwd
from . import kernels as K
from .lattice import Tree, terminal_from_function
from .special import gamma_fn


# ---------------------------------------------------------------------------
# forward problems
# ---------------------------------------------------------------------------

def fractional_relaxation(alpha: float = 0.75, lam: float = -1.0,
                          horizon: float = 1.0, m: int = 0):
    """phi = 1, drift lam * lag^(alpha-1) x / Gamma(alpha), no noise."""
    kern = K.make_fractional(alpha, K.CAUSAL, horizon,
                             scale=1.0 / gamma_fn(alpha))
    return fwd.SVIEProblem(horizon, lambda t: np.array([1.0]), d=1, m=m,
                           drift_kernel=kern,
                           drift_factor=lambda s, x: lam * x,
                           label=f"fractional_relaxation(alpha={alpha})")


def linear_noisy(a: float = -0.8, b: float = 0.3, horizon: float = 1.0):
    kern = K.make_fractional(0.7, K.CAUSAL, horizon)
    return fwd.SVIEProblem(
        horizon, lambda t: np.array([1.0]), d=1, m=1,
        drift_kernel=kern, drift_factor=lambda s, x: a * x,
        diffusion=lambda t, s, x: (b * x)[:, :, None],
        lipschitz_K1=K.make_fractional(0.7, K.CAUSAL, horizon,
                                       scale=abs(a)),
        lipschitz_K2=K.make_constant(abs(b), horizon),
        label="linear_noisy")


FORWARD_PROBLEMS = {
    "fractional_relaxation": fractional_relaxation,
    "linear_noisy": linear_noisy,
}


# ---------------------------------------------------------------------------
# backward problems (criterion set: three singular generator families)
# ---------------------------------------------------------------------------

def _affine_term(kern, c_y, c_z1, c_z2):
    def fn(t, s, y, z1, z2):
        return c_y * y + c_z1 * z1[:, :, 0:1].reshape(y.shape) \
            + c_z2 * z2[:, :, 0:1].reshape(y.shape)
    return bwd.GeneratorTerm(fn, kernel=kern)


def bsvie_fractional(tree: Tree, alpha: float = 0.7):
    """Affine generator weighted by the lag^(alpha-1) kernel."""
    kern = K.make_fractional(alpha, K.ANTICAUSAL, tree.T,
                             scale=1.0 / gamma_fn(alpha))
    psi = terminal_from_function(tree,
                                 lambda t, w: np.cos(w[:, 0] + 2.0 * t))
    c_y, c_z1, c_z2 = -0.4, 0.2, 0.7
    return bwd.BSVIEProblem(
        psi, [_affine_term(kern, c_y, c_z1, c_z2)],
        L_y=K.make_fractional(alpha, K.ANTICAUSAL, tree.T,
                              scale=abs(c_y) / gamma_fn(alpha)),
        L_z1=K.make_fractional(alpha, K.ANTICAUSAL, tree.T,
                               scale=abs(c_z1) / gamma_fn(alpha)),
        L_z2=K.make_fractional(alpha, K.ANTICAUSAL, tree.T,
                               scale=abs(c_z2) / gamma_fn(alpha)),
        label=f"bsvie_fractional(alpha={alpha})")


def bsvie_fbm_rl(tree: Tree, H: float = 0.7):
    """Affine generator weighted by the lag^(H-1/2) kernel."""
    kern = K.make_fractional(H + 0.5, K.ANTICAUSAL, tree.T,
                             scale=1.0 / gamma_fn(H + 0.5))
    psi = terminal_from_function(tree,
                                 lambda t, w: np.sin(w[:, 0]) + 0.5 * t)
    c_y, c_z1, c_z2 = -0.5, 0.25, 0.8
    scale = 1.0 / gamma_fn(H + 0.5)
    return bwd.BSVIEProblem(
        psi, [_affine_term(kern, c_y, c_z1, c_z2)],
        L_y=K.make_fractional(H + 0.5, K.ANTICAUSAL, tree.T,
                              scale=abs(c_y) * scale),
        L_z1=K.make_fractional(H + 0.5, K.ANTICAUSAL, tree.T,
                               scale=abs(c_z1) * scale),
        L_z2=K.make_fractional(H + 0.5, K.ANTICAUSAL, tree.T,
                               scale=abs(c_z2) * scale),
        label=f"bsvie_fbm_rl(H={H})")


def bsvie_caputo(tree: Tree, alpha: float = 0.75):
    xi = np.tanh(tree.brownian(tree.N))
    A = np.array([[0.3]])

    def f(s, y, z):
        return 0.25 * y + 0.15 * z[:, :, 0:1].reshape(y.shape)

    p = bwd.make_caputo_bsde(alpha, A, f, xi, tree)
    kern = K.make_fractional(alpha, K.ANTICAUSAL, tree.T,
                             scale=1.2 / gamma_fn(alpha))
    p.L_y = kern
    p.L_z2 = K.make_fractional(alpha, K.ANTICAUSAL, tree.T,
                               scale=0.15 / gamma_fn(alpha))
    return p


BACKWARD_PROBLEMS = {
    "fractional_generator": bsvie_fractional,
    "fbm_rl_generator": bsvie_fbm_rl,
    "caputo": bsvie_caputo,
}


# ---------------------------------------------------------------------------
# control instances
# ---------------------------------------------------------------------------

def lq_instance(horizon: float = 1.0, a: float = 0.3, b0: float = 1.0,
                s0: float = 0.2, s1: float = 0.3, q: float = 1.0,
                r: float = 1.0, box: float = 2.0):
    """Scalar linear-quadratic instance with a box control region."""
    U = ctl.BoxControlSet((-box,), (box,))
    zeros = (0.0,)

    def b(t, s, x, u):
        return a * x + b0 * u

    def sigma(t, s, x, u):
        return (s0 * x + s1 * u)[:, :, None]

    return ctl.ControlProblem(
        horizon=horizon,
        phi=lambda t: np.array([1.0]),
        b=b, sigma=sigma,
        b_x=lambda t, s, x, u: np.full(x.shape + (1,), a),
        b_u=lambda t, s, x, u: np.full(x.shape + (1,), b0),
        sigma_x=lambda t, s, x, u: np.full(x.shape + (1, 1), s0),
        sigma_u=lambda t, s, x, u: np.full(x.shape + (1, 1), s1),
        g=lambda t, x, u: 0.5 * (q * x[:, 0] ** 2 + r * u[:, 0] ** 2),
        g_x=lambda t, x, u: q * x,
        g_u=lambda t, x, u: r * u,
        control_set=U, d=1, m=1,
        K1=K.make_constant(abs(a) + abs(b0), horizon),
        K2=K.make_constant(abs(s0) + abs(s1), horizon),
        label="lq")


def random_linear_instance(seed: int, horizon: float = 1.0):
    """Random linear coefficients with mild two-time dependence."""
    rng = np.random.default_rng(seed)
    a0, a1, b0, s0, s1, qx, ru = rng.uniform(-0.7, 0.7, size=7)
    ru = abs(ru) + 0.3
    qx = abs(qx) + 0.2

    def b(t, s, x, u):
        return (a0 + a1 * np.exp(-(t - s))) * x + b0 * u

    def b_x(t, s, x, u):
        return np.full(x.shape + (1,), a0 + a1 * np.exp(-(t - s)))

    return ctl.ControlProblem(
        horizon=horizon,
        phi=lambda t: np.array([1.0 + 0.5 * t]),
        b=b, sigma=lambda t, s, x, u: (s0 * x + s1 * u)[:, :, None],
        b_x=b_x,
        b_u=lambda t, s, x, u: np.full(x.shape + (1,), b0),
        sigma_x=lambda t, s, x, u: np.full(x.shape + (1, 1), s0),
        sigma_u=lambda t, s, x, u: np.full(x.shape + (1, 1), s1),
        g=lambda t, x, u: 0.5 * (qx * x[:, 0] ** 2 + ru * u[:, 0] ** 2),
        g_x=lambda t, x, u: qx * x,
        g_u=lambda t, x, u: ru * u,
        control_set=ctl.BoxControlSet((-3.0,), (3.0,)),
        d=1, m=1, label=f"random_linear(seed={seed})")


def delay_lq_instance(horizon: float = 1.0, delta: float = 0.25,
                      lam: float = 0.3, with_delay_terms: bool = True,
                      box: float = 50.0):
    """Scalar delay instance, quadratic cost, wide box (near-unconstrained).

    With ``with_delay_terms=False`` every delayed coupling (including the
    terminal cost) vanishes, which reduces the maximum condition to the
    delay-free one on the same data.
    """
    cy = 0.15 if with_delay_terms else 0.0
    cz = 0.1 if with_delay_terms else 0.0
    cmu = 0.2 if with_delay_terms else 0.0
    hy = 0.2 if with_delay_terms else 0.0
    # the delay-free counterpart is Lagrange-only, so its reduction
    # instance must drop the terminal cost altogether
    hx = 1.0 if with_delay_terms else 0.0
    M = np.array([[-0.5]])
    U = ctl.BoxControlSet((-box,), (box,))

    def b(t, x, y, z, u, mu):
        return 0.2 * x + cy * y + cz * z + 1.0 * u + cmu * mu

    def sigma(t, x, y, z, u, mu):
        return (0.1 * x + 0.25 * u)[:, :, None]

    def l(t, x, y, z, u, mu):
        return 0.5 * (x[:, 0] ** 2 + u[:, 0] ** 2) \
            + 0.5 * cy * y[:, 0] ** 2

    def h(x, y, z):
        return 0.5 * (hx * x[:, 0] ** 2 + hy * y[:, 0] ** 2)

    c = lambda v: (lambda *args: np.full(args[1].shape + (1,), v))
    cs = lambda v: (lambda *args: np.full(args[1].shape + (1, 1), v))

    return dly.DelayProblem(
        horizon=horizon, M=M, delta=delta, lam=lam,
        b=b, sigma=sigma,
        b_x=c(0.2), b_y=c(cy), b_z=c(cz), b_u=c(1.0), b_mu=c(cmu),
        sigma_x=cs(0.1), sigma_y=cs(0.0), sigma_z=cs(0.0),
        sigma_u=cs(0.25), sigma_mu=cs(0.0),
        l=l,
        l_x=lambda t, x, y, z, u, mu: x,
        l_y=lambda t, x, y, z, u, mu: cy * y,
        l_z=lambda t, x, y, z, u, mu: 0.0 * z,
        l_u=lambda t, x, y, z, u, mu: u,
        l_mu=lambda t, x, y, z, u, mu: 0.0 * mu,
        h=h,
        h_x=lambda x, y, z: hx * x,
        h_y=lambda x, y, z: hy * y,
        h_z=lambda x, y, z: 0.0 * z,
        xi=lambda t: np.array([1.0 + 0.5 * t]),
        eta=lambda t: np.array([0.0]),
        control_set=U, d=1, m=1,
        label="delay_lq" if with_delay_terms else "delay_lq_zero_delay")


def matched_volterra_instance(dp: dly.DelayProblem, horizon: float = 1.0):
    """The delay-free counterpart of a zero-delay-coefficient instance.

    State drift S(t-s) b(s, x, u) and the same running cost, posed as a
    plain controlled Volterra problem; used to cross-check the two
    maximum conditions on identical data.
    """
    from scipy.linalg import expm
    M = dp.M
    cache = {}

    def S(lag):
        key = round(float(lag), 12)
        if key not in cache:
            cache[key] = expm(key * M)
        return cache[key]

    zeros_d = lambda n: np.zeros((n, dp.d))

    def wrap(t, s, x, u):
        zn = zeros_d(x.shape[0])
        zu = np.zeros((x.shape[0], dp.du))
        return dp.b(s, x, zn, zn, u, zu)

    def b(t, s, x, u):
        return np.einsum("ab,nb->na", S(t - s), wrap(t, s, x, u))

    def b_x(t, s, x, u):
        zn = zeros_d(x.shape[0])
        zu = np.zeros((x.shape[0], dp.du))
        inner = np.asarray(dp.b_x(s, x, zn, zn, u, zu), dtype=float)
        return np.einsum("ab,nbc->nac", S(t - s), inner)

    def b_u(t, s, x, u):
        zn = zeros_d(x.shape[0])
        zu = np.zeros((x.shape[0], dp.du))
        inner = np.asarray(dp.b_u(s, x, zn, zn, u, zu), dtype=float)
        return np.einsum("ab,nbc->nac", S(t - s), inner)

    def sigma(t, s, x, u):
        zn = zeros_d(x.shape[0])
        zu = np.zeros((x.shape[0], dp.du))
        inner = np.asarray(dp.sigma(s, x, zn, zn, u, zu), dtype=float)
        return np.einsum("ab,nbk->nak", S(t - s), inner)

    def sigma_x(t, s, x, u):
        zn = zeros_d(x.shape[0])
        zu = np.zeros((x.shape[0], dp.du))
        inner = np.asarray(dp.sigma_x(s, x, zn, zn, u, zu), dtype=float)
        return np.einsum("ab,nbmc->namc", S(t - s), inner)

    def sigma_u(t, s, x, u):
        zn = zeros_d(x.shape[0])
        zu = np.zeros((x.shape[0], dp.du))
        inner = np.asarray(dp.sigma_u(s, x, zn, zn, u, zu), dtype=float)
        return np.einsum("ab,nbmc->namc", S(t - s), inner)

    def deco(fn):
        def out(t, x, u):
            zn = zeros_d(x.shape[0])
            zu = np.zeros((x.shape[0], dp.du))
            return fn(t, x, zn, zn, u, zu)
        return out

    return ctl.ControlProblem(
        horizon=horizon,
        phi=lambda t: (S(t) @ np.asarray(dp.xi(0.0),
                                         dtype=float).reshape(-1)),
        b=b, sigma=sigma, b_x=b_x, b_u=b_u,
        sigma_x=sigma_x, sigma_u=sigma_u,
        g=deco(dp.l), g_x=deco(dp.l_x), g_u=deco(dp.l_u),
        control_set=dp.control_set, d=dp.d, m=dp.m,
        label="matched_volterra")


CONTROL_INSTANCES = {
    "lq": lq_instance,
    "delay_lq": delay_lq_instance,
}


# ---------------------------------------------------------------------------
# kernels by name (re-exported convenience)
# ---------------------------------------------------------------------------

kernel_from_config = K.kernel_from_config
