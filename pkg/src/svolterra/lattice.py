"""Exact discrete filtered probability space on a binary scenario tree.

Each of the ``m`` noise coordinates moves by +-sqrt(dt) per step with
probability 1/2, independently across coordinates and steps, so depth ``i``
carries ``2**(m*i)`` equally likely nodes.  Nodes are path codes: the
children of code ``c`` are ``c * 2**m + b`` for branch ``b``, i.e. the most
recent step occupies the low bits.  Conditional expectation is therefore a
reshape-and-mean, martingale representation a per-step sign projection, and
both are exact (representation exactness holds for ``m <= 1``; for larger
``m`` the per-coordinate formula is the L2 projection onto the linear span
of the step's increments).

``m = 0`` gives the deterministic single-path lattice used for large-N
convergence studies where the binary budget would be exceeded.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

DEFAULT_MAX_BITS = 22


@dataclass(frozen=True)
class Tree:
    """Scenario tree parameters: N steps on [0, T], m noise coordinates."""

    N: int
    T: float
    m: int = 1
    d: int = 1
    max_bits: int = DEFAULT_MAX_BITS

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be at least 1")
        if self.T <= 0:
            raise ValueError("T must be positive")
        if self.m < 0 or self.d < 1:
            raise ValueError("need m >= 0 and d >= 1")
        if self.N * self.m > self.max_bits:
            raise ValueError(
                f"storage budget exceeded: N*m = {self.N * self.m} "
                f"> {self.max_bits}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def sqrt_dt(self) -> float:
        return math.sqrt(self.dt)

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N + 1)

    def node_count(self, depth: int) -> int:
        self._check_depth(depth)
        return 1 << (self.m * depth)

    def _check_depth(self, depth):
        if not 0 <= depth <= self.N:
            raise ValueError(f"depth {depth} outside [0, {self.N}]")

    @property
    def branch_signs(self) -> np.ndarray:
        """(2**m, m) matrix of +-1: sign of coordinate k on branch b."""
        return _branch_signs(self.m)

    # -- measure-preserving maps between depths --

    def broadcast(self, values: np.ndarray, from_depth: int,
                  to_depth: int) -> np.ndarray:
        """Repeat an adapted field onto its descendants at a deeper level."""
        self._check_depth(from_depth)
        self._check_depth(to_depth)
        if to_depth < from_depth:
            raise ValueError("broadcast goes from shallow to deep")
        reps = 1 << (self.m * (to_depth - from_depth))
        return np.repeat(np.asarray(values), reps, axis=0)

    def conditional_expectation(self, values: np.ndarray, from_depth: int,
                                to_depth: int) -> np.ndarray:
        """Average over descendants: exact E[. | F_{t_a}] on the tree."""
        self._check_depth(from_depth)
        self._check_depth(to_depth)
        if to_depth > from_depth:
            raise ValueError("conditioning goes from deep to shallow")
        x = np.asarray(values, dtype=float)
        block = 1 << (self.m * (from_depth - to_depth))
        return x.reshape((self.node_count(to_depth), block) + x.shape[1:]) \
                .mean(axis=1)

    def increments(self, step: int) -> np.ndarray:
        """Brownian increment of the given step as a depth-(step+1) field."""
        if not 0 <= step < self.N:
            raise ValueError(f"step {step} outside [0, {self.N})")
        return np.tile(self.branch_signs * self.sqrt_dt,
                       (self.node_count(step), 1))

    def brownian(self, depth: int) -> np.ndarray:
        """Brownian path values W(t_depth) indexed by node, shape (nodes, m)."""
        self._check_depth(depth)
        w = np.zeros((1, self.m))
        for j in range(depth):
            w = np.repeat(w, 1 << self.m, axis=0) + self.increments(j)
        return w

    # -- martingale calculus --

    def martingale_representation(self, values: np.ndarray, from_depth: int,
                                  to_depth: int):
        """Split a field into conditional mean plus stochastic integral.

        Returns ``(mean, z)`` with ``mean`` at ``to_depth`` and ``z`` a list
        of per-step integrands, ``z[j - to_depth]`` of shape (nodes_j, d, m)
        for steps ``j`` in ``[to_depth, from_depth)``; reconstruction
        ``mean + sum_j z_j dW_j`` is exact for m <= 1.
        """
        self._check_depth(from_depth)
        self._check_depth(to_depth)
        if to_depth > from_depth:
            raise ValueError("representation goes from deep to shallow")
        x = np.asarray(values, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        signs = self.branch_signs
        nb = 1 << self.m
        z = []
        for j in range(from_depth - 1, to_depth - 1, -1):
            resh = x.reshape(self.node_count(j), nb, x.shape[1])
            zj = np.einsum("nbd,bk->ndk", resh, signs) / (nb * self.sqrt_dt) \
                if self.m > 0 else np.zeros((self.node_count(j), x.shape[1], 0))
            z.append(zj)
            x = resh.mean(axis=1)
        z.reverse()
        return x, z

    def stochastic_integral(self, z_list, a: int, b: int) -> np.ndarray:
        """Accumulate sum_j z_j dW_j along each path from depth a to b."""
        self._check_depth(a)
        self._check_depth(b)
        if len(z_list) != b - a:
            raise ValueError("need one integrand per step in [a, b)")
        signs = self.branch_signs
        d = z_list[0].shape[1] if z_list else self.d
        acc = np.zeros((self.node_count(a), d))
        for offset, zj in enumerate(z_list):
            j = a + offset
            contrib = self.sqrt_dt * np.einsum("ndk,bk->nbd", zj, signs)
            acc = (np.repeat(acc, 1 << self.m, axis=0)
                   + contrib.reshape(self.node_count(j + 1), d))
        return acc

    def expectation(self, values: np.ndarray) -> np.ndarray:
        """Expectation under the uniform node measure (any depth)."""
        return np.asarray(values, dtype=float).mean(axis=0)


@lru_cache(maxsize=None)
def _branch_signs(m: int) -> np.ndarray:
    signs = np.empty((1 << m, m))
    for b in range(1 << m):
        for k in range(m):
            signs[b, k] = 1.0 if (b >> k) & 1 else -1.0
    signs.setflags(write=False)
    return signs


def ito_isometry_check(tree: Tree, z_list, a: int, b: int) -> float:
    """Residual of E[(int z dW)^2] = E[sum |z_j|^2 dt]; exactly 0 on the tree."""
    integral = tree.stochastic_integral(z_list, a, b)
    lhs = float(tree.expectation((integral ** 2).sum(axis=1)))
    rhs = 0.0
    for zj in z_list:
        rhs += tree.dt * float(tree.expectation((zj ** 2).sum(axis=(1, 2))))
    return abs(lhs - rhs)


# ---------------------------------------------------------------------------
# node-indexed processes
# ---------------------------------------------------------------------------

@dataclass
class AdaptedProcess:
    """Per-depth arrays of d-vectors; values[i] has shape (nodes_i, d)."""

    tree: Tree
    values: list

    def __post_init__(self):
        for i, v in enumerate(self.values):
            v = np.asarray(v, dtype=float)
            if v.ndim == 1:
                v = v[:, None]
            if v.shape[0] != self.tree.node_count(i):
                raise ValueError(
                    f"depth {i}: expected {self.tree.node_count(i)} nodes, "
                    f"got {v.shape[0]}")
            self.values[i] = v

    @property
    def d(self) -> int:
        return self.values[0].shape[1]

    def __getitem__(self, depth: int) -> np.ndarray:
        return self.values[depth]

    def __len__(self) -> int:
        return len(self.values)

    def l2_norm_sq(self) -> float:
        """dt-weighted squared norm sum_i dt E|Y_i|^2 (all stored depths)."""
        return sum(self.tree.dt
                   * float(self.tree.expectation((v ** 2).sum(axis=1)))
                   for v in self.values)

    def dump_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["depth", "node", "component", "value"])
            for depth, v in enumerate(self.values):
                for node in range(v.shape[0]):
                    for comp in range(v.shape[1]):
                        writer.writerow([depth, node, comp,
                                         repr(float(v[node, comp]))])


def constant_process(tree: Tree, fn, depths=None) -> AdaptedProcess:
    """Adapted process from a deterministic function of time."""
    depths = range(tree.N + 1) if depths is None else depths
    vals = []
    for i in depths:
        v = np.asarray(fn(tree.times[i]), dtype=float).reshape(-1)
        vals.append(np.tile(v, (tree.node_count(i), 1)))
    return AdaptedProcess(tree, vals)


@dataclass
class TwoParameterProcess:
    """Z(t_i, t_j) fields: values[i][j] adapted at depth j, shape (nodes_j, d, m).

    Outer index i runs over [0, N] and inner cell index j over [0, N); the
    entry (i, j) is tagged above-diagonal when j >= i, below otherwise.
    """

    tree: Tree
    values: list

    @classmethod
    def zeros(cls, tree: Tree, d: int = None) -> "TwoParameterProcess":
        d = d or tree.d
        vals = [[np.zeros((tree.node_count(j), d, tree.m))
                 for j in range(tree.N)] for _ in range(tree.N + 1)]
        return cls(tree, vals)

    def entry(self, i: int, j: int) -> np.ndarray:
        return self.values[i][j]

    def set_entry(self, i: int, j: int, value: np.ndarray):
        self.values[i][j] = np.asarray(value, dtype=float)

    @staticmethod
    def is_above_diagonal(i: int, j: int) -> bool:
        return j >= i

    def norm_sq(self) -> float:
        """dt^2-weighted squared norm sum_{i,j} dt^2 E|Z_ij|^2."""
        tree = self.tree
        total = 0.0
        for row in self.values:
            for z in row:
                if z is not None:
                    total += tree.dt ** 2 * float(
                        tree.expectation((z ** 2).sum(axis=(1, 2))))
        return total

    def dump_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["outer", "inner", "node", "component",
                             "noise", "value"])
            for i, row in enumerate(self.values):
                for j, z in enumerate(row):
                    if z is None:
                        continue
                    for node in range(z.shape[0]):
                        for comp in range(z.shape[1]):
                            for k in range(z.shape[2]):
                                writer.writerow(
                                    [i, j, node, comp, k,
                                     repr(float(z[node, comp, k]))])


@dataclass
class TerminalField:
    """Per-outer-time fields measurable at a fixed depth (default: leaves)."""

    tree: Tree
    values: list
    term_depth: int = field(default=-1)

    def __post_init__(self):
        if self.term_depth < 0:
            self.term_depth = self.tree.N
        n = self.tree.node_count(self.term_depth)
        for i, v in enumerate(self.values):
            v = np.asarray(v, dtype=float)
            if v.ndim == 1:
                v = v[:, None]
            if v.shape[0] != n:
                raise ValueError(
                    f"outer index {i}: expected {n} nodes at depth "
                    f"{self.term_depth}, got {v.shape[0]}")
            self.values[i] = v

    @property
    def d(self) -> int:
        return self.values[0].shape[1]

    def __getitem__(self, i: int) -> np.ndarray:
        return self.values[i]

    def __len__(self) -> int:
        return len(self.values)


def terminal_from_function(tree: Tree, fn, d: int = None) -> TerminalField:
    """Terminal field psi(t_i) = fn(t_i, W_T) from a leaf-path functional.

    ``fn(t, w)`` receives the outer time and the (leaves, m) terminal
    Brownian values and returns (leaves, d) or (leaves,).
    """
    wT = tree.brownian(tree.N)
    vals = []
    for i in range(tree.N + 1):
        v = np.asarray(fn(tree.times[i], wT), dtype=float)
        if v.ndim == 0:
            v = np.full(tree.node_count(tree.N), float(v))
        vals.append(v)
    return TerminalField(tree, vals)
