"""Discrete adjoint state: gradient kernel and backward equation.

Two closely related objects are computed from a state process X by the
shared backward recursion of :mod:`slqheat.forward`:

* ``k_htau`` -- the kernel K X = -L*(X) - alpha Lhat*(X_N) appearing in
  the discrete optimality condition U = K X (noise multipliers start two
  steps past the conditioning time);

* ``implicit_euler_bsde`` -- the solution (Y0, Zbar0) of the implicit
  Euler discretization of the backward equation

      dY = (-Laplace Y - Z + X) dt + Z dW,   Y(T) = -alpha X(T),

  whose multipliers start one step past the conditioning time.  The two
  differ by O(tau) uniformly in time, which the adjoint-gap study
  measures.

Conditioning on F_{t_n} is exact on the scenario tree (subtree means) and
estimated by ridge-regularized least squares on Monte Carlo ensembles
(features: constant, leading eigenbasis coordinates of the state, and the
Brownian value at t_n).
"""

from dataclasses import dataclass

import numpy as np

from .forward import AdaptedProcess, a0_apply, backward_kernel
from .noise import tree_condexp


@dataclass
class TreeExact:
    """Exact conditional expectations by subtree averaging (trees only)."""

    def condexp(self, driver, targets, n, state=None):
        if driver.kind != "tree":
            raise ValueError("TreeExact only conditions scenario-tree data")
        return tree_condexp(targets, driver.grid.n_steps, n)


def regression_condexp(features, targets, ridge=1e-10):
    """Ridge least-squares fit of targets on features.

    Solves (F^T F + ridge I) beta = F^T Y and returns (beta, F beta).  With
    ridge = 0 the normal equations must be well conditioned; otherwise a
    ValueError suggests regularizing.
    """
    F = np.asarray(features, dtype=float)
    Y = np.asarray(targets, dtype=float)
    gram = F.T @ F
    if ridge > 0:
        gram = gram + ridge * np.eye(gram.shape[0])
    elif np.linalg.cond(gram) > 1e12:
        raise ValueError("feature Gram matrix is rank deficient; set ridge > 0")
    beta = np.linalg.solve(gram, F.T @ Y)
    return beta, F @ beta


@dataclass
class RegressionCondexp:
    """Least-squares Monte Carlo conditioning for Gaussian ensembles.

    The regression basis at time t_n is [1, xhat_1, ..., xhat_m, W(t_n)]
    where xhat_i are the leading eigenbasis coordinates of the state slice
    (m = min(n_modes, d)).  The exact conditional expectations of this
    problem are affine in the state coordinates, so the linear basis is
    adequate; the small ridge keeps degenerate slices (e.g. t_0, where all
    paths coincide) solvable.
    """

    n_modes: int = 4
    ridge: float = 1e-10
    include_brownian: bool = True

    def features(self, driver, state, n):
        cols = [np.ones(driver.n_scenarios(n))]
        if state is not None:
            # the process does not carry its space, so it is wired in once
            # through bind_space before use
            if getattr(self, "_space", None) is None:
                raise ValueError("RegressionCondexp needs bind_space(space) before use")
            m = min(self.n_modes, self._space.dim)
            coords = self._space.to_eigen(state.at(n))[:, :m]
            cols.extend(coords.T)
        if self.include_brownian:
            cols.append(driver.brownian(n))
        return np.column_stack(cols)

    def bind_space(self, space):
        self._space = space
        return self

    def condexp(self, driver, targets, n, state=None):
        F = self.features(driver, state, n)
        _, pred = regression_condexp(F, targets, self.ridge)
        return pred


@dataclass
class AdjointOutput:
    """Bundle of the gradient kernel and backward-equation solutions."""

    q: AdaptedProcess
    y0: AdaptedProcess
    zbar0: AdaptedProcess


def _condition(driver, est, pathwise, n, state):
    if est is not None:
        return est.condexp(driver, pathwise, n, state=state)
    if driver.kind != "tree":
        raise ValueError("ensemble drivers need an explicit conditional-expectation estimator")
    return driver.condexp(pathwise, n)


def k_htau_sweep(data, driver, state, est=None):
    """Yield (n, Q_n) slices of the gradient kernel from n = N-1 down to 0.

    Q_n = -E[ tau sum_{j>n} A0^{j-n} prod m (X_j) | F_n ]
          - alpha E[ A0^{N-n} prod m (X_N) | F_n ],

    with the noise multipliers starting at step n+2.  The generator form
    lets callers consume slices without storing a second full process.
    """
    tau = data.grid.tau
    alpha = data.alpha
    N = data.grid.n_steps
    v_at = lambda n: -tau * state.at(n)
    eta = -alpha * np.asarray(state.at(N))
    for n, G in backward_kernel(data, driver, v_at, eta, product_offset=2):
        yield n, _condition(driver, est, G, n, state)


def k_htau(data, driver, state, est=None):
    """Gradient kernel K X as an adapted process over n = 0..N-1."""
    out = [None] * data.grid.n_steps
    for n, q in k_htau_sweep(data, driver, state, est):
        out[n] = q
    return AdaptedProcess(driver, 0, out)


def implicit_euler_bsde(data, driver, state, est=None):
    """Implicit Euler solution (Y0, Zbar0) of the backward equation.

    Y0 satisfies Y0(t_N) = -alpha X(T) and, slice by slice,

        Y0(t_n) = A0 E[(1 + dW_{n+1}) (Y0(t_{n+1}) - tau X(t_{n+1})) | F_n],

    realized through the shared pathwise kernel with multipliers starting
    at n+1.  The martingale integrand is recovered afterwards:

        Zbar0(t_n) = (1/tau) E[(Y0(t_{n+1}) - tau X(t_{n+1})) dW_{n+1} | F_n],

    using the conditioned Y0 slice at level n+1.

    Returns
    -------
    (AdaptedProcess, AdaptedProcess)
        Y0 over 0..N and Zbar0 over 0..N-1.
    """
    grid = data.grid
    N, tau = grid.n_steps, grid.tau
    v_at = lambda n: -tau * state.at(n)
    terminal = -data.alpha * np.asarray(state.at(N))
    y_vals = [None] * (N + 1)
    y_vals[N] = np.array(terminal)
    for n, G in backward_kernel(data, driver, v_at, terminal, product_offset=1):
        y_vals[n] = _condition(driver, est, G, n, state)
    y0 = AdaptedProcess(driver, 0, y_vals)

    z_vals = [None] * N
    for n in range(N):
        mart = y_vals[n + 1] - tau * np.asarray(state.at(n + 1))
        dw = driver.increments_at(n + 1)[:, None]
        target = mart * dw
        if driver.kind == "tree" and est is None:
            z = tree_condexp(target, n + 1, n)
        else:
            z = _condition(driver, est, driver.to_pathwise(target, n + 1), n, state)
        z_vals[n] = z / tau
    return y0, AdaptedProcess(driver, 0, z_vals)


def solve_adjoint(data, driver, state, est=None):
    """Convenience wrapper computing the kernel and the backward solution."""
    q = k_htau(data, driver, state, est)
    y0, zbar0 = implicit_euler_bsde(data, driver, state, est)
    return AdjointOutput(q=q, y0=y0, zbar0=zbar0)


def bsde_residual(data, driver, state, y0, zbar0, est=None):
    """Largest martingale-identity residual of a backward-equation solution.

    For each n the identity

        (I - tau Laplace_h) Y0(t_n) = E[Y0(t_{n+1}) | F_n]
                                      - tau E[X(t_{n+1}) | F_n] + tau Zbar0(t_n)

    must hold; the maximum M-norm of its defect over all scenarios and
    times is returned (exactly zero up to roundoff for exact
    conditioning).
    """
    space, grid = data.space, data.grid
    N, tau = grid.n_steps, grid.tau
    worst = 0.0
    for n in range(N):
        lhs = y0.at(n) + tau * space.mass_solve(np.asarray(y0.at(n)) @ space.stiffness)
        nxt = np.asarray(y0.at(n + 1))
        xnxt = np.asarray(state.at(n + 1))
        if driver.kind == "tree" and est is None:
            e_y = tree_condexp(nxt, n + 1, n)
            e_x = tree_condexp(xnxt, n + 1, n)
        else:
            e_y = _condition(driver, est, driver.to_pathwise(nxt, n + 1), n, state)
            e_x = _condition(driver, est, driver.to_pathwise(xnxt, n + 1), n, state)
        defect = lhs - e_y + tau * e_x - tau * np.asarray(zbar0.at(n))
        norms = np.sqrt(((defect @ space.mass) * defect).sum(axis=1))
        worst = max(worst, float(norms.max()))
    return worst


def adjoint_gap(data, driver, state, est=None):
    """Gap sup_n (E ||Y0(t_n) - Q(t_n)||_M^2)^{1/2} between the two objects.

    First order in tau for admissible state processes, which the
    adjoint-gap study confirms empirically.
    """
    space = data.space
    q = k_htau(data, driver, state, est)
    y0, _ = implicit_euler_bsde(data, driver, state, est)
    worst = 0.0
    for n in range(data.grid.n_steps):
        diff = np.asarray(y0.at(n)) - np.asarray(q.at(n))
        sq = ((diff @ space.mass) * diff).sum(axis=1)
        # scenario weights are uniform within a tree level and across paths
        worst = max(worst, float(sq.mean()))
    return float(np.sqrt(worst))
