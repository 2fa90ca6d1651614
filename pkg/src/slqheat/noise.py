"""Time grids and discrete Wiener drivers.

Two interchangeable sources of Wiener increments feed the space-time
scheme:

* ``TreeDriver`` -- the binary scenario tree with increments +-sqrt(tau).
  Level n holds 2^n nodes; node s at level n has children 2s and 2s+1 at
  level n+1, and the step-(n+1) increment attached to a child is read off
  its last bit (odd child -> +sqrt(tau), even child -> -sqrt(tau)).
  Conditional expectations are exact subtree averages, so every quantity
  computed on the tree is free of sampling error.

* ``EnsembleDriver`` -- Monte Carlo paths of Gaussian increments with a
  counter-based generator, so path p is the same no matter how many paths
  are drawn or in which chunks.

Both expose the same small protocol (``n_scenarios``, ``increments_at``,
``child_expand``, ``to_pathwise``, ``pathwise_increment``, ``brownian``)
consumed by the forward and adjoint recursions.
"""

from dataclasses import dataclass, field

import numpy as np

TREE_DEPTH_CAP = 16


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_N = T with step tau = T / N."""

    horizon: float
    n_steps: int
    tau: float
    nodes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.asarray(self.nodes, dtype=float))


def make_time_grid(horizon, n_steps):
    """Build the uniform time grid on [0, horizon] with n_steps steps.

    Raises
    ------
    ValueError
        If n_steps < 1 or the step size exceeds 1 (the one-step scheme
        coefficients 1 + increment must stay well defined in mean square).
    """
    if n_steps < 1:
        raise ValueError(f"need at least one time step, got {n_steps}")
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    tau = horizon / n_steps
    if tau > 1.0:
        raise ValueError(f"step size tau = {tau} exceeds 1; refine the time grid")
    return TimeGrid(horizon=float(horizon), n_steps=n_steps, tau=tau, nodes=tau * np.arange(n_steps + 1))


def tree_condexp(values, from_level, to_level):
    """Exact conditional expectation on the binary tree.

    Averages an array of per-node values at ``from_level`` (first axis of
    length 2^from_level) over the subtrees rooted at ``to_level``.
    """
    if to_level > from_level:
        raise ValueError(f"cannot condition level {from_level} data on finer level {to_level}")
    values = np.asarray(values)
    lead = 1 << to_level
    fan = 1 << (from_level - to_level)
    return values.reshape((lead, fan) + values.shape[1:]).mean(axis=1)


@dataclass
class TreeDriver:
    """Binary scenario tree of Wiener increments +-sqrt(tau)."""

    grid: TimeGrid
    _brownian_cache: list = field(repr=False, default_factory=list)
    kind = "tree"

    def __post_init__(self):
        if self.grid.n_steps > TREE_DEPTH_CAP:
            raise ValueError(
                f"tree depth {self.grid.n_steps} exceeds cap {TREE_DEPTH_CAP} "
                f"(2^{self.grid.n_steps} leaves); use a Gaussian ensemble instead"
            )

    def n_scenarios(self, level):
        return 1 << level

    def increments_at(self, step):
        """Step increments attached to the level-``step`` nodes, shape (2^step,)."""
        idx = np.arange(1 << step)
        signs = np.where(idx & 1, 1.0, -1.0)
        return signs * np.sqrt(self.grid.tau)

    def child_expand(self, values, level):
        """Lift level-``level`` node values to their children one level down."""
        return np.repeat(np.asarray(values), 2, axis=0)

    def to_pathwise(self, values, level):
        """Broadcast level-``level`` node values to the 2^N leaves."""
        fan = 1 << (self.grid.n_steps - level)
        if fan == 1:
            return np.asarray(values)
        return np.repeat(np.asarray(values), fan, axis=0)

    def pathwise_increment(self, step):
        """Step-``step`` increment seen by each leaf, shape (2^N,)."""
        return self.to_pathwise(self.increments_at(step), step)

    def brownian(self, level):
        """Wiener values W(t_level) per level-``level`` node, shape (2^level,)."""
        while len(self._brownian_cache) <= level:
            k = len(self._brownian_cache)
            if k == 0:
                self._brownian_cache.append(np.zeros(1))
            else:
                prev = self._brownian_cache[k - 1]
                self._brownian_cache.append(np.repeat(prev, 2) + self.increments_at(k))
        return self._brownian_cache[level]

    def condexp(self, pathwise_values, level):
        """Condition leaf-level data on the level-``level`` nodes (exact)."""
        return tree_condexp(pathwise_values, self.grid.n_steps, level)


@dataclass
class EnsembleDriver:
    """Monte Carlo ensemble of Gaussian Wiener increments.

    ``increments[p, k]`` is the step from t_k to t_{k+1} on path p.
    """

    grid: TimeGrid
    increments: np.ndarray
    seed: int = 0
    _brownian: np.ndarray = field(repr=False, default=None)
    kind = "ensemble"

    @property
    def n_paths(self):
        return self.increments.shape[0]

    def n_scenarios(self, level):
        return self.n_paths

    def increments_at(self, step):
        return self.increments[:, step - 1]

    def child_expand(self, values, level):
        return np.asarray(values)

    def to_pathwise(self, values, level):
        return np.asarray(values)

    def pathwise_increment(self, step):
        return self.increments[:, step - 1]

    def brownian(self, level):
        if self._brownian is None:
            w = np.empty((self.n_paths, self.grid.n_steps + 1))
            w[:, 0] = 0.0
            np.cumsum(self.increments, axis=1, out=w[:, 1:])
            self._brownian = w
        return self._brownian[:, level]


def gaussian_driver(grid, n_paths, seed):
    """Draw a Gaussian increment ensemble with keyed per-path streams.

    Path p uses the Philox stream ``jumped(p)`` of the seeded generator, so
    the sample for a given (seed, p) never depends on n_paths: enlarging
    the ensemble appends paths without perturbing existing ones.

    Returns
    -------
    EnsembleDriver
    """
    if n_paths < 1:
        raise ValueError(f"need at least one path, got {n_paths}")
    root = np.random.Philox(key=seed)
    inc = np.empty((n_paths, grid.n_steps))
    for p in range(n_paths):
        gen = np.random.Generator(root.jumped(p))
        inc[p] = gen.standard_normal(grid.n_steps)
    inc *= np.sqrt(grid.tau)
    return EnsembleDriver(grid=grid, increments=inc, seed=seed)


def refine_common_path(driver):
    """Coarsen an ensemble by one level: pairwise-summed increments on N/2 steps.

    The returned driver lives on the grid with half as many steps but rides
    the same underlying Wiener paths, which is what coupled coarse/fine
    error estimates need.
    """
    n = driver.grid.n_steps
    if n % 2 != 0:
        raise ValueError(f"cannot halve an odd number of steps ({n})")
    coarse_grid = make_time_grid(driver.grid.horizon, n // 2)
    inc = driver.increments[:, 0::2] + driver.increments[:, 1::2]
    return EnsembleDriver(grid=coarse_grid, increments=inc, seed=driver.seed)
