"""Node-indexed fields on grid x tree.

Every field stores one full-grid slice per tree node in an array of shape
``(n_nodes, *grid.shape)`` (plus a trailing control axis for relaxed
policies).  Since a node lives on exactly one level, the node index alone
addresses ``(level, node)``.
"""

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError

_alloc_lock = threading.Lock()
_alloc = {"count": 0, "bytes": 0}


def allocation_stats():
    """Number and total bytes of field arrays allocated since the last reset."""
    with _alloc_lock:
        return dict(_alloc)


def reset_allocation_stats():
    with _alloc_lock:
        _alloc["count"] = 0
        _alloc["bytes"] = 0


def _register(arr):
    with _alloc_lock:
        _alloc["count"] += 1
        _alloc["bytes"] += int(arr.nbytes)


def _check_shape(arr, tree, grid, tail=()):
    want = (tree.n_nodes,) + tuple(grid.shape) + tuple(tail)
    if arr.shape != want:
        raise DimensionError(f"field has shape {arr.shape}, expected {want}")


@dataclass
class ValueField:
    values: np.ndarray
    tree: object
    grid: object
    scheme: str = "theta=1"
    problem_name: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        _check_shape(self.values, self.tree, self.grid)

    @classmethod
    def zeros(cls, tree, grid, **kw):
        arr = np.zeros((tree.n_nodes,) + tuple(grid.shape))
        _register(arr)
        return cls(arr, tree, grid, **kw)

    def root(self):
        return self.values[self.tree.root]

    def copy(self):
        return ValueField(self.values.copy(), self.tree, self.grid, self.scheme, self.problem_name)


@dataclass
class DensityField:
    """Conditional densities of the killed diffusion given the Z-path.

    ``values[n]`` is the density at the start of node ``n``'s interval
    (time ``t_k``).  ``occupation[n]`` is the density the scheme pairs with
    the running cost over ``[t_k, t_{k+1})``; for the implicit scheme it
    equals the children's start densities.
    """

    values: np.ndarray
    occupation: np.ndarray
    tree: object
    grid: object

    def __post_init__(self):
        _check_shape(self.values, self.tree, self.grid)
        _check_shape(self.occupation, self.tree, self.grid)

    @classmethod
    def zeros(cls, tree, grid):
        vals = np.zeros((tree.n_nodes,) + tuple(grid.shape))
        occ = np.zeros_like(vals)
        _register(vals)
        _register(occ)
        return cls(vals, occ, tree, grid)

    def mass(self):
        w = self.grid.weights
        return np.sum(self.values * w, axis=tuple(range(1, self.values.ndim)))


@dataclass
class PolicyField:
    """Control-point index per (node, grid point); boundary entries are unused."""

    indices: np.ndarray
    tree: object
    grid: object
    n_controls: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        _check_shape(self.indices, self.tree, self.grid)
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.n_controls):
            raise DimensionError("policy indices out of range for the control set")

    @classmethod
    def constant(cls, tree, grid, n_controls, index=0):
        arr = np.full((tree.n_nodes,) + tuple(grid.shape), int(index), dtype=np.int64)
        _register(arr)
        return cls(arr, tree, grid, n_controls)

    def node_weights(self, node):
        """One-hot ``(P_interior, M)`` weights for a node."""
        idx = self.grid.interior(self.indices[node])
        out = np.zeros((idx.size, self.n_controls))
        out[np.arange(idx.size), idx] = 1.0
        return out

    def interior_indices(self, node):
        return self.grid.interior(self.indices[node])


@dataclass
class RelaxedPolicy:
    """A probability vector over control points per (node, grid point)."""

    weights: np.ndarray
    tree: object
    grid: object

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.ndim != 1 + len(self.grid.shape) + 1:
            raise DimensionError("relaxed policy needs a trailing control axis")
        _check_shape(self.weights, self.tree, self.grid, tail=(self.weights.shape[-1],))
        if np.any(self.weights < -1e-15) or np.max(np.abs(self.weights.sum(axis=-1) - 1.0)) > 1e-12:
            raise DimensionError("relaxed policy weights must be probability vectors")

    @property
    def n_controls(self):
        return self.weights.shape[-1]

    @classmethod
    def from_policy(cls, policy: PolicyField):
        w = np.zeros(policy.indices.shape + (policy.n_controls,))
        np.put_along_axis(w, policy.indices[..., None], 1.0, axis=-1)
        return cls(w, policy.tree, policy.grid)

    def node_weights(self, node):
        return self.grid.interior(self.weights[node])


@dataclass
class FieldBundle:
    """Whatever a solve produced, for export."""

    value: ValueField | None = None
    policy: PolicyField | None = None
    density: DensityField | None = None
    extra: dict = field(default_factory=dict)
