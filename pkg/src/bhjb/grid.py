"""Uniform tensor-product grids on a box, with dual-cell quadrature."""

import itertools

import numpy as np

from .errors import DimensionError


class SpatialGrid:
    """Uniform grid including boundary nodes.

    Quadrature weights are the volumes of the dual cells
    ``[x_i - h/2, x_i + h/2]`` clipped to the box (midpoint rule on dual
    cells; boundary nodes carry half weight per boundary axis).  Interior
    unknowns are ordered C-style over ``shape[j] - 2`` nodes per axis.
    """

    def __init__(self, lower, upper, shape):
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        shape = tuple(int(s) for s in np.atleast_1d(shape))
        if not (lower.shape == upper.shape and len(shape) == lower.size):
            raise DimensionError("grid bounds and shape disagree in dimension")
        if lower.size not in (1, 2):
            raise DimensionError("only 1D and 2D grids are supported")
        if any(s < 3 for s in shape):
            raise DimensionError(f"need at least 3 nodes per axis, got {shape}")
        if np.any(upper <= lower):
            raise DimensionError("grid needs lower < upper on every axis")
        self.lower = lower
        self.upper = upper
        self.shape = shape
        self.ndim = lower.size
        self.spacing = (upper - lower) / (np.asarray(shape) - 1)
        self.axes = [np.linspace(lower[j], upper[j], shape[j]) for j in range(self.ndim)]
        self.interior_shape = tuple(s - 2 for s in shape)
        self.n_interior = int(np.prod(self.interior_shape))
        self.cell_volume = float(np.prod(self.spacing))

        mesh = np.meshgrid(*[a[1:-1] for a in self.axes], indexing="ij")
        self.interior_points = np.stack([m.ravel() for m in mesh], axis=-1)
        full = np.meshgrid(*self.axes, indexing="ij")
        self.points = np.stack([m.ravel() for m in full], axis=-1)

        w = np.ones(shape)
        for j in range(self.ndim):
            sl = [slice(None)] * self.ndim
            for end in (0, -1):
                sl[j] = end
                w[tuple(sl)] *= 0.5
        self.weights = w * self.cell_volume

        mask = np.zeros(shape, dtype=bool)
        mask[tuple(slice(1, -1) for _ in range(self.ndim))] = True
        self.interior_mask = mask

    @classmethod
    def from_domain(cls, domain, shape):
        shape = tuple(np.atleast_1d(shape))
        if len(shape) == 1 and domain.dimension > 1:
            shape = shape * domain.dimension
        return cls(domain.lower, domain.upper, shape)

    def refined(self, factor=2):
        return SpatialGrid(self.lower, self.upper, tuple((s - 1) * factor + 1 for s in self.shape))

    def __eq__(self, other):
        return (
            isinstance(other, SpatialGrid)
            and self.shape == other.shape
            and np.array_equal(self.lower, other.lower)
            and np.array_equal(self.upper, other.upper)
        )

    def __hash__(self):
        return hash((self.shape, tuple(self.lower), tuple(self.upper)))

    def __repr__(self):
        return f"SpatialGrid(lower={self.lower.tolist()}, upper={self.upper.tolist()}, shape={self.shape})"

    # -- conversions -------------------------------------------------------

    def interior(self, full):
        """Interior values of a full-grid array, flattened."""
        full = np.asarray(full)
        return full[tuple(slice(1, -1) for _ in range(self.ndim))].reshape(self.n_interior, *full.shape[self.ndim:])

    def embed(self, interior_values):
        """Full-grid array with zero boundary from flattened interior values."""
        interior_values = np.asarray(interior_values)
        tail = interior_values.shape[1:]
        out = np.zeros(self.shape + tail, dtype=interior_values.dtype)
        out[tuple(slice(1, -1) for _ in range(self.ndim))] = interior_values.reshape(self.interior_shape + tail)
        return out

    def sample(self, fn):
        """Evaluate ``fn(points) -> (P,)`` at every grid node."""
        return np.asarray(fn(self.points), dtype=float).reshape(self.shape)

    # -- quadrature --------------------------------------------------------

    def pair(self, a, b):
        return float(np.sum(self.weights * np.asarray(a) * np.asarray(b)))

    def integrate(self, a):
        return float(np.sum(self.weights * np.asarray(a)))

    # -- point location ----------------------------------------------------

    def contains(self, point):
        point = np.atleast_1d(np.asarray(point, dtype=float))
        return bool(np.all(point >= self.lower) and np.all(point <= self.upper))

    def nearest_index(self, x):
        """Flat full-grid index of the nearest node for each row of ``x``."""
        x = np.atleast_2d(x)
        idx = np.floor((x - self.lower) / self.spacing + 0.5).astype(np.int64)
        idx = np.clip(idx, 0, np.asarray(self.shape) - 1)
        return np.ravel_multi_index(tuple(idx.T), self.shape)

    def multilinear_weights(self, point):
        """Full-grid array of multilinear (cloud-in-cell) weights at ``point``.

        Pairing these weights with nodal values gives multilinear
        interpolation; the weights are non-negative and sum to one.
        """
        point = np.atleast_1d(np.asarray(point, dtype=float))
        if point.size != self.ndim:
            raise DimensionError(f"point has dimension {point.size}, grid has {self.ndim}")
        if not self.contains(point):
            raise DimensionError(f"point {point.tolist()} lies outside the grid")
        s = (point - self.lower) / self.spacing
        base = np.minimum(np.floor(s).astype(int), np.asarray(self.shape) - 2)
        frac = s - base
        out = np.zeros(self.shape)
        for corner in itertools.product((0, 1), repeat=self.ndim):
            wt = 1.0
            for j, c in enumerate(corner):
                wt *= frac[j] if c else 1.0 - frac[j]
            out[tuple(base + np.asarray(corner))] += wt
        return out

    def interpolate(self, values, point):
        return float(np.sum(self.multilinear_weights(point) * np.asarray(values)))
