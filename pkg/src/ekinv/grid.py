"""Uniform rectangular grids and the Dirichlet sine basis.

A domain is an axis-aligned box [0, L1] (x [0, L2]) discretized by a uniform
vertex grid of n cells per axis.  Fields store values on the interior nodes
only; boundary values are implicitly zero unless a forward solver supplies its
own boundary data.  On this grid the eigenfunctions of the negative Laplacian
with homogeneous Dirichlet boundary conditions,

    phi_k(x) = prod_a sqrt(2/L_a) * sin(k_a pi x_a / L_a),

are exactly orthonormal under the trapezoidal (interior-node) inner product
and exactly diagonalize the standard second-difference matrix.  All prior
sampling is performed in this basis, so synthesis/analysis round trips are
exact to machine precision at every resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.fft
import scipy.sparse


def _as_tuple(value, dim: int, name: str) -> tuple:
    if np.isscalar(value):
        value = (value,) * dim
    value = tuple(value)
    if len(value) != dim:
        raise ValueError(f"{name} must have one entry per axis, got {value!r} for dim={dim}")
    return value


@dataclass(frozen=True)
class Domain:
    """Axis-aligned box [0, extents] with a uniform grid of n_cells per axis."""

    dim: int
    extents: tuple[float, ...]
    n_cells: tuple[int, ...]

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if len(self.extents) != self.dim or len(self.n_cells) != self.dim:
            raise ValueError("extents and n_cells must have one entry per axis")
        if any(L <= 0 or not np.isfinite(L) for L in self.extents):
            raise ValueError(f"extents must be strictly positive, got {self.extents}")
        if any(int(n) != n or n < 2 for n in self.n_cells):
            raise ValueError(f"n_cells must be integers >= 2 per axis, got {self.n_cells}")

    @property
    def h(self) -> tuple[float, ...]:
        """Grid spacing per axis."""
        return tuple(L / n for L, n in zip(self.extents, self.n_cells))

    @property
    def interior_shape(self) -> tuple[int, ...]:
        """Number of interior nodes per axis."""
        return tuple(n - 1 for n in self.n_cells)

    @property
    def n_interior(self) -> int:
        return int(np.prod(self.interior_shape))

    @property
    def node_measure(self) -> float:
        """Quadrature weight of one interior node (product of spacings)."""
        return float(np.prod(self.h))

    def interior_coords(self, axis: int) -> np.ndarray:
        """Coordinates of interior nodes along one axis."""
        n = self.n_cells[axis]
        return self.extents[axis] * np.arange(1, n) / n

    def interior_meshgrid(self) -> tuple[np.ndarray, ...]:
        """Interior node coordinates as arrays of shape ``interior_shape``."""
        axes = [self.interior_coords(a) for a in range(self.dim)]
        return tuple(np.meshgrid(*axes, indexing="ij"))

    def inner(self, u: np.ndarray, v: np.ndarray) -> float:
        """Grid L2 inner product over interior nodes."""
        return self.node_measure * float(np.dot(np.ravel(u), np.ravel(v)))

    def norm(self, u: np.ndarray) -> float:
        """Grid L2 norm over interior nodes."""
        return float(np.sqrt(self.node_measure) * np.linalg.norm(np.ravel(u)))


def build_domain(dim: int, extents, n_cells) -> Domain:
    """Validate and construct a :class:`Domain`.

    ``extents`` and ``n_cells`` may be scalars (applied to every axis) or
    per-axis sequences.
    """
    extents = _as_tuple(extents, dim, "extents")
    n_cells = _as_tuple(n_cells, dim, "n_cells")
    return Domain(dim=dim, extents=tuple(float(L) for L in extents),
                  n_cells=tuple(int(n) for n in n_cells))


@dataclass
class Field:
    """Real-valued grid function stored on the interior nodes of a domain."""

    domain: Domain
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.values.size != self.domain.n_interior:
            raise ValueError(
                f"field has {self.values.size} values, domain has "
                f"{self.domain.n_interior} interior nodes")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must all be finite")

    @property
    def grid(self) -> np.ndarray:
        """Values reshaped to the interior grid (x1-major)."""
        return self.values.reshape(self.domain.interior_shape)

    def norm(self) -> float:
        return self.domain.norm(self.values)


class SpectralBasis:
    """Dirichlet sine eigenbasis of -Laplace on a domain's interior grid.

    Modes are all tensor sine functions representable at the grid resolution
    (k_a = 1 .. n_a - 1 per axis), sorted ascending by continuum eigenvalue
    lambda_k = sum_a (k_a pi / L_a)^2.  Synthesis and analysis are exact
    inverses implemented with type-I discrete sine transforms.
    """

    def __init__(self, domain: Domain):
        self.domain = domain
        shape = domain.interior_shape
        k_axes = [np.arange(1, n) for n in domain.n_cells]
        k_grids = np.meshgrid(*k_axes, indexing="ij")
        ks = np.stack([k.ravel() for k in k_grids], axis=1)

        lam_phys = np.zeros(len(ks))
        lam_norm = np.zeros(len(ks))
        for a in range(domain.dim):
            lam_phys += (ks[:, a] * np.pi / domain.extents[a]) ** 2
            lam_norm += (ks[:, a] * np.pi) ** 2

        # stable sort: eigenvalue, then lexicographic multi-index
        order = np.lexsort(tuple(ks[:, a] for a in reversed(range(domain.dim))) + (lam_phys,))
        self.k_indices = ks[order]
        self.eigenvalues = lam_phys[order]
        self.eigenvalues_normalized = lam_norm[order]
        self._order = order
        self._inverse_order = np.argsort(order)
        self._kgrid_shape = shape

        # DST-I scalings: synthesis f = c_syn * dstn(coeff grid),
        # analysis c = c_ana * dstn(values grid); dst1 o dst1 = 2n identity.
        c_syn = 1.0
        c_ana = 1.0
        for L, n in zip(domain.extents, domain.n_cells):
            c_syn *= np.sqrt(1.0 / (2.0 * L))
            c_ana *= np.sqrt(L / 2.0) / n
        self._c_syn = c_syn
        self._c_ana = c_ana

    @property
    def n_modes(self) -> int:
        return len(self.eigenvalues)

    def synthesis(self, coeffs: np.ndarray) -> Field:
        """Field with the given coefficients on the sorted mode list."""
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.size != self.n_modes:
            raise ValueError(f"expected {self.n_modes} coefficients, got {coeffs.size}")
        kgrid = np.empty(self.n_modes)
        kgrid[self._order] = coeffs
        values = self._c_syn * scipy.fft.dstn(kgrid.reshape(self._kgrid_shape), type=1)
        return Field(self.domain, values.ravel())

    def analysis(self, field: Field | np.ndarray) -> np.ndarray:
        """Coefficients of a field in the sorted mode order."""
        values = field.values if isinstance(field, Field) else np.asarray(field, dtype=float)
        vgrid = values.reshape(self._kgrid_shape)
        kgrid = self._c_ana * scipy.fft.dstn(vgrid, type=1)
        return kgrid.ravel()[self._order]

    def eigenfunction(self, mode: int) -> Field:
        """Normalized sine eigenfunction for one sorted mode index."""
        e = np.zeros(self.n_modes)
        e[mode] = 1.0
        return self.synthesis(e)


def dirichlet_spectrum(domain: Domain) -> SpectralBasis:
    """All Dirichlet sine eigenpairs representable at the grid resolution."""
    return SpectralBasis(domain)


def white_noise(domain: Domain, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. standard normal coefficients, one per spectral mode."""
    n_modes = int(np.prod([n - 1 for n in domain.n_cells]))
    return rng.standard_normal(n_modes)


def neg_laplacian(domain: Domain) -> scipy.sparse.csr_matrix:
    """Second-difference matrix for -Laplace with Dirichlet boundaries.

    Acts on interior-node vectors in the same (x1-major) ordering as
    :class:`Field` values.  The sine basis diagonalizes it exactly with
    eigenvalues sum_a (4/h_a^2) sin^2(k_a pi h_a / (2 L_a)).
    """
    blocks = []
    for a in range(domain.dim):
        n = domain.n_cells[a]
        h = domain.h[a]
        main = np.full(n - 1, 2.0 / h**2)
        off = np.full(n - 2, -1.0 / h**2)
        blocks.append(scipy.sparse.diags([off, main, off], [-1, 0, 1], format="csr"))
    if domain.dim == 1:
        return blocks[0]
    eye = [scipy.sparse.identity(n - 1, format="csr") for n in domain.n_cells]
    return (scipy.sparse.kron(blocks[0], eye[1]) + scipy.sparse.kron(eye[0], blocks[1])).tocsr()


def discrete_eigenvalue(domain: Domain, k: np.ndarray) -> float:
    """Eigenvalue of :func:`neg_laplacian` for multi-index ``k``."""
    k = np.atleast_1d(k)
    lam = 0.0
    for a in range(domain.dim):
        h = domain.h[a]
        lam += (4.0 / h**2) * np.sin(k[a] * np.pi * h / (2.0 * domain.extents[a])) ** 2
    return float(lam)
