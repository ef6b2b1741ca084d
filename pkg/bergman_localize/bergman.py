# Copyright 2025 Google LLC
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Finite-dimensional Bergman spaces: Gram systems and extremal quantities.

A GramSystem is the Gram matrix of a monomial basis over a region, computed
with equal-weight quadrature, together with a truncated Cholesky factor. With
the factor L of the equilibrated Gram matrix, the functions

  psi(z) = L^{-1} S b(z),   S = diag(A_jj)^{-1/2},

form an orthonormal basis of the retained subspace, and

  K(z)      = |psi(z)|^2
  M(z; X)^2 = |d psi|^2 - |<psi, d psi>|^2 / K,   d psi = sum_j X_j dpsi/dz_j
  beta      = M / sqrt(K).

Caps assembled from the same proposals as the full domain have node sets
nested in the full domain's, so A_cap <= A_full holds exactly.
"""

from __future__ import annotations

from collections.abc import Sequence
import dataclasses
import functools
import logging
import math
from typing import Any

import numpy as np
from scipy import linalg

from bergman_localize import constants
from bergman_localize import domain
from bergman_localize import errors
from bergman_localize import gram_cache
from bergman_localize.lib import utils

# Error messages used in this module.
_CONDITIONING_MSG = 'Gram matrix is numerically singular or indefinite'
_NOT_INTERIOR_MSG = 'Evaluation point is not interior to the region'
_BASIS_TOO_LARGE_MSG = 'Basis is too large for the quadrature count'


class Error(errors.Error):
  """Base error of the bergman module."""


class ConditioningError(Error, errors.NumericError):
  """The Gram matrix is indefinite or singular after truncation."""

  def __init__(self, message: str, degree: int):
    super().__init__(f'{message} (degree {degree})')
    self.degree = degree


class QuadratureInconsistencyError(Error, errors.NumericError):
  """Kernel values decreased along nested bases."""


class BasisTooLargeError(Error, errors.ConfigError):
  """The basis exceeds a tenth of the quadrature count."""


class SweepOrderError(Error, errors.ConfigError):
  """A degree list is not strictly increasing."""


def _graded_lex(n: int, degree: int) -> tuple[tuple[int, ...], ...]:
  """Multi-indices with |alpha| <= degree, graded, lexicographic inside."""

  def exact(total: int, slots: int):
    if slots == 1:
      yield (total,)
      return
    for first in range(total, -1, -1):
      for rest in exact(total - first, slots - 1):
        yield (first,) + rest

  return tuple(
      alpha for total in range(degree + 1) for alpha in exact(total, n)
  )


@dataclasses.dataclass(frozen=True)
class MonomialBasis:
  """Monomials ((z - center) / scale)^alpha with |alpha| <= degree.

  The span does not depend on the chart (center, scale); charts only change
  the conditioning of the Gram matrix.
  """

  n: int
  degree: int
  center: tuple[complex, ...] = ()
  scale: float = 1.0

  def __post_init__(self):
    if self.degree < 0 or self.scale <= 0:
      raise BasisTooLargeError(
          f'Invalid basis degree={self.degree} scale={self.scale}.'
      )
    if not self.center:
      object.__setattr__(self, 'center', (0j,) * self.n)
    object.__setattr__(
        self, 'center', tuple(complex(c) for c in self.center)
    )

  @functools.cached_property
  def multi_indices(self) -> tuple[tuple[int, ...], ...]:
    return _graded_lex(self.n, self.degree)

  @functools.cached_property
  def _exponents(self) -> np.ndarray:
    return np.array(self.multi_indices, dtype=int).reshape(-1, self.n)

  @property
  def size(self) -> int:
    return math.comb(self.n + self.degree, self.n)

  @property
  def degrees(self) -> np.ndarray:
    """Total degree of every basis function."""
    return self._exponents.sum(axis=1)

  def prefix(self, degree: int) -> MonomialBasis:
    """The basis of a lower degree in the same chart (a prefix of this one)."""
    return dataclasses.replace(self, degree=degree)

  def _powers(self, z: np.ndarray) -> np.ndarray:
    u = (np.asarray(z, dtype=complex) - np.asarray(self.center)) / self.scale
    powers = np.ones((u.shape[0], self.n, self.degree + 1), dtype=complex)
    for k in range(1, self.degree + 1):
      powers[:, :, k] = powers[:, :, k - 1] * u
    return powers

  def values(self, z: np.ndarray) -> np.ndarray:
    """Basis values at (N, n) points, shape (N, size)."""
    powers = self._powers(z)
    result = np.ones((powers.shape[0], self.size), dtype=complex)
    for j in range(self.n):
      result *= powers[:, j, self._exponents[:, j]]
    return result

  def derivatives(self, z: np.ndarray) -> np.ndarray:
    """Complex partials d/dz_j of the basis, shape (N, n, size)."""
    powers = self._powers(z)
    exps = self._exponents
    result = np.empty((powers.shape[0], self.n, self.size), dtype=complex)
    for j in range(self.n):
      term = np.ones((powers.shape[0], self.size), dtype=complex)
      for k in range(self.n):
        if k == j:
          lowered = np.maximum(exps[:, k] - 1, 0)
          term *= powers[:, k, lowered] * (exps[:, k] / self.scale)
        else:
          term *= powers[:, k, exps[:, k]]
      result[:, j, :] = term
    return result

  def evaluate(self, coefficients: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Values of sum_alpha c_alpha phi_alpha at (N, n) points."""
    return self.values(z) @ coefficients

  def evaluate_gradient(
      self, coefficients: np.ndarray, z: np.ndarray
  ) -> np.ndarray:
    """Complex gradient of sum_alpha c_alpha phi_alpha, shape (N, n)."""
    return self.derivatives(z) @ coefficients

  def to_dict(self) -> dict[str, Any]:
    return {
        'n': self.n,
        'degree': self.degree,
        'center': [[c.real, c.imag] for c in self.center],
        'scale': self.scale,
    }


@dataclasses.dataclass(frozen=True)
class KernelValue:
  """A finite-basis Bergman kernel value.

  Attributes:
    value: K(z) > 0.
    degree: Highest total degree among the retained basis functions.
    unreliable: The point is within twice the quadrature mesh scale of the
      region boundary.
    converged: Set by degree sweeps on the first degree whose relative
      increment falls below the convergence tolerance.
  """

  value: float
  degree: int
  unreliable: bool = False
  converged: bool = False


@dataclasses.dataclass(frozen=True, eq=False)
class GramSystem:
  """Gram matrix of a basis over a region with its truncated factorization.

  Attributes:
    spec: The domain.
    region: The full domain or a cap.
    basis: The monomial basis.
    gram: A[a, b] = sum_q w_q phi_a(z_q) conj(phi_b(z_q)), exactly Hermitian.
    quadrature: The quadrature nodes the matrix was assembled on.
    scaling: The equilibration S = diag(A)^{-1/2}.
    factor: Lower Cholesky factor of S A S restricted to `retained`.
    retained: Basis positions kept by the factorization, in basis order.
    truncated: Basis positions dropped at the pivot floor.
    condition: 2-norm condition estimate of the equilibrated retained block.
  """

  spec: domain.DomainSpec
  region: domain.Region
  basis: MonomialBasis
  gram: np.ndarray
  quadrature: domain.QuadratureSet
  scaling: np.ndarray
  factor: np.ndarray
  retained: tuple[int, ...]
  truncated: tuple[int, ...]
  condition: float

  @property
  def effective_degree(self) -> int:
    return int(self.basis.degrees[list(self.retained)].max())

  @property
  def truncated_degrees(self) -> list[int]:
    return sorted({int(d) for d in self.basis.degrees[list(self.truncated)]})

  def _whiten(self, columns: np.ndarray) -> np.ndarray:
    """L^{-1} S v over the retained rows, for (size, N) columns."""
    rows = list(self.retained)
    scaled = columns[rows] * self.scaling[rows, None]
    return linalg.solve_triangular(self.factor, scaled, lower=True)

  def orthonormal(self, z: np.ndarray) -> np.ndarray:
    """Orthonormal basis values psi(z), shape (N, k)."""
    return self._whiten(self.basis.values(z).T).T

  def orthonormal_derivatives(
      self, z: np.ndarray, x: np.ndarray
  ) -> np.ndarray:
    """Directional derivatives sum_j X_j dpsi/dz_j, shape (N, k)."""
    d = np.einsum('njs,j->ns', self.basis.derivatives(z), np.asarray(x))
    return self._whiten(d.T).T

  def orthonormal_gradient(self, z: np.ndarray) -> np.ndarray:
    """All partials dpsi/dz_j, shape (N, n, k)."""
    d = self.basis.derivatives(z)
    return np.stack(
        [self._whiten(d[:, j, :].T).T for j in range(self.basis.n)], axis=1
    )

  def coefficients(self, whitened: np.ndarray) -> np.ndarray:
    """Maps whitened coordinates e to full-basis coefficients c.

    The function psi(z)^T e equals phi(z)^T c.
    """
    rows = list(self.retained)
    c = np.zeros(self.basis.size, dtype=complex)
    c[rows] = self.scaling[rows] * linalg.solve_triangular(
        self.factor, whitened, lower=True, trans='T'
    )
    return c

  def metadata(self) -> dict[str, Any]:
    return {
        'count': self.quadrature.proposal_count,
        'seed': self.quadrature.seed,
        'nodes': self.quadrature.count,
        'total_weight': self.quadrature.total_weight,
        'condition': self.condition,
        'truncated_degrees': self.truncated_degrees,
    }


def _gram_chunk(
    basis: MonomialBasis, points: np.ndarray, weight: float
) -> tuple[np.ndarray, np.ndarray]:
  values = basis.values(points)
  block = weight * (values.T @ np.conj(values))
  diagonal = weight * np.sum(np.abs(values) ** 2, axis=0)
  return block, diagonal


def _assemble(
    basis: MonomialBasis, quadrature: domain.QuadratureSet, max_workers: int
) -> np.ndarray:
  """Sums chunk Gram blocks in chunk order, then mirrors the upper triangle."""
  params = [
      [basis, quadrature.points[chunk], quadrature.weight]
      for chunk in utils.chunked(quadrature.count, constants.GRAM_CHUNK_SIZE)
  ]
  parts = utils.parallel_map(_gram_chunk, params, max_workers=max_workers)
  upper = np.zeros((basis.size, basis.size), dtype=complex)
  diagonal = np.zeros(basis.size)
  for block, diag in parts:
    upper += block
    diagonal += diag
  gram = np.triu(upper, 1)
  gram = gram + gram.conj().T
  gram[np.diag_indices(basis.size)] = diagonal
  return gram


def _factorize(
    gram: np.ndarray, basis: MonomialBasis, active: Sequence[int]
) -> tuple[np.ndarray, np.ndarray, tuple[int, ...], tuple[int, ...], float]:
  """Ordered Cholesky of the equilibrated Gram matrix with pivot dropping.

  Basis functions are eliminated in basis order; a function whose Schur
  pivot is at most the relative floor is dropped. Decisions only depend on
  earlier functions, so prefixes of a basis keep prefixes of its retained
  set.
  """
  degrees = basis.degrees
  diagonal = gram.diagonal().real
  for j in active:
    if diagonal[j] <= 0:
      raise ConditioningError(_CONDITIONING_MSG, int(degrees[j]))
  scaling = np.zeros(gram.shape[0])
  scaling[list(active)] = 1.0 / np.sqrt(diagonal[list(active)])
  factor = np.zeros((len(active), len(active)), dtype=complex)
  retained, truncated = [], []
  for j in active:
    m = len(retained)
    column = gram[retained, j] * scaling[retained] * scaling[j]
    if m:
      y = linalg.solve_triangular(factor[:m, :m], column, lower=True)
    else:
      y = np.zeros(0, dtype=complex)
    pivot = 1.0 - float(np.vdot(y, y).real)
    if pivot < constants.INDEFINITE_PIVOT:
      raise ConditioningError(_CONDITIONING_MSG, int(degrees[j]))
    if pivot <= constants.PIVOT_FLOOR:
      truncated.append(j)
      continue
    factor[m, :m] = np.conj(y)
    factor[m, m] = math.sqrt(pivot)
    retained.append(j)
  if not retained:
    raise ConditioningError(_CONDITIONING_MSG, 0)
  k = len(retained)
  factor = factor[:k, :k]
  condition = float(np.linalg.cond(factor) ** 2)
  if truncated:
    logging.warning(
        'Truncated %d basis function(s) of degree(s) %s at pivot floor %g.',
        len(truncated), sorted({int(degrees[j]) for j in truncated}),
        constants.PIVOT_FLOOR,
    )
  return scaling, factor, tuple(retained), tuple(truncated), condition


def _system(
    spec: domain.DomainSpec,
    region: domain.Region,
    basis: MonomialBasis,
    gram: np.ndarray,
    quadrature: domain.QuadratureSet,
    active: Sequence[int] | None = None,
) -> GramSystem:
  if active is None:
    active = range(basis.size)
  scaling, factor, retained, truncated, condition = _factorize(
      gram, basis, sorted(active)
  )
  return GramSystem(
      spec=spec,
      region=region,
      basis=basis,
      gram=gram,
      quadrature=quadrature,
      scaling=scaling,
      factor=factor,
      retained=retained,
      truncated=truncated,
      condition=condition,
  )


def assemble_gram(
    spec: domain.DomainSpec,
    region: domain.Region,
    basis: MonomialBasis,
    quad_count: int,
    seed: int,
    *,
    cache: gram_cache.GramCache | None = None,
    max_workers: int = 1,
) -> GramSystem:
  """Assembles and factorizes the Gram system of a basis over a region.

  Args:
    spec: The domain.
    region: The full domain or a cap. Caps filter the full domain's
      proposals, so a cap and the full domain assembled with the same count
      and seed have nested node sets.
    basis: The monomial basis.
    quad_count: Number of quadrature proposals in the box.
    seed: The proposal seed.
    cache: Optional Gram cache.
    max_workers: Worker pool size for the chunked assembly.

  Returns:
    The Gram system.

  Raises:
    BasisTooLargeError: The basis is larger than quad_count / 10.
    ConditioningError: The matrix is indefinite or fully degenerate.
    domain.EmptyRegionError: The region has no quadrature node.
  """
  if basis.size > constants.MAX_BASIS_FRACTION * quad_count:
    raise BasisTooLargeError(
        f'{_BASIS_TOO_LARGE_MSG}: {basis.size} > {quad_count} / 10'
    )
  quadrature = domain.sample_interior(spec, region, quad_count, seed)
  key = None
  gram = None
  if cache is not None:
    key = cache.key(spec, region, basis, quad_count, seed)
    gram = cache.load(key)
  if gram is None:
    gram = _assemble(basis, quadrature, max_workers)
    if cache is not None:
      cache.store(key, gram)
  system = _system(spec, region, basis, gram, quadrature)
  logging.debug(
      'Assembled %s Gram system: size %d, nodes %d, condition %.3g.',
      region.to_dict()['kind'], basis.size, quadrature.count,
      system.condition,
  )
  return system


def restrict(gs: GramSystem, indices: Sequence[int]) -> GramSystem:
  """Refactors a Gram system on a subset of its basis functions."""
  return _system(gs.spec, gs.region, gs.basis, gs.gram, gs.quadrature,
                 indices)


def truncate_degree(gs: GramSystem, degree: int) -> GramSystem:
  """Returns the system of the degree-`degree` prefix of the basis."""
  basis = gs.basis.prefix(degree)
  size = basis.size
  return _system(
      gs.spec, gs.region, basis, gs.gram[:size, :size], gs.quadrature
  )


def _interior_point(gs: GramSystem, z: Any) -> np.ndarray:
  point = np.asarray(z, dtype=complex).reshape(1, gs.basis.n)
  inside = np.atleast_1d(domain.eval_r(gs.spec, point))[0] < 0
  inside = inside and gs.region.contains(point)[0]
  if not inside:
    raise domain.DomainOfValidityError(f'{_NOT_INTERIOR_MSG}: {point[0]}')
  return point


def is_unreliable(gs: GramSystem, z: Any) -> bool:
  """Whether z is within twice the mesh scale of the region boundary."""
  point = np.asarray(z, dtype=complex).reshape(1, gs.basis.n)
  dist = domain.boundary_distance(gs.spec, point, gs.region)[0]
  return bool(
      dist < constants.RELIABILITY_MESH_FACTOR * gs.quadrature.mesh_scale
  )


def kernel_at(gs: GramSystem, z: Any) -> KernelValue:
  """Finite-basis Bergman kernel K(z) = b(z)^* A^{-1} b(z).

  Raises:
    domain.DomainOfValidityError: z is not interior to the region.
  """
  point = _interior_point(gs, z)
  psi = gs.orthonormal(point)[0]
  value = float(np.vdot(psi, psi).real)
  return KernelValue(
      value=value,
      degree=gs.effective_degree,
      unreliable=is_unreliable(gs, point),
  )


def truncation_tail(gs: GramSystem, z: Any) -> float:
  """Relative estimate of the kernel mass at z beyond the basis degree.

  The increments of K(z) over the top two degree steps are extrapolated as
  a geometric series. Returns inf when they do not decay or the basis has
  fewer than two degree steps.
  """
  top = gs.basis.degree
  if top < 2:
    return math.inf
  values = [
      kernel_at(truncate_degree(gs, degree), z).value
      for degree in (top - 2, top - 1, top)
  ]
  last = values[2] - values[1]
  previous = values[1] - values[0]
  if last <= constants.MONOTONICITY_SLACK * values[2]:
    return 0.0
  if previous <= 0 or last >= previous:
    return math.inf
  ratio = last / previous
  return last * ratio / (1.0 - ratio) / values[2]


def _extremal_vector(
    gs: GramSystem, point: np.ndarray, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
  """Returns (u, residual) with u = conj(psi(z)) and the constrained maximizer.

  In whitened coordinates e the constraint f(z) = 0 reads u^H e = 0 and
  f'_X(z) = v^H e with v = conj(dpsi); the maximizer of |v^H e| on the unit
  sphere of u-orthogonal vectors is the normalized residual of v.
  """
  u = np.conj(gs.orthonormal(point)[0])
  v = np.conj(gs.orthonormal_derivatives(point, x)[0])
  residual = v - (np.vdot(u, v) / np.vdot(u, u).real) * u
  return u, residual


def m_extremal(gs: GramSystem, z: Any, x: Any) -> float:
  """sup |f'_X(z)| over f in the unit ball with f(z) = 0."""
  point = _interior_point(gs, z)
  x = np.asarray(x, dtype=complex).reshape(gs.basis.n)
  if not np.any(x):
    return 0.0
  _, residual = _extremal_vector(gs, point, x)
  return float(np.linalg.norm(residual))


def extremal_function(gs: GramSystem, z: Any, x: Any) -> np.ndarray:
  """Basis coefficients of the function attaining m_extremal."""
  point = _interior_point(gs, z)
  x = np.asarray(x, dtype=complex).reshape(gs.basis.n)
  _, residual = _extremal_vector(gs, point, x)
  return gs.coefficients(residual / np.linalg.norm(residual))


def metric_at(gs: GramSystem, z: Any, x: Any) -> float:
  """Bergman metric beta(z; X) = M(z; X) / sqrt(K(z))."""
  return m_extremal(gs, z, x) / math.sqrt(kernel_at(gs, z).value)


def metric_via_log_kernel(gs: GramSystem, z: Any, x: Any) -> float:
  """Square root of the Levi form of log K in direction X.

  With K = |psi|^2 the Levi form of log K is
  (K |d psi|^2 - |<psi, d psi>|^2) / K^2, evaluated from the analytic
  derivatives of the basis.
  """
  point = _interior_point(gs, z)
  x = np.asarray(x, dtype=complex).reshape(gs.basis.n)
  psi = gs.orthonormal(point)[0]
  dpsi = gs.orthonormal_derivatives(point, x)[0]
  kernel = float(np.vdot(psi, psi).real)
  ddbar = float(np.vdot(dpsi, dpsi).real)
  mixed = abs(np.vdot(psi, dpsi)) ** 2
  levi = (kernel * ddbar - mixed) / kernel**2
  return math.sqrt(max(levi, 0.0))


@dataclasses.dataclass(frozen=True)
class PointEvaluation:
  """K, M and beta of one system at one point for several directions."""

  kernel: float
  extremal: np.ndarray
  metric: np.ndarray
  unreliable: bool


def evaluate(gs: GramSystem, z: Any, directions: np.ndarray) -> PointEvaluation:
  """Evaluates K and, per direction, M and beta at one point."""
  point = _interior_point(gs, z)
  kernel = kernel_at(gs, point[0])
  extremal = np.array([m_extremal(gs, point[0], x) for x in directions])
  return PointEvaluation(
      kernel=kernel.value,
      extremal=extremal,
      metric=extremal / math.sqrt(kernel.value),
      unreliable=kernel.unreliable,
  )


def reproducing_coefficients(gs: GramSystem, w: Any) -> np.ndarray:
  """Basis coefficients of the finite-basis kernel function z -> K(z, w)."""
  point = _interior_point(gs, w)
  return gs.coefficients(np.conj(gs.orthonormal(point)[0]))


def degree_sweep(
    spec: domain.DomainSpec,
    region: domain.Region,
    z: Any,
    degrees: Sequence[int],
    quad_count: int,
    seed: int,
    *,
    center: Sequence[complex] = (),
    scale: float = 1.0,
    cache: gram_cache.GramCache | None = None,
    max_workers: int = 1,
) -> list[KernelValue]:
  """Kernel values at z over nested bases on one quadrature set.

  The Gram matrix is assembled once at the largest degree; lower degrees use
  its leading blocks, so the bases and their retained subspaces are nested.

  Raises:
    SweepOrderError: `degrees` is empty or not strictly increasing.
    QuadratureInconsistencyError: A kernel value decreased by more than the
      roundoff slack.
  """
  if not degrees or any(b <= a for a, b in zip(degrees, degrees[1:])):
    raise SweepOrderError(f'Degrees must increase strictly: {degrees}')
  top = MonomialBasis(spec.n, degrees[-1], tuple(center), scale)
  gs_top = assemble_gram(
      spec, region, top, quad_count, seed, cache=cache,
      max_workers=max_workers,
  )
  values = []
  converged_seen = False
  previous = None
  for degree in degrees:
    value = kernel_at(truncate_degree(gs_top, degree), z)
    converged = False
    if previous is not None:
      increment = (value.value - previous) / previous
      if increment < -constants.MONOTONICITY_SLACK:
        raise QuadratureInconsistencyError(
            f'Kernel decreased from {previous} to {value.value} at degree '
            f'{degree}.'
        )
      if not converged_seen and increment < constants.CONVERGENCE_TOLERANCE:
        converged = converged_seen = True
    values.append(dataclasses.replace(value, converged=converged))
    previous = value.value
  return values
