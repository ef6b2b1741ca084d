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

"""Strictly pseudoconvex test domains and their parametrized families.

A domain is given by a C2 defining function r on an axis-aligned validity box
U: the domain is {z in U: r(z) < 0}. The catalogue is closed:

  ball            r(z) = |z_1|^2 + ... + |z_n|^2 - 1
  ellipsoid       r(z) = a_1 |z_1|^2 + ... + a_n |z_n|^2 - 1,  a_j > 0
  perturbed_disc  r(z) = |z|^2 - 1 + tau * Re(z^m),  n = 1, |tau| m (m-1) < 2

Points of C^n are complex numpy arrays of shape (n,) or (N, n). Real
coordinates are ordered (Re z_1, Im z_1, ..., Re z_n, Im z_n) wherever a real
view is needed (boxes, grids, quadrature proposals).

Example usage:

```python
spec = domain.DomainSpec(kind=domain.DomainKind.ELLIPSOID, n=2,
                         weights=(1.0, 2.0))
quad = domain.sample_interior(spec, domain.Region.full(), 200_000, seed=7)
zetas = domain.boundary_points(spec, count=8, seed=11)
```
"""

from __future__ import annotations

import abc
from collections.abc import Sequence
import dataclasses
import enum
import logging
import math
from typing import Any

import immutabledict
import numpy as np
from scipy import ndimage
from scipy import optimize
from scipy.stats import qmc

from bergman_localize import constants
from bergman_localize import errors

# Error messages used in this module.
_OUTSIDE_BOX_MSG = 'Point lies outside the validity box'
_EMPTY_REGION_MSG = 'No quadrature point survived the region filter'
_PROJECTION_FAILURE_MSG = 'Newton projection onto the boundary did not converge'
_STEP_TOO_LARGE_MSG = 'Inward step does not end inside the domain'
_INCONCLUSIVE_MSG = 'No grid cell of the requested resolution lies in the cap'
_INCOMPATIBLE_MSG = 'Domains are not members of one family'

_BOX_CONTAINMENT_TOLERANCE = 1e-12
_RADIAL_ROOT_TOLERANCE = 1e-15


class Error(errors.Error):
  """Base error of the domain module."""


class InvalidDomainError(Error, errors.ConfigError):
  """Domain parameters are outside the admissible catalogue ranges."""


class DomainOfValidityError(Error, errors.NumericError):
  """A point lies outside the validity box U."""


class EmptyRegionError(Error, errors.NumericError):
  """A sampled region contains no quadrature point."""


class ProjectionFailureError(Error, errors.NumericError):
  """Newton projection onto the boundary did not converge."""


class StepTooLargeError(Error, errors.NumericError):
  """An inward ray step left the domain."""


class InconclusiveError(Error, errors.NumericError):
  """A connectivity grid contains no cell of the cap."""


class IncompatibleFamilyError(Error, errors.ConfigError):
  """Two domains cannot be compared as members of one family."""


@enum.unique
class DomainKind(enum.Enum):
  """The closed catalogue of defining-function families."""

  BALL = 'ball'
  ELLIPSOID = 'ellipsoid'
  PERTURBED_DISC = 'perturbed_disc'


Box = tuple[tuple[float, float], ...]


@dataclasses.dataclass(frozen=True)
class DomainSpec:
  """A strictly pseudoconvex domain {z in U: r(z) < 0}.

  Attributes:
    kind: The defining-function family.
    n: The complex dimension.
    t: The family parameter this member was built for.
    weights: The ellipsoid weights a_j. Filled with ones for the ball.
    tau: The perturbation size of a perturbed disc.
    m: The perturbation order of a perturbed disc.
    box: The validity box U as 2n (min, max) pairs in real coordinate order.
      Defaults to the closure's bounding box enlarged by 5 %.
  """

  kind: DomainKind
  n: int
  t: float = 0.0
  weights: tuple[float, ...] = ()
  tau: float = 0.0
  m: int = 2
  box: Box = ()

  def __post_init__(self):
    if self.n < 1:
      raise InvalidDomainError(f'Dimension must be at least 1, got {self.n}.')
    if self.kind is DomainKind.BALL:
      if self.weights and any(a != 1.0 for a in self.weights):
        raise InvalidDomainError('The ball takes no weights.')
      object.__setattr__(self, 'weights', (1.0,) * self.n)
    elif self.kind is DomainKind.ELLIPSOID:
      if len(self.weights) != self.n or any(a <= 0 for a in self.weights):
        raise InvalidDomainError(
            f'Ellipsoid needs {self.n} positive weights, got {self.weights}.'
        )
      object.__setattr__(self, 'weights', tuple(float(a) for a in self.weights))
    else:
      if self.n != 1:
        raise InvalidDomainError('Perturbed discs are planar (n = 1).')
      if int(self.m) != self.m or self.m < 2:
        raise InvalidDomainError(f'Perturbation order m={self.m} must be >= 2.')
      if abs(self.tau) * self.m * (self.m - 1) >= 2:
        raise InvalidDomainError(
            f'|tau| m (m-1) must stay below 2, got tau={self.tau}, m={self.m}.'
        )
    closure = _closure_half_widths(self)
    if not self.box:
      half = (1.0 + constants.BOX_MARGIN) * closure
      object.__setattr__(
          self, 'box', tuple((-float(h), float(h)) for h in half)
      )
    else:
      box = tuple((float(lo), float(hi)) for lo, hi in self.box)
      if len(box) != 2 * self.n or any(lo >= hi for lo, hi in box):
        raise InvalidDomainError(f'Invalid box {self.box} for n={self.n}.')
      for (lo, hi), h in zip(box, closure):
        if lo > -h or hi < h:
          raise InvalidDomainError(
              f'Box {box} does not contain the closure of the domain.'
          )
      object.__setattr__(self, 'box', box)
    if self.kind is DomainKind.PERTURBED_DISC and self.m > 2 and self.tau:
      corner = math.hypot(*(max(abs(lo), abs(hi)) for lo, hi in self.box))
      if corner >= _perturbed_disc_peak_radius(self):
        raise InvalidDomainError(
            'Box reaches the far region where r < 0 again; shrink the box.'
        )

  @property
  def lower(self) -> np.ndarray:
    return np.array([lo for lo, _ in self.box])

  @property
  def upper(self) -> np.ndarray:
    return np.array([hi for _, hi in self.box])

  @property
  def box_volume(self) -> float:
    return float(np.prod(self.upper - self.lower))

  def to_dict(self) -> dict[str, Any]:
    """Returns a JSON-compatible description used for hashing and output."""
    return {
        'kind': self.kind.value,
        'n': self.n,
        't': float(self.t),
        'weights': list(self.weights),
        'tau': float(self.tau),
        'm': int(self.m),
        'box': [list(pair) for pair in self.box],
    }


@dataclasses.dataclass(frozen=True)
class DomainFamily:
  """A one-parameter family of domains over [t_min, t_max] with shared box.

  Ellipsoid families vary the last weight (a_n = t), perturbed-disc families
  vary tau = t, and the ball family has a single member.
  """

  kind: DomainKind
  n: int
  t_min: float
  t_max: float
  weights: tuple[float, ...] = ()
  m: int = 2
  box: Box = ()

  def __post_init__(self):
    if self.t_min > self.t_max:
      raise InvalidDomainError(
          f'Empty parameter interval [{self.t_min}, {self.t_max}].'
      )
    if not self.box:
      extremes = [self._build(self.t_min), self._build(self.t_max)]
      half = np.max([s.upper for s in extremes], axis=0)
      object.__setattr__(
          self, 'box', tuple((-float(h), float(h)) for h in half)
      )

  def _build(self, t: float, box: Box = ()) -> DomainSpec:
    if self.kind is DomainKind.BALL:
      return DomainSpec(kind=self.kind, n=self.n, t=t, box=box)
    if self.kind is DomainKind.ELLIPSOID:
      leading = tuple(self.weights[: self.n - 1])
      leading += (1.0,) * (self.n - 1 - len(leading))
      weights = leading + (float(t),)
      return DomainSpec(
          kind=self.kind, n=self.n, t=t, weights=weights, box=box
      )
    return DomainSpec(kind=self.kind, n=1, t=t, tau=t, m=self.m, box=box)

  def member(self, t: float) -> DomainSpec:
    """Returns the member for parameter t on the shared box."""
    if not self.t_min - 1e-12 <= t <= self.t_max + 1e-12:
      raise InvalidDomainError(
          f'Parameter {t} outside [{self.t_min}, {self.t_max}].'
      )
    return self._build(t, self.box)

  @staticmethod
  def distance(s: float, t: float) -> float:
    """The parameter metric d(s, t) = |s - t|."""
    return abs(s - t)


@dataclasses.dataclass(frozen=True, eq=False)
class BoundaryPoint:
  """A point zeta on the boundary of the member with parameter t."""

  zeta: np.ndarray
  t: float
  grad_norm: float

  def to_list(self) -> list[list[float]]:
    return [[float(c.real), float(c.imag)] for c in self.zeta]


@dataclasses.dataclass(frozen=True)
class Region:
  """The full domain (radius None) or a cap G ∩ B(center, radius)."""

  center: tuple[complex, ...] | None = None
  radius: float | None = None

  @classmethod
  def full(cls) -> Region:
    return cls()

  @classmethod
  def cap(cls, center: Any, radius: float) -> Region:
    if isinstance(center, BoundaryPoint):
      center = center.zeta
    return cls(tuple(complex(c) for c in np.ravel(center)), float(radius))

  @property
  def is_cap(self) -> bool:
    return self.radius is not None

  def contains(self, points: np.ndarray) -> np.ndarray:
    """Returns the ball-predicate mask (all True for the full domain)."""
    if not self.is_cap:
      return np.ones(points.shape[0], dtype=bool)
    offsets = points - np.asarray(self.center)
    return np.linalg.norm(offsets, axis=1) < self.radius

  def to_dict(self) -> dict[str, Any]:
    if not self.is_cap:
      return {'kind': 'full'}
    return {
        'kind': 'cap',
        'center': [[c.real, c.imag] for c in self.center],
        'radius': self.radius,
    }


@dataclasses.dataclass(frozen=True, eq=False)
class QuadratureSet:
  """Equal-weight quadrature points of a region.

  Attributes:
    points: (N, n) complex nodes.
    indices: Positions of the nodes in the proposal sequence; caps filtered
      from the same proposals have index sets nested in the parent's.
    weight: The common cell weight, box volume / proposal count.
    proposal_count: Number of proposals drawn in the box.
    seed: The proposal seed.
    box_volume: Volume of the proposal box.
  """

  points: np.ndarray
  indices: np.ndarray
  weight: float
  proposal_count: int
  seed: int
  box_volume: float

  @property
  def count(self) -> int:
    return int(self.points.shape[0])

  @property
  def total_weight(self) -> float:
    return self.weight * self.count

  @property
  def mesh_scale(self) -> float:
    """Side of the cube with the volume of one quadrature cell."""
    dim = 2 * self.points.shape[1]
    return (self.box_volume / self.proposal_count) ** (1.0 / dim)

  def restrict(self, mask: np.ndarray) -> QuadratureSet:
    """Returns the subset selected by a boolean mask."""
    return dataclasses.replace(
        self, points=self.points[mask], indices=self.indices[mask]
    )

  def is_subset_of(self, other: QuadratureSet) -> bool:
    """Whether these nodes are a subset of `other`'s with equal weights."""
    return (
        self.seed == other.seed
        and self.proposal_count == other.proposal_count
        and self.weight == other.weight
        and bool(np.isin(self.indices, other.indices).all())
    )


class _DefiningFunction(abc.ABC):
  """Analytic jets of one defining-function family."""

  @abc.abstractmethod
  def value(self, spec: DomainSpec, z: np.ndarray) -> np.ndarray:
    """r(z), shape (N,)."""

  @abc.abstractmethod
  def dbar(self, spec: DomainSpec, z: np.ndarray) -> np.ndarray:
    """(dr/dzbar_1, ..., dr/dzbar_n), shape (N, n)."""

  @abc.abstractmethod
  def levi_matrix(self, spec: DomainSpec, z: np.ndarray) -> np.ndarray:
    """d2r/dz_j dzbar_k, shape (N, n, n)."""

  @abc.abstractmethod
  def holomorphic_hessian(self, spec: DomainSpec, z: np.ndarray) -> np.ndarray:
    """d2r/dz_j dz_k, shape (N, n, n)."""


class _Quadric(_DefiningFunction):
  """Ball and diagonal ellipsoids."""

  def value(self, spec, z):
    return np.abs(z) ** 2 @ np.asarray(spec.weights) - 1.0

  def dbar(self, spec, z):
    return z * np.asarray(spec.weights)

  def levi_matrix(self, spec, z):
    return np.broadcast_to(
        np.diag(np.asarray(spec.weights, dtype=complex)),
        (z.shape[0], spec.n, spec.n),
    )

  def holomorphic_hessian(self, spec, z):
    return np.zeros((z.shape[0], spec.n, spec.n), dtype=complex)


class _PerturbedDisc(_DefiningFunction):
  """r(z) = |z|^2 - 1 + tau Re(z^m) in one variable."""

  def value(self, spec, z):
    w = z[:, 0]
    return np.abs(w) ** 2 - 1.0 + spec.tau * np.real(w**spec.m)

  def dbar(self, spec, z):
    w = z[:, 0]
    return (w + 0.5 * spec.tau * spec.m * np.conj(w) ** (spec.m - 1))[:, None]

  def levi_matrix(self, spec, z):
    return np.ones((z.shape[0], 1, 1), dtype=complex)

  def holomorphic_hessian(self, spec, z):
    w = z[:, 0]
    coeff = 0.5 * spec.tau * spec.m * (spec.m - 1)
    return (coeff * w ** (spec.m - 2))[:, None, None].astype(complex)


# The defining-function implementation of each catalogue kind.
DEFINING_FUNCTIONS = immutabledict.immutabledict({
    DomainKind.BALL: _Quadric(),
    DomainKind.ELLIPSOID: _Quadric(),
    DomainKind.PERTURBED_DISC: _PerturbedDisc(),
})


def _perturbed_disc_peak_radius(spec: DomainSpec) -> float:
  """Radius where |z|^2 - |tau| |z|^m is maximal (inf when unperturbed)."""
  if spec.m == 2 or not spec.tau:
    return math.inf
  return (2.0 / (abs(spec.tau) * spec.m)) ** (1.0 / (spec.m - 2))


def _closure_half_widths(spec: DomainSpec) -> np.ndarray:
  """Half widths of a box centered at 0 that contains the closure."""
  if spec.kind is not DomainKind.PERTURBED_DISC:
    radii = 1.0 / np.sqrt(np.asarray(spec.weights))
    return np.repeat(radii, 2)
  if spec.m == 2:
    # (1 + tau) x^2 + (1 - tau) y^2 < 1
    return np.array([1.0 / math.sqrt(1 + spec.tau),
                     1.0 / math.sqrt(1 - spec.tau)])
  if not spec.tau:
    return np.ones(2)
  peak = _perturbed_disc_peak_radius(spec)
  outer = optimize.brentq(
      lambda rho: rho**2 - abs(spec.tau) * rho**spec.m - 1.0, 1.0, peak
  )
  return np.full(2, outer)


def _as_points(spec: DomainSpec, z: Any) -> tuple[np.ndarray, bool]:
  """Returns (N, n) complex points and whether a single point was given."""
  points = np.asarray(z, dtype=complex)
  single = points.ndim == 0 or (points.ndim == 1 and points.size == spec.n)
  if points.ndim <= 1:
    points = points.reshape(-1, spec.n)
  if points.shape[1] != spec.n:
    raise DomainOfValidityError(
        f'Expected points in C^{spec.n}, got shape {np.shape(z)}.'
    )
  return points, single


def to_real(points: np.ndarray) -> np.ndarray:
  """(N, n) complex -> (N, 2n) real in (Re z_1, Im z_1, ...) order."""
  real = np.empty((points.shape[0], 2 * points.shape[1]))
  real[:, 0::2] = points.real
  real[:, 1::2] = points.imag
  return real


def to_complex(real: np.ndarray) -> np.ndarray:
  """(N, 2n) real -> (N, n) complex."""
  return real[:, 0::2] + 1j * real[:, 1::2]


def in_box(spec: DomainSpec, points: np.ndarray) -> np.ndarray:
  real = to_real(points)
  tol = _BOX_CONTAINMENT_TOLERANCE
  return np.all(
      (real >= spec.lower - tol) & (real <= spec.upper + tol), axis=1
  )


def _check_box(spec: DomainSpec, points: np.ndarray) -> None:
  inside = in_box(spec, points)
  if not inside.all():
    witness = points[np.argmin(inside)]
    raise DomainOfValidityError(f'{_OUTSIDE_BOX_MSG}: {witness}')


def _impl(spec: DomainSpec) -> _DefiningFunction:
  return DEFINING_FUNCTIONS[spec.kind]


def eval_r(spec: DomainSpec, z: Any) -> float | np.ndarray:
  """Evaluates the defining function.

  Args:
    spec: The domain.
    z: A point of C^n or an (N, n) array of points.

  Returns:
    r(z), a float for a single point or an (N,) array.

  Raises:
    DomainOfValidityError: A point lies outside the validity box.
  """
  points, single = _as_points(spec, z)
  _check_box(spec, points)
  values = _impl(spec).value(spec, points)
  return float(values[0]) if single else values


def grad_r(spec: DomainSpec, z: Any) -> np.ndarray:
  """Returns (dr/dzbar_1, ..., dr/dzbar_n) computed analytically."""
  points, single = _as_points(spec, z)
  _check_box(spec, points)
  grads = _impl(spec).dbar(spec, points)
  return grads[0] if single else grads


def levi_matrix(spec: DomainSpec, z: Any) -> np.ndarray:
  """Returns the complex Hessian d2r/dz_j dzbar_k."""
  points, single = _as_points(spec, z)
  _check_box(spec, points)
  matrices = np.asarray(_impl(spec).levi_matrix(spec, points))
  return matrices[0] if single else matrices


def holomorphic_hessian(spec: DomainSpec, z: Any) -> np.ndarray:
  """Returns d2r/dz_j dz_k."""
  points, single = _as_points(spec, z)
  _check_box(spec, points)
  matrices = _impl(spec).holomorphic_hessian(spec, points)
  return matrices[0] if single else matrices


def levi_form(spec: DomainSpec, z: Any, x: Any) -> float | np.ndarray:
  """Evaluates L_r(z; X) = sum_jk d2r/dz_j dzbar_k (z) X_j conj(X_k).

  Args:
    spec: The domain.
    z: A point or (N, n) points.
    x: A direction of C^n, or (N, n) directions paired with the points.

  Returns:
    The real Levi form value(s).
  """
  points, single = _as_points(spec, z)
  directions = np.broadcast_to(np.asarray(x, dtype=complex), points.shape)
  matrices = levi_matrix(spec, points)
  values = np.einsum(
      'njk,nj,nk->n', matrices, directions, np.conj(directions)
  ).real
  return float(values[0]) if single else values


def real_jet(
    spec: DomainSpec, z: Any
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
  """Returns r, its real gradient and real Hessian at (N, n) points.

  Real partials are assembled from the complex ones with
  d/dx = d/dz + d/dzbar and d/dy = i (d/dz - d/dzbar).
  """
  points, _ = _as_points(spec, z)
  impl = _impl(spec)
  value = eval_r(spec, points)
  value = np.atleast_1d(value)
  dz = np.conj(impl.dbar(spec, points))
  hol = impl.holomorphic_hessian(spec, points)
  levi = np.asarray(impl.levi_matrix(spec, points))
  count, n = points.shape
  grad = np.empty((count, 2 * n))
  grad[:, 0::2] = 2 * dz.real
  grad[:, 1::2] = -2 * dz.imag
  hess = np.empty((count, 2 * n, 2 * n))
  hess[:, 0::2, 0::2] = 2 * hol.real + 2 * levi.real
  hess[:, 1::2, 1::2] = -2 * hol.real + 2 * levi.real
  xy = -2 * hol.imag + 2 * levi.imag
  hess[:, 0::2, 1::2] = xy
  hess[:, 1::2, 0::2] = np.swapaxes(xy, 1, 2)
  return value, grad, hess


def outward_normal(spec: DomainSpec, zeta: Any) -> np.ndarray:
  """Unit outward normal at a boundary point, packed as a complex vector."""
  if isinstance(zeta, BoundaryPoint):
    zeta = zeta.zeta
  g = np.asarray(grad_r(spec, np.asarray(zeta, dtype=complex)))
  return g / np.linalg.norm(g)


def boundary_distance(
    spec: DomainSpec, z: Any, region: Region | None = None
) -> np.ndarray:
  """First-order distance estimate |r| / |grad_R r| to the region boundary.

  For caps the distance to the sphere of the cap is also taken into account.
  """
  points, _ = _as_points(spec, z)
  r = np.atleast_1d(eval_r(spec, points))
  g = 2 * np.linalg.norm(_impl(spec).dbar(spec, points), axis=1)
  dist = np.abs(r) / g
  if region is not None and region.is_cap:
    to_sphere = region.radius - np.linalg.norm(
        points - np.asarray(region.center), axis=1
    )
    dist = np.minimum(dist, np.abs(to_sphere))
  return dist


def proposal_points(spec: DomainSpec, count: int, seed: int) -> np.ndarray:
  """Seeded scrambled Halton proposals in the validity box, (count, n)."""
  return _halton_points(spec.lower, spec.upper, count, seed)


def _halton_points(
    lower: np.ndarray, upper: np.ndarray, count: int, seed: int
) -> np.ndarray:
  sampler = qmc.Halton(
      d=lower.size, scramble=True, seed=np.random.default_rng(seed)
  )
  unit = sampler.random(count)
  return to_complex(qmc.scale(unit, lower, upper))


def sample_interior(
    spec: DomainSpec, region: Region, count: int, seed: int
) -> QuadratureSet:
  """Samples the interior of a region with equal-weight quadrature nodes.

  Proposals are a seeded low-discrepancy sequence in the box U; the nodes are
  the proposals with r < 0 (and within the ball for caps). The weight of each
  node is box volume / count, so caps drawn with the same count and seed are
  exact subsets of the full-domain nodes.

  Args:
    spec: The domain.
    region: The full domain or a cap.
    count: Number of proposals.
    seed: The proposal seed.

  Returns:
    The quadrature set.

  Raises:
    EmptyRegionError: No proposal falls in the region.
  """
  proposals = proposal_points(spec, count, seed)
  mask = _impl(spec).value(spec, proposals) < 0
  if region.is_cap:
    mask &= region.contains(proposals)
  if not mask.any():
    raise EmptyRegionError(f'{_EMPTY_REGION_MSG}: {region.to_dict()}')
  indices = np.flatnonzero(mask)
  logging.debug(
      'Sampled %d of %d proposals in %s.', indices.size, count,
      region.to_dict()['kind'],
  )
  return QuadratureSet(
      points=proposals[indices],
      indices=indices,
      weight=spec.box_volume / count,
      proposal_count=count,
      seed=seed,
      box_volume=spec.box_volume,
  )


def sample_ball(
    spec: DomainSpec, center: Any, radius: float, count: int, seed: int
) -> QuadratureSet:
  """Samples B(center, radius) ∩ closure(G) with its own proposal box.

  The local proposal box is the intersection of U with the bounding box of
  the ball, which keeps samples dense near boundary points.
  """
  if isinstance(center, BoundaryPoint):
    center = center.zeta
  center = np.asarray(center, dtype=complex).reshape(spec.n)
  mid = to_real(center[None, :])[0]
  lower = np.maximum(spec.lower, mid - radius)
  upper = np.minimum(spec.upper, mid + radius)
  if radius <= 0 or np.any(lower >= upper):
    raise EmptyRegionError(f'{_EMPTY_REGION_MSG}: ball of radius {radius}')
  proposals = _halton_points(lower, upper, count, seed)
  mask = (_impl(spec).value(spec, proposals) <= 0) & (
      np.linalg.norm(proposals - center, axis=1) <= radius
  )
  if not mask.any():
    raise EmptyRegionError(f'{_EMPTY_REGION_MSG}: ball of radius {radius}')
  volume = float(np.prod(upper - lower))
  indices = np.flatnonzero(mask)
  return QuadratureSet(
      points=proposals[indices],
      indices=indices,
      weight=volume / count,
      proposal_count=count,
      seed=seed,
      box_volume=volume,
  )


def project_to_boundary(
    spec: DomainSpec, z0: Any, t: float | None = None
) -> BoundaryPoint:
  """Projects a point onto {r = 0} by Newton steps along the real gradient.

  Args:
    spec: The domain.
    z0: The starting point, ideally near the boundary.
    t: The owning parameter recorded in the result; defaults to spec.t.

  Returns:
    The boundary point.

  Raises:
    ProjectionFailureError: |r| stays above the boundary tolerance after the
      maximum number of iterations, or the iteration leaves the box.
  """
  z = np.asarray(z0, dtype=complex).reshape(spec.n).copy()
  impl = _impl(spec)
  for _ in range(constants.NEWTON_MAX_ITERATIONS + 1):
    if not in_box(spec, z[None, :])[0]:
      break
    r = impl.value(spec, z[None, :])[0]
    grad = 2 * impl.dbar(spec, z[None, :])[0]
    norm2 = float(np.vdot(grad, grad).real)
    if abs(r) <= constants.BOUNDARY_TOLERANCE and norm2 > 0:
      return BoundaryPoint(
          zeta=z,
          t=spec.t if t is None else t,
          grad_norm=math.sqrt(norm2) / 2,
      )
    if norm2 == 0:
      break
    z = z - r * grad / norm2
  raise ProjectionFailureError(f'{_PROJECTION_FAILURE_MSG}: start {z0}')


def _radial_seed(spec: DomainSpec, direction: np.ndarray) -> np.ndarray:
  """Brackets the boundary crossing along a ray from the origin."""
  real = to_real(direction[None, :])[0]
  with np.errstate(divide='ignore'):
    limits = np.where(real > 0, spec.upper / real,
                      np.where(real < 0, spec.lower / real, np.inf))
  s_max = float(np.min(limits))
  impl = _impl(spec)

  def along(s):
    return impl.value(spec, (s * direction)[None, :])[0]

  s = optimize.brentq(along, 0.0, s_max, xtol=_RADIAL_ROOT_TOLERANCE)
  return s * direction


def boundary_points(
    spec: DomainSpec, count: int, seed: int
) -> list[BoundaryPoint]:
  """Returns `count` seeded boundary points.

  Seeds are random directions; each is bracketed radially and then polished
  by Newton projection. Seeds whose projection fails are skipped and
  reported in the log.

  Raises:
    ProjectionFailureError: Fewer than `count` seeds could be projected.
  """
  rng = np.random.default_rng(seed)
  points = []
  failures = 0
  for _ in range(count * constants.BOUNDARY_MAX_ATTEMPTS_FACTOR):
    if len(points) == count:
      break
    raw = rng.standard_normal(2 * spec.n)
    direction = to_complex(raw[None, :])[0]
    direction /= np.linalg.norm(direction)
    try:
      points.append(project_to_boundary(spec, _radial_seed(spec, direction)))
    except (ProjectionFailureError, ValueError) as e:
      failures += 1
      logging.warning('Skipping boundary seed %s: %s', direction, e)
  if failures:
    logging.warning('%d boundary seeds failed to project.', failures)
  if len(points) < count:
    raise ProjectionFailureError(
        f'{_PROJECTION_FAILURE_MSG}: only {len(points)} of {count} points.'
    )
  return points


def inward_ray(spec: DomainSpec, zeta: BoundaryPoint, s: float) -> np.ndarray:
  """Returns zeta - s * nu with nu the unit outward normal at zeta.

  Raises:
    StepTooLargeError: The returned point is not interior.
  """
  z = zeta.zeta - s * outward_normal(spec, zeta)
  if s <= 0 or not in_box(spec, z[None, :])[0] or eval_r(spec, z) >= 0:
    raise StepTooLargeError(f'{_STEP_TOO_LARGE_MSG}: s={s}')
  return z


def cap_connected(
    spec: DomainSpec,
    zeta: Any,
    radius: float,
    resolution: int = constants.CONNECTIVITY_RESOLUTION,
) -> bool:
  """Decides whether {r < 0} ∩ B(zeta, R) is connected on a cell grid.

  The bounding box of the cap is split into `resolution` cells per real axis;
  cells whose center lies in the cap are flood-filled with full
  (corner-touching) connectivity.

  Raises:
    InconclusiveError: No cell center lies in the cap.
  """
  if isinstance(zeta, BoundaryPoint):
    zeta = zeta.zeta
  center = np.asarray(zeta, dtype=complex).reshape(spec.n)
  mid = to_real(center[None, :])[0]
  lower = np.maximum(spec.lower, mid - radius)
  upper = np.minimum(spec.upper, mid + radius)
  if radius <= 0 or np.any(lower >= upper):
    raise InconclusiveError(f'{_INCONCLUSIVE_MSG}: R={radius}')
  axes = [
      lo + (np.arange(resolution) + 0.5) * (hi - lo) / resolution
      for lo, hi in zip(lower, upper)
  ]
  impl = _impl(spec)
  mask = np.zeros((resolution,) * (2 * spec.n), dtype=bool)
  rest = np.stack(np.meshgrid(*axes[1:], indexing='ij'), axis=-1).reshape(
      -1, 2 * spec.n - 1
  )
  for i, first in enumerate(axes[0]):
    real = np.column_stack([np.full(rest.shape[0], first), rest])
    points = to_complex(real)
    inside = (impl.value(spec, points) < 0) & (
        np.linalg.norm(points - center, axis=1) < radius
    )
    mask[i] = inside.reshape((resolution,) * (2 * spec.n - 1))
  if not mask.any():
    raise InconclusiveError(f'{_INCONCLUSIVE_MSG}: R={radius}')
  structure = ndimage.generate_binary_structure(mask.ndim, mask.ndim)
  _, components = ndimage.label(mask, structure=structure)
  logging.debug(
      'Cap of radius %s at %s has %d component(s).', radius, center,
      components,
  )
  return components == 1


def uniform_connected_radius(
    members: Sequence[tuple[DomainSpec, Sequence[BoundaryPoint]]],
    candidates: Sequence[float],
    resolution: int = constants.CONNECTIVITY_RESOLUTION,
) -> float:
  """Largest candidate R whose caps are connected at every sampled pair.

  Args:
    members: (spec, boundary points) for each sampled family member.
    candidates: Candidate cap radii.
    resolution: Connectivity grid resolution.

  Returns:
    The largest qualifying radius, or 0.0 when none qualifies.
  """
  for radius in sorted(candidates, reverse=True):
    try:
      if all(
          cap_connected(spec, zeta, radius, resolution)
          for spec, zetas in members
          for zeta in zetas
      ):
        return float(radius)
    except InconclusiveError as e:
      logging.warning('Radius %s is inconclusive: %s', radius, e)
  return 0.0


def c2_distance(spec_s: DomainSpec, spec_t: DomainSpec, grid: int = 9) -> float:
  """Discretized C2(U) distance between two family members.

  The norm is the maximum of the sup-norms over a tensor grid of U of the
  function difference, of all first real partial differences and of all
  second real partial differences. The grid includes the box corners.

  Raises:
    IncompatibleFamilyError: The kinds, dimensions or boxes differ.
  """
  if (
      spec_s.kind is not spec_t.kind
      or spec_s.n != spec_t.n
      or spec_s.box != spec_t.box
  ):
    raise IncompatibleFamilyError(
        f'{_INCOMPATIBLE_MSG}: {spec_s.kind.value}/{spec_t.kind.value}'
    )
  axes = [np.linspace(lo, hi, grid) for lo, hi in spec_s.box]
  real = np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1).reshape(
      -1, 2 * spec_s.n
  )
  points = to_complex(real)
  distance = 0.0
  for start in range(0, points.shape[0], constants.GRAM_CHUNK_SIZE):
    chunk = points[start:start + constants.GRAM_CHUNK_SIZE]
    jets_s = real_jet(spec_s, chunk)
    jets_t = real_jet(spec_t, chunk)
    for a, b in zip(jets_s, jets_t):
      distance = max(distance, float(np.max(np.abs(a - b))))
  return distance
