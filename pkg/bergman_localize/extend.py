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

"""Extension of holomorphic functions from caps with jet interpolation.

A function f on a cap G ∩ B(zeta, R) is extended to f_hat on G with

  (A) the 1-jet of f_hat at w equal to the 1-jet of f,
  (B) |f_hat|_{L2(G)} <= L |f|_{L2(cap R)},
  (C) |f_hat - f|_{L2(cap rho)} < eps |f|_{L2(cap R)}.

Two solvers are provided. The variational solver works in any dimension: it
minimizes |f_hat - f|^2 on the inner cap plus mu |f_hat|^2 on G over the
finite basis under the jet constraints. The constructive solver (planar only)
follows the dbar-correction scheme

  alpha_k = h^k dbar(chi) f,   v_k = T alpha_k - P T alpha_k,
  f_k = chi f - h^{-k} v_k,    f_hat_k = f_k + p,

with T a regularized discrete Cauchy transform, P the projection onto the
finite Bergman space and p the affine 1-jet correction at w.
"""

from __future__ import annotations

import abc
from collections.abc import Sequence
import dataclasses
import logging
import math
from typing import Any

from mobly import logger as mobly_logger
import numpy as np
from scipy import linalg

from bergman_localize import bergman
from bergman_localize import constants
from bergman_localize import domain
from bergman_localize import errors
from bergman_localize import gram_cache
from bergman_localize import peak
from bergman_localize.lib import utils

# Error messages used in this module.
_CONSTRAINT_FAILURE_MSG = 'Jet constraints are rank deficient at w'
_NODE_COLLISION_MSG = 'Evaluation point coincides with a quadrature node'
_NO_DECAY_MSG = 'Local error stopped decaying'
_PLANAR_ONLY_MSG = 'The constructive solver is planar (n = 1)'

_SERIES_THRESHOLD = 1e-2
_NEAR_FIELD_BANDWIDTHS = 3.0


class Error(errors.Error):
  """Base error of the extend module."""


class ConstraintFailureError(Error, errors.NumericError):
  """The 1-jet constraint system is rank deficient."""


class InvalidInputError(Error, errors.ConfigError):
  """The extension problem or solver input is invalid."""


class NodeCollisionError(Error, errors.NumericError):
  """A Cauchy transform was requested at a quadrature node."""


class NoDecayError(Error, errors.NumericError):
  """The constructive local error stagnated."""

  def __init__(self, message: str, trace: ConstructiveTrace):
    super().__init__(message)
    self.trace = trace


class InputFunction(abc.ABC):
  """A holomorphic function on (a neighborhood of) the cap."""

  @abc.abstractmethod
  def values(self, z: np.ndarray) -> np.ndarray:
    """Values at (N, n) points, shape (N,)."""

  @abc.abstractmethod
  def gradient(self, z: np.ndarray) -> np.ndarray:
    """Complex partials d/dz_j at (N, n) points, shape (N, n)."""

  @abc.abstractmethod
  def to_dict(self) -> dict[str, Any]:
    """JSON description."""


@dataclasses.dataclass(frozen=True, eq=False)
class PoleFunction(InputFunction):
  """z -> 1 / <z - q, nu>, which is 1 / (z - q) in the plane with nu = 1."""

  pole: np.ndarray
  normal: np.ndarray

  def _linear(self, z: np.ndarray) -> np.ndarray:
    return (np.atleast_2d(z) - self.pole) @ np.conj(self.normal)

  def values(self, z):
    return 1.0 / self._linear(z)

  def gradient(self, z):
    linear = self._linear(z)
    return -np.conj(self.normal)[None, :] / (linear**2)[:, None]

  def to_dict(self):
    return {
        'kind': 'pole',
        'pole': [[float(c.real), float(c.imag)] for c in self.pole],
    }


@dataclasses.dataclass(frozen=True, eq=False)
class PolynomialFunction(InputFunction):
  """A coefficient vector over a monomial basis."""

  basis: bergman.MonomialBasis
  coefficients: np.ndarray

  def values(self, z):
    return self.basis.evaluate(self.coefficients, np.atleast_2d(z))

  def gradient(self, z):
    return self.basis.evaluate_gradient(self.coefficients, np.atleast_2d(z))

  def to_dict(self):
    return {'kind': 'polynomial', 'basis': self.basis.to_dict()}


def constant_function(n: int, value: complex = 1.0) -> PolynomialFunction:
  return PolynomialFunction(
      bergman.MonomialBasis(n, 0), np.array([value], dtype=complex)
  )


@dataclasses.dataclass(frozen=True, eq=False)
class ExtensionProblem:
  """Extend f from G ∩ B(zeta, radius) keeping its 1-jet at w.

  Attributes:
    spec: The domain.
    zeta: The boundary point the caps are centered at.
    radius: The outer cap radius R.
    inner_radius: The inner cap radius rho < R.
    f: The input function.
    w: The jet point, interior to G ∩ B(zeta, rho).
  """

  spec: domain.DomainSpec
  zeta: domain.BoundaryPoint
  radius: float
  inner_radius: float
  f: InputFunction
  w: np.ndarray

  def __post_init__(self):
    if not 0 < self.inner_radius < self.radius:
      raise InvalidInputError(
          f'Need 0 < rho < R, got rho={self.inner_radius} R={self.radius}.'
      )
    w = np.asarray(self.w, dtype=complex).reshape(self.spec.n)
    object.__setattr__(self, 'w', w)
    inside = domain.in_box(self.spec, w[None, :])[0]
    if not inside or domain.eval_r(self.spec, w) >= 0:
      raise InvalidInputError(f'w={w} is not interior to the domain.')
    if np.linalg.norm(w - self.zeta.zeta) >= self.inner_radius:
      raise InvalidInputError(
          f'w={w} is not in B(zeta, {self.inner_radius}).'
      )
    if isinstance(self.f, PoleFunction):
      q = self.f.pole[None, :]
      if (
          domain.in_box(self.spec, q)[0]
          and domain.eval_r(self.spec, q[0]) <= 0
      ):
        raise InvalidInputError(
            f'Pole {self.f.pole} lies in the closure of the domain.'
        )

  def to_dict(self) -> dict[str, Any]:
    return {
        't': float(self.spec.t),
        'zeta': self.zeta.to_list(),
        'radius': self.radius,
        'inner_radius': self.inner_radius,
        'w': [[float(c.real), float(c.imag)] for c in self.w],
        'f': self.f.to_dict(),
    }


def pole_problem(
    spec: domain.DomainSpec,
    zeta: domain.BoundaryPoint,
    radius: float,
    inner_radius: float,
    delta: float,
    w_offset: float,
) -> ExtensionProblem:
  """Pole input q = zeta + delta nu with w = zeta - w_offset nu."""
  normal = domain.outward_normal(spec, zeta)
  return ExtensionProblem(
      spec=spec,
      zeta=zeta,
      radius=radius,
      inner_radius=inner_radius,
      f=PoleFunction(pole=zeta.zeta + delta * normal, normal=normal),
      w=domain.inward_ray(spec, zeta, w_offset),
  )


@dataclasses.dataclass(frozen=True, eq=False)
class ExtensionSystems:
  """Gram systems of G, of the outer cap and of the inner cap."""

  full: bergman.GramSystem
  cap: bergman.GramSystem
  inner: bergman.GramSystem


def extension_systems(
    prob: ExtensionProblem,
    degree: int,
    quad_count: int,
    seed: int,
    *,
    cache: gram_cache.GramCache | None = None,
    max_workers: int = 1,
) -> ExtensionSystems:
  """Assembles the three systems on one basis and nested quadrature."""
  basis = bergman.MonomialBasis(prob.spec.n, degree)
  regions = (
      domain.Region.full(),
      domain.Region.cap(prob.zeta, prob.radius),
      domain.Region.cap(prob.zeta, prob.inner_radius),
  )
  full, cap, inner = (
      bergman.assemble_gram(
          prob.spec, region, basis, quad_count, seed, cache=cache,
          max_workers=max_workers,
      )
      for region in regions
  )
  return ExtensionSystems(full=full, cap=cap, inner=inner)


@dataclasses.dataclass(frozen=True)
class ConstructiveTrace:
  """Per-step record of a constructive extension run.

  Attributes:
    steps: The powers k that were run.
    v_norms: |v_k|_{L2(G)} after projection.
    cap_errors: |f_k - f|_{L2(cap rho)} / |f|_{L2(cap R)}, before the jet
      correction.
    corrected_errors: The same after the jet correction.
    jet_deviations: max |D^a (f_k - f)(w)|, |a| <= 1, before correction.
    dbar_constants: |v_k| / |alpha_k|, the measured dbar constant per k.
    decay_ratio: exp of the fitted slope of log cap_errors against k.
    constants: The peak constants and the measured C used by the run.
  """

  steps: list[int] = dataclasses.field(default_factory=list)
  v_norms: list[float] = dataclasses.field(default_factory=list)
  cap_errors: list[float] = dataclasses.field(default_factory=list)
  corrected_errors: list[float] = dataclasses.field(default_factory=list)
  jet_deviations: list[float] = dataclasses.field(default_factory=list)
  dbar_constants: list[float] = dataclasses.field(default_factory=list)
  decay_ratio: float = math.nan
  constants: dict[str, float] = dataclasses.field(default_factory=dict)

  def to_dict(self) -> dict[str, Any]:
    return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True)
class ExtensionResult:
  """Measured contract of one extension.

  Attributes:
    coefficients: Full-basis coefficients of f_hat (variational solver only).
    jet_residual: (A), max |D^a f_hat(w) - D^a f(w)| over |a| <= 1.
    norm_ratio: (B), |f_hat|_{L2(G)} / |f|_{L2(cap R)}.
    local_error: (C), |f_hat - f|_{L2(cap rho)} / |f|_{L2(cap R)}.
    mu: The penalty weight (variational solver).
    degree: The basis degree.
    solver: The solver that produced the result.
    steps: The power k of the returned constructive step.
    trace: The constructive trace.
  """

  coefficients: np.ndarray | None
  jet_residual: float
  norm_ratio: float
  local_error: float
  mu: float
  degree: int
  solver: constants.Solver
  steps: int | None = None
  trace: ConstructiveTrace | None = None

  def to_dict(self) -> dict[str, Any]:
    result = {
        'format_version': constants.FORMAT_VERSION,
        'jet_residual': self.jet_residual,
        'norm_ratio': self.norm_ratio,
        'local_error': self.local_error,
        'mu': self.mu,
        'degree': self.degree,
        'solver': self.solver.value,
        'steps': self.steps,
        'coefficients': None,
        'trace': None if self.trace is None else self.trace.to_dict(),
    }
    if self.coefficients is not None:
      result['coefficients'] = [
          [float(c.real), float(c.imag)] for c in self.coefficients
      ]
    return result


def _l2_norm(values: np.ndarray, quadrature: domain.QuadratureSet) -> float:
  return math.sqrt(quadrature.weight * float(np.sum(np.abs(values) ** 2)))


def _jet(fn: InputFunction, w: np.ndarray) -> np.ndarray:
  point = w[None, :]
  return np.concatenate([fn.values(point), fn.gradient(point)[0]])


def _cap_norm(prob: ExtensionProblem, systems: ExtensionSystems) -> float:
  norm = _l2_norm(
      prob.f.values(systems.cap.quadrature.points), systems.cap.quadrature
  )
  if not norm > 0 or not math.isfinite(norm):
    raise InvalidInputError(f'|f|_L2(cap R) = {norm} is not usable.')
  return norm


def _check_systems(systems: ExtensionSystems) -> None:
  if not systems.full.basis == systems.cap.basis == systems.inner.basis:
    raise InvalidInputError('Extension systems must share one basis.')
  if systems.full.region.is_cap:
    raise InvalidInputError('The first system must cover the full domain.')


def variational_extend(
    prob: ExtensionProblem,
    gs_full: bergman.GramSystem,
    gs_cap: bergman.GramSystem,
    gs_inner: bergman.GramSystem,
    mu: float = constants.DEFAULT_MU,
) -> ExtensionResult:
  """Jet-constrained least-squares extension over the finite basis.

  In whitened coordinates e of the full system (|f_hat|_{L2(G)} = |e|) the
  jet constraints read C e = d. With C^H = Q R the solutions are
  e = e0 + Q2 y, and y solves the stacked least-squares problem

    [sqrt(w) Psi Q2; sqrt(mu) I] y ~ [sqrt(w) (F - Psi e0); 0]

  over the inner-cap nodes. mu = 0 gives the minimum-norm minimizer of the
  inner-cap error.

  Args:
    prob: The extension problem.
    gs_full: The full-domain system.
    gs_cap: The outer-cap system on the same basis.
    gs_inner: The inner-cap system on the same basis.
    mu: The penalty weight, mu >= 0.

  Returns:
    The measured extension.

  Raises:
    ConstraintFailureError: The jet functionals are rank deficient.
    InvalidInputError: mu < 0 or the systems do not share a basis.
  """
  if mu < 0:
    raise InvalidInputError(f'mu must be nonnegative, got {mu}.')
  systems = ExtensionSystems(full=gs_full, cap=gs_cap, inner=gs_inner)
  _check_systems(systems)
  point = prob.w[None, :]
  constraints = np.vstack(
      [gs_full.orthonormal(point), gs_full.orthonormal_gradient(point)[0]]
  )
  target = _jet(prob.f, prob.w)
  count, size = constraints.shape
  if size < count:
    raise ConstraintFailureError(
        f'{_CONSTRAINT_FAILURE_MSG}: {size} functions for {count} constraints'
    )
  q, r = np.linalg.qr(constraints.conj().T, mode='complete')
  pivots = np.abs(np.diag(r[:count, :count]))
  if pivots.min() <= constants.CONSTRAINT_RANK_TOLERANCE * pivots.max():
    raise ConstraintFailureError(f'{_CONSTRAINT_FAILURE_MSG}: {pivots}')
  span, null = q[:, :count], q[:, count:]

  def particular(rhs):
    return span @ linalg.solve_triangular(
        r[:count, :count], rhs, lower=False, trans='C'
    )

  e0 = particular(target)
  e0 = e0 + particular(target - constraints @ e0)
  inner_nodes = gs_inner.quadrature.points
  psi_inner = gs_full.orthonormal(inner_nodes)
  sqrt_w = math.sqrt(gs_inner.quadrature.weight)
  e = e0
  if null.shape[1]:
    lhs = np.vstack([
        sqrt_w * psi_inner @ null,
        math.sqrt(mu) * np.eye(null.shape[1]),
    ])
    rhs = np.concatenate([
        sqrt_w * (prob.f.values(inner_nodes) - psi_inner @ e0),
        np.zeros(null.shape[1], dtype=complex),
    ])
    y, *_ = linalg.lstsq(lhs, rhs, cond=constants.LSTSQ_CUTOFF)
    e = e0 + null @ y
  f_norm = _cap_norm(prob, systems)
  psi_full = gs_full.orthonormal(gs_full.quadrature.points)
  local = _l2_norm(
      psi_inner @ e - prob.f.values(inner_nodes), gs_inner.quadrature
  )
  result = ExtensionResult(
      coefficients=gs_full.coefficients(e),
      jet_residual=float(np.max(np.abs(constraints @ e - target))),
      norm_ratio=_l2_norm(psi_full @ e, gs_full.quadrature) / f_norm,
      local_error=local / f_norm,
      mu=float(mu),
      degree=gs_full.basis.degree,
      solver=constants.Solver.VARIATIONAL,
  )
  logging.debug(
      'Variational extension mu=%g: A=%.3g B=%.6g C=%.6g', mu,
      result.jet_residual, result.norm_ratio, result.local_error,
  )
  return result


def mu_sweep(
    prob: ExtensionProblem,
    systems: ExtensionSystems,
    mu_values: Sequence[float],
) -> list[ExtensionResult]:
  """Variational extensions over penalty weights, tracing the (B)/(C) front."""
  return [
      variational_extend(prob, systems.full, systems.cap, systems.inner, mu)
      for mu in mu_values
  ]


def _smoothstep(x: np.ndarray) -> np.ndarray:
  x = np.clip(x, 0.0, 1.0)
  return x**3 * (10.0 - 15.0 * x + 6.0 * x**2)


def _smoothstep_slope(x: np.ndarray) -> np.ndarray:
  inside = (x > 0) & (x < 1)
  return np.where(inside, 30.0 * x**2 * (1.0 - x) ** 2, 0.0)


@dataclasses.dataclass(frozen=True, eq=False)
class Cutoff:
  """C2 radial cutoff: 1 on B(zeta, 6 eta1 / 5), 0 off B(zeta, 9 eta1 / 5)."""

  center: np.ndarray
  eta1: float

  @property
  def inner(self) -> float:
    return 6.0 * self.eta1 / 5.0

  @property
  def outer(self) -> float:
    return 9.0 * self.eta1 / 5.0

  def _profile(self, z):
    offsets = np.atleast_2d(z) - self.center
    dist = np.linalg.norm(offsets, axis=1)
    return offsets, dist, (self.outer - dist) / (self.outer - self.inner)

  def values(self, z: np.ndarray) -> np.ndarray:
    _, _, x = self._profile(z)
    return _smoothstep(x)

  def _partials(self, z, conjugate):
    offsets, dist, x = self._profile(z)
    slope = -_smoothstep_slope(x) / (self.outer - self.inner)
    unit = np.divide(
        np.conj(offsets) if conjugate else offsets,
        2.0 * dist[:, None],
        out=np.zeros_like(offsets),
        where=dist[:, None] > 0,
    )
    return slope[:, None] * unit

  def dbar(self, z: np.ndarray) -> np.ndarray:
    """d chi / d zbar_j, shape (N, n)."""
    return self._partials(z, conjugate=False)

  def dz(self, z: np.ndarray) -> np.ndarray:
    """d chi / d z_j, shape (N, n)."""
    return self._partials(z, conjugate=True)


def cutoff_chi(zeta: Any, eta1: float) -> Cutoff:
  """Builds the cutoff around zeta for the exclusion radius eta1."""
  if eta1 <= 0:
    raise InvalidInputError(f'eta1 must be positive, got {eta1}.')
  if isinstance(zeta, domain.BoundaryPoint):
    zeta = zeta.zeta
  return Cutoff(center=np.atleast_1d(np.asarray(zeta, dtype=complex)),
                eta1=float(eta1))


def _kernel(u: np.ndarray, bandwidth: float) -> np.ndarray:
  """(1 - exp(-|u|^2 / h^2)) / u, continued by 0 at u = 0."""
  s = np.abs(u) ** 2 / bandwidth**2
  safe = np.where(u == 0, 1.0, u)
  return np.where(u == 0, 0.0, -np.expm1(-s) / safe)


def _kernel_derivative(u: np.ndarray, bandwidth: float) -> np.ndarray:
  """d/du of `_kernel`, with a series near u = 0."""
  s = np.abs(u) ** 2 / bandwidth**2
  safe = np.where(u == 0, 1.0, u)
  closed = (s * np.exp(-s) + np.expm1(-s)) / safe**2
  series = np.conj(u) ** 2 / bandwidth**4 * (-0.5 + s / 3.0 - s**2 / 8.0)
  return np.where(s < _SERIES_THRESHOLD, series, closed)


def _cauchy_block(
    targets: np.ndarray,
    sources: np.ndarray,
    charges: np.ndarray,
    bandwidth: float,
    derivative: bool,
) -> np.ndarray:
  u = targets[:, None] - sources[None, :]
  kernel = _kernel_derivative(u, bandwidth) if derivative else _kernel(
      u, bandwidth
  )
  return kernel @ charges


def _cauchy_sum(
    targets: np.ndarray,
    sources: np.ndarray,
    charges: np.ndarray,
    bandwidth: float,
    derivative: bool = False,
    max_workers: int = 1,
) -> np.ndarray:
  if not sources.size:
    return np.zeros(targets.size, dtype=complex)
  rows = max(1, constants.CAUCHY_BLOCK_ELEMENTS // sources.size)
  params = [
      [targets[chunk], sources, charges, bandwidth, derivative]
      for chunk in utils.chunked(targets.size, rows)
  ]
  parts = utils.parallel_map(_cauchy_block, params, max_workers=max_workers)
  return np.concatenate(parts) if parts else np.zeros(0, dtype=complex)


def _sources(
    alpha: np.ndarray, quadrature: domain.QuadratureSet
) -> tuple[np.ndarray, np.ndarray]:
  """Nodes with nonzero density and their charges w alpha / pi."""
  support = alpha != 0
  points = quadrature.points[support, 0]
  return points, quadrature.weight * alpha[support] / math.pi


def _bandwidth(
    quadrature: domain.QuadratureSet, bandwidth: float | None
) -> float:
  if bandwidth is None:
    return constants.CAUCHY_BANDWIDTH * quadrature.mesh_scale
  return bandwidth


def _planar_targets(
    spec: domain.DomainSpec, z: Any
) -> tuple[np.ndarray, bool]:
  if spec.n != 1:
    raise InvalidInputError(_PLANAR_ONLY_MSG)
  points = np.asarray(z, dtype=complex)
  return points.reshape(-1), points.ndim == 0 or points.size == 1


def cauchy_solve(
    spec: domain.DomainSpec,
    alpha: np.ndarray,
    quadrature: domain.QuadratureSet,
    z: Any,
    *,
    bandwidth: float | None = None,
    max_workers: int = 1,
) -> complex | np.ndarray:
  """Regularized discrete Cauchy transform of a density on quadrature nodes.

  v(z) = 1/pi sum_q w alpha(q) (1 - exp(-|z - q|^2 / h^2)) / (z - q).

  dv/dzbar is the Gaussian mollification of the discrete density at width h,
  which defaults to a fixed multiple of the quadrature mesh scale.

  Args:
    spec: The planar domain.
    alpha: Density values at the quadrature nodes.
    quadrature: The nodes alpha is sampled on.
    z: A point or an array of points.
    bandwidth: The regularization width h.
    max_workers: Worker pool size over evaluation points.

  Returns:
    v at the points.

  Raises:
    InvalidInputError: The domain is not planar.
    NodeCollisionError: A point coincides with a quadrature node.
  """
  targets, single = _planar_targets(spec, z)
  if np.isin(targets, quadrature.points[:, 0]).any():
    raise NodeCollisionError(f'{_NODE_COLLISION_MSG}; perturb the request.')
  sources, charges = _sources(np.asarray(alpha), quadrature)
  values = _cauchy_sum(
      targets, sources, charges, _bandwidth(quadrature, bandwidth),
      max_workers=max_workers,
  )
  return complex(values[0]) if single else values


def cauchy_solve_on_nodes(
    alpha: np.ndarray,
    quadrature: domain.QuadratureSet,
    *,
    bandwidth: float | None = None,
    max_workers: int = 1,
) -> np.ndarray:
  """The transform at the quadrature nodes themselves (self terms vanish)."""
  sources, charges = _sources(np.asarray(alpha), quadrature)
  return _cauchy_sum(
      quadrature.points[:, 0], sources, charges,
      _bandwidth(quadrature, bandwidth), max_workers=max_workers,
  )


def cauchy_derivative(
    alpha: np.ndarray,
    quadrature: domain.QuadratureSet,
    z: np.ndarray,
    *,
    bandwidth: float | None = None,
) -> np.ndarray:
  """dv/dz of the regularized transform at planar points."""
  sources, charges = _sources(np.asarray(alpha), quadrature)
  return _cauchy_sum(
      np.asarray(z, dtype=complex).reshape(-1), sources, charges,
      _bandwidth(quadrature, bandwidth), derivative=True,
  )


def cauchy_truncation_error(
    alpha: np.ndarray,
    quadrature: domain.QuadratureSet,
    z: np.ndarray,
    *,
    bandwidth: float | None = None,
) -> float:
  """Near-field difference between the raw and regularized transforms."""
  h = _bandwidth(quadrature, bandwidth)
  sources, charges = _sources(np.asarray(alpha), quadrature)
  worst = 0.0
  for target in np.asarray(z, dtype=complex).reshape(-1):
    u = target - sources
    near = (np.abs(u) < _NEAR_FIELD_BANDWIDTHS * h) & (u != 0)
    raw = np.sum(charges[near] / u[near])
    regularized = np.sum(charges[near] * _kernel(u[near], h))
    worst = max(worst, float(abs(raw - regularized)))
  return worst


@dataclasses.dataclass(frozen=True, eq=False)
class MinimalSolution:
  """v - P v for the projection P onto the finite Bergman space.

  Attributes:
    gs: The full-domain system defining P.
    projection: Whitened coordinates of P v.
    residual: v - P v at the quadrature nodes of `gs`.
    norm: |v - P v|_{L2(G)}.
    constant: norm / |alpha|, the measured dbar constant (nan when |alpha|
      was not given).
  """

  gs: bergman.GramSystem
  projection: np.ndarray
  residual: np.ndarray
  norm: float
  constant: float

  @property
  def coefficients(self) -> np.ndarray:
    """Full-basis coefficients of P v."""
    return self.gs.coefficients(self.projection)

  def projection_values(self, z: np.ndarray) -> np.ndarray:
    return self.gs.orthonormal(np.atleast_2d(z)) @ self.projection

  def projection_gradient(self, z: np.ndarray) -> np.ndarray:
    return self.gs.orthonormal_gradient(np.atleast_2d(z)) @ self.projection


def minimal_solution(
    gs_full: bergman.GramSystem,
    v_samples: np.ndarray,
    alpha_norm: float | None = None,
    *,
    basis_values: np.ndarray | None = None,
) -> MinimalSolution:
  """Projects v off the finite Bergman space of `gs_full`.

  Args:
    gs_full: The full-domain system; v is sampled on its quadrature nodes.
    v_samples: v at the nodes.
    alpha_norm: |alpha|_{L2} of the dbar datum, for the constant C.
    basis_values: Precomputed orthonormal basis values at the nodes.

  Returns:
    The minimal solution.
  """
  if basis_values is None:
    basis_values = gs_full.orthonormal(gs_full.quadrature.points)
  weight = gs_full.quadrature.weight
  projection = weight * (basis_values.conj().T @ v_samples)
  residual = v_samples - basis_values @ projection
  norm = _l2_norm(residual, gs_full.quadrature)
  constant = math.nan
  if alpha_norm:
    constant = norm / alpha_norm
  return MinimalSolution(
      gs=gs_full,
      projection=projection,
      residual=residual,
      norm=norm,
      constant=constant,
  )


@dataclasses.dataclass(frozen=True, eq=False)
class ConstructiveStep:
  """f_k = chi f - h^{-k} (v_k - P v_k) and its jet-corrected version."""

  k: int
  prob: ExtensionProblem
  pf: peak.PeakFunction
  cutoff: Cutoff
  sources: np.ndarray
  charges: np.ndarray
  bandwidth: float
  minimal: MinimalSolution
  correction: tuple[complex, complex] = (0j, 0j)

  def _chi_f(self, z):
    chi = self.cutoff.values(z)
    values = np.zeros(z.shape[0], dtype=complex)
    support = chi > 0
    values[support] = chi[support] * self.prob.f.values(z[support])
    return values

  def _residual(self, z):
    v = _cauchy_sum(z[:, 0], self.sources, self.charges, self.bandwidth)
    return v - self.minimal.projection_values(z)

  def values(self, z: np.ndarray) -> np.ndarray:
    """f_k at (N, 1) points."""
    z = np.atleast_2d(z)
    return self._chi_f(z) - self.pf.values(z) ** (-self.k) * self._residual(z)

  def derivative(self, z: np.ndarray) -> np.ndarray:
    """d f_k / dz at (N, 1) points."""
    z = np.atleast_2d(z)
    chi = self.cutoff.values(z)
    d_chi = self.cutoff.dz(z)[:, 0]
    d_chi_f = np.zeros(z.shape[0], dtype=complex)
    support = (chi > 0) | (d_chi != 0)
    if support.any():
      zs = z[support]
      d_chi_f[support] = (
          d_chi[support] * self.prob.f.values(zs)
          + chi[support] * self.prob.f.gradient(zs)[:, 0]
      )
    h = self.pf.values(z)
    dh = self.pf.gradient(z)[:, 0]
    residual = self._residual(z)
    d_residual = _cauchy_sum(
        z[:, 0], self.sources, self.charges, self.bandwidth, derivative=True
    ) - self.minimal.projection_gradient(z)[:, 0]
    return d_chi_f - (
        -self.k * h ** (-self.k - 1) * dh * residual
        + h ** (-self.k) * d_residual
    )

  def corrected(self, z: np.ndarray) -> np.ndarray:
    """f_k + p with p the affine 1-jet correction at w."""
    z = np.atleast_2d(z)
    c0, c1 = self.correction
    return self.values(z) + c0 + c1 * (z[:, 0] - self.prob.w[0])

  def corrected_derivative(self, z: np.ndarray) -> np.ndarray:
    return self.derivative(z) + self.correction[1]


def _fit_decay(steps: Sequence[int], values: Sequence[float]) -> float:
  pairs = [(k, e) for k, e in zip(steps, values) if e > 0]
  if len(pairs) < 2:
    return math.nan
  ks, es = zip(*pairs)
  slope, _ = np.polyfit(np.array(ks, dtype=float), np.log(es), 1)
  return float(math.exp(slope))


def constructive_extend_1d(
    prob: ExtensionProblem,
    pf: peak.PeakFunction,
    systems: ExtensionSystems,
    *,
    k_max: int = constants.DEFAULT_K_MAX,
    epsilon: float = 1e-2,
    peak_constants: peak.PeakConstants | None = None,
    max_workers: int = 1,
) -> tuple[ExtensionResult, ConstructiveTrace, ConstructiveStep]:
  """Planar dbar-correction extension with eta1 = R / 2.

  Runs k = 1..k_max and returns at the first k whose corrected local error
  is at most epsilon, or at k_max.

  Args:
    prob: A planar extension problem with rho < 6 eta1 / 5.
    pf: The normalized peak function at prob.zeta.
    systems: The full, outer-cap and inner-cap systems.
    k_max: The largest power of h.
    epsilon: The target local error (C).
    peak_constants: Certified constants recorded in the trace.
    max_workers: Worker pool size of the Cauchy transform.

  Returns:
    The result, the trace and the returned step.

  Raises:
    InvalidInputError: Not planar, pf not normalized or rho too large.
    NoDecayError: The local error failed to decrease over consecutive steps.
  """
  if prob.spec.n != 1:
    raise InvalidInputError(_PLANAR_ONLY_MSG)
  if not pf.normalized:
    raise InvalidInputError('The peak function must be normalized.')
  if k_max < 1:
    raise InvalidInputError(f'k_max must be positive, got {k_max}.')
  eta1 = prob.radius / 2.0
  cutoff = cutoff_chi(prob.zeta, eta1)
  if prob.inner_radius >= cutoff.inner:
    raise InvalidInputError(
        f'rho={prob.inner_radius} must stay below 6 eta1 / 5 = {cutoff.inner}.'
    )
  _check_systems(systems)
  log = mobly_logger.PrefixLoggerAdapter(
      logging.getLogger(),
      {
          mobly_logger.PrefixLoggerAdapter.EXTRA_KEY_LOG_PREFIX: (
              f'[Extend|t={prob.spec.t}]'
          )
      },
  )
  full = systems.full.quadrature
  nodes = full.points
  inner_nodes = systems.inner.quadrature.points
  f_norm = _cap_norm(prob, systems)
  f_inner = prob.f.values(inner_nodes)
  jet_f = _jet(prob.f, prob.w)
  basis_values = systems.full.orthonormal(nodes)
  dbar_chi = cutoff.dbar(nodes)[:, 0]
  alpha = np.zeros(nodes.shape[0], dtype=complex)
  support = dbar_chi != 0
  alpha[support] = dbar_chi[support] * prob.f.values(nodes[support])
  h_nodes = pf.values(nodes)
  bandwidth = _bandwidth(full, None)
  chi = cutoff.values(nodes)
  chi_f = np.zeros(nodes.shape[0], dtype=complex)
  chi_f[chi > 0] = chi[chi > 0] * prob.f.values(nodes[chi > 0])
  trace = ConstructiveTrace()
  stalled = 0
  step = None
  result = None
  point = prob.w[None, :]
  for k in range(1, k_max + 1):
    alpha_k = h_nodes**k * alpha
    alpha_norm = _l2_norm(alpha_k, full)
    v = cauchy_solve_on_nodes(
        alpha_k, full, bandwidth=bandwidth, max_workers=max_workers
    )
    minimal = minimal_solution(
        systems.full, v, alpha_norm, basis_values=basis_values
    )
    sources, charges = _sources(alpha_k, full)
    step = ConstructiveStep(
        k=k, prob=prob, pf=pf, cutoff=cutoff, sources=sources,
        charges=charges, bandwidth=bandwidth, minimal=minimal,
    )
    deviation = jet_f - np.concatenate(
        [step.values(point), step.derivative(point)]
    )
    step = dataclasses.replace(
        step, correction=(complex(deviation[0]), complex(deviation[1]))
    )
    f_k_inner = step.values(inner_nodes)
    cap_error = _l2_norm(f_k_inner - f_inner, systems.inner.quadrature)
    corrected_inner = step.corrected(inner_nodes)
    corrected_error = _l2_norm(
        corrected_inner - f_inner, systems.inner.quadrature
    )
    trace.steps.append(k)
    trace.v_norms.append(minimal.norm)
    trace.cap_errors.append(cap_error / f_norm)
    trace.corrected_errors.append(corrected_error / f_norm)
    trace.jet_deviations.append(float(np.max(np.abs(deviation))))
    trace.dbar_constants.append(minimal.constant)
    log.debug(
        'k=%d |v|=%.3g cap error=%.6g corrected=%.6g', k, minimal.norm,
        trace.cap_errors[-1], trace.corrected_errors[-1],
    )
    if k > 1 and trace.cap_errors[-1] >= trace.cap_errors[-2]:
      stalled += 1
    else:
      stalled = 0
    if stalled >= constants.STAGNATION_STEPS:
      trace = _finish_trace(trace, peak_constants, eta1)
      raise NoDecayError(
          f'{_NO_DECAY_MSG} after k={k} (ratio >= 1 for {stalled} steps).',
          trace,
      )
    if trace.corrected_errors[-1] <= epsilon or k == k_max:
      f_hat_full = (
          chi_f - h_nodes ** (-k) * minimal.residual
          + step.correction[0] + step.correction[1] * (nodes[:, 0] - prob.w[0])
      )
      jet_hat = np.concatenate(
          [step.corrected(point), step.corrected_derivative(point)]
      )
      result = ExtensionResult(
          coefficients=None,
          jet_residual=float(np.max(np.abs(jet_hat - jet_f))),
          norm_ratio=_l2_norm(f_hat_full, full) / f_norm,
          local_error=trace.corrected_errors[-1],
          mu=0.0,
          degree=systems.full.basis.degree,
          solver=constants.Solver.CONSTRUCTIVE,
          steps=k,
      )
      break
  if trace.corrected_errors[-1] > epsilon:
    log.warning(
        'Target %g not reached by k=%d (local error %.6g).', epsilon, k_max,
        trace.corrected_errors[-1],
    )
  trace = _finish_trace(trace, peak_constants, eta1)
  return dataclasses.replace(result, trace=trace), trace, step


def _finish_trace(
    trace: ConstructiveTrace,
    peak_constants: peak.PeakConstants | None,
    eta1: float,
) -> ConstructiveTrace:
  recorded = {'eta1': eta1}
  finite = [c for c in trace.dbar_constants if math.isfinite(c)]
  recorded['dbar_constant'] = max(finite) if finite else math.nan
  if peak_constants is not None:
    recorded.update(
        d2=peak_constants.d2, d3=peak_constants.d3, eta=peak_constants.eta
    )
  return dataclasses.replace(
      trace,
      decay_ratio=_fit_decay(trace.steps, trace.cap_errors),
      constants=recorded,
  )
