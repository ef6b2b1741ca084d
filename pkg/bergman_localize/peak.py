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

"""Holomorphic peak functions built from Levi polynomials.

At a boundary point zeta the Levi polynomial

  P(z) = sum_j dr/dz_j(zeta) (z_j - zeta_j)
         + 1/2 sum_jk d2r/dz_j dz_k(zeta) (z_j - zeta_j)(z_k - zeta_k)

satisfies 2 Re P(z) = r(z) - L_r(zeta; z - zeta) + o(|z - zeta|^2), so on
convex members of the catalogue Re P < 0 on the closure minus zeta and
h = exp(lam P) is a peak function at zeta. Certification measures the
constants of the peak contract on dense samples:

  d1  sup |1 - h(z)| / |z - zeta| over B(zeta, eta2)
  d2  sup |h(z)| over closure samples with |z - zeta| >= eta1
  eta the largest radius with |h| >= d3 on B(zeta, eta)
"""

from __future__ import annotations

from collections.abc import Sequence
import dataclasses
import logging
import math
from typing import Any

from mobly import logger as mobly_logger
import numpy as np

from bergman_localize import constants
from bergman_localize import domain
from bergman_localize import errors
from bergman_localize.lib import utils

# Error messages used in this module.
_UNSUPPORTED_MSG = 'Levi-polynomial peak functions need a convex member'
_PEAK_FAILURE_MSG = '|h| >= 1 away from the peak point'
_NOT_ON_BOUNDARY_MSG = 'Peak point is not on the boundary'

_ON_BOUNDARY_TOLERANCE = 1e-8
_AWAY_FROM_PEAK = 1e-6
_TIE_TOLERANCE = 1e-12


class Error(errors.Error):
  """Base error of the peak module."""


class UnsupportedConstructionError(Error, errors.ConfigError):
  """The domain is outside the convex-representable catalogue."""


class PeakParameterError(Error, errors.ConfigError):
  """A peak or certification parameter is out of range."""


class PeakFailureError(Error, errors.NumericError):
  """|h| reached 1 away from the peak point."""

  def __init__(self, message: str, witness: np.ndarray):
    super().__init__(f'{message}: witness {witness}')
    self.witness = witness


@dataclasses.dataclass(frozen=True, eq=False)
class PeakFunction:
  """h(z; zeta) = exp(lam P(z; zeta)), optionally replaced by (h + 3) / 4.

  Attributes:
    spec: The domain; its closure is the validity region.
    zeta: The peak point.
    linear: dr/dz_j(zeta).
    quadratic: d2r/dz_j dz_k(zeta).
    scale: The exponential scale lam > 0.
    normalized: Whether the (h + 3) / 4 replacement is applied.
  """

  spec: domain.DomainSpec
  zeta: domain.BoundaryPoint
  linear: np.ndarray
  quadratic: np.ndarray
  scale: float
  normalized: bool = False

  def levi_polynomial(self, z: np.ndarray) -> np.ndarray:
    dz = np.atleast_2d(z) - self.zeta.zeta
    return dz @ self.linear + 0.5 * np.einsum(
        'nj,jk,nk->n', dz, self.quadratic, dz
    )

  def raw(self, z: np.ndarray) -> np.ndarray:
    return np.exp(self.scale * self.levi_polynomial(z))

  def values(self, z: np.ndarray) -> np.ndarray:
    raw = self.raw(z)
    return (raw + 3.0) / 4.0 if self.normalized else raw

  def gradient(self, z: np.ndarray) -> np.ndarray:
    """Complex partials dh/dz_j, shape (N, n)."""
    dz = np.atleast_2d(z) - self.zeta.zeta
    dp = self.linear + dz @ self.quadratic.T
    grad = self.scale * self.raw(z)[:, None] * dp
    return grad / 4.0 if self.normalized else grad


@dataclasses.dataclass(frozen=True)
class PeakConstants:
  """Certified peak constants of one (t, zeta) pair."""

  t: float
  zeta_index: int
  zeta: list[list[float]]
  d1: float
  d2: float
  eta1: float
  eta2: float
  d3: float = math.nan
  eta: float = math.nan
  passed: bool = False
  witness: list[list[float]] | None = None


@dataclasses.dataclass(frozen=True)
class PeakCertificate:
  """Per-pair constants and the family summary.

  Attributes:
    pairs: The certified constants per (t, zeta).
    d1: Max of d1 over the pairs.
    d2: Max of d2 over the pairs.
    d3: The family threshold in (d2, 1).
    eta_min: Min of eta over the pairs.
    eta1: The exclusion radius.
    eta2: The Lipschitz radius.
    uniform: Whether every pair passed with finite family constants.
    d1_spread: max d1 / min d1 across pairs.
    d2_spread: max d2 / min d2 across pairs.
  """

  pairs: list[PeakConstants]
  d1: float
  d2: float
  d3: float
  eta_min: float
  eta1: float
  eta2: float
  uniform: bool
  d1_spread: float
  d2_spread: float

  def to_dict(self) -> dict[str, Any]:
    summary = dataclasses.asdict(self)
    summary.pop('pairs')
    summary['format_version'] = constants.FORMAT_VERSION
    summary['pair_count'] = len(self.pairs)
    return summary


@dataclasses.dataclass(frozen=True)
class PowerRadius:
  """k with |h^k| <= gamma off B(zeta, theta'), theta with |h^k| > 1 - gamma."""

  k: int
  theta: float


def _is_convex(spec: domain.DomainSpec) -> bool:
  if spec.kind is not domain.DomainKind.PERTURBED_DISC:
    return True
  outer = max(max(abs(lo), abs(hi)) for lo, hi in spec.box)
  outer /= 1.0 + constants.BOX_MARGIN
  curvature = abs(spec.tau) * spec.m * (spec.m - 1) * outer ** (spec.m - 2)
  return curvature < 2.0


def levi_peak(
    spec: domain.DomainSpec,
    zeta: domain.BoundaryPoint,
    lam: float = constants.DEFAULT_PEAK_SCALE,
) -> PeakFunction:
  """Builds the Levi-polynomial peak candidate exp(lam P) at zeta.

  Raises:
    PeakParameterError: lam <= 0 or zeta is not on the boundary.
    UnsupportedConstructionError: The member is not convex.
  """
  if lam <= 0:
    raise PeakParameterError(f'Peak scale must be positive, got {lam}.')
  if abs(domain.eval_r(spec, zeta.zeta)) > _ON_BOUNDARY_TOLERANCE:
    raise PeakParameterError(f'{_NOT_ON_BOUNDARY_MSG}: {zeta.zeta}')
  if not _is_convex(spec):
    raise UnsupportedConstructionError(
        f'{_UNSUPPORTED_MSG}: tau={spec.tau}, m={spec.m}'
    )
  return PeakFunction(
      spec=spec,
      zeta=zeta,
      linear=np.conj(domain.grad_r(spec, zeta.zeta)),
      quadratic=np.asarray(domain.holomorphic_hessian(spec, zeta.zeta)),
      scale=float(lam),
  )


def peak_eval(pf: PeakFunction, z: Any) -> complex | np.ndarray:
  """Evaluates h (normalized when flagged) at a point or (N, n) points."""
  points = np.asarray(z, dtype=complex)
  single = points.ndim == 0 or (points.ndim == 1 and points.size == pf.spec.n)
  values = pf.values(points.reshape(-1, pf.spec.n))
  return complex(values[0]) if single else values


def normalize_peak(pf: PeakFunction) -> PeakFunction:
  """Returns the (h + 3) / 4 replacement; idempotent."""
  if pf.normalized:
    return pf
  return dataclasses.replace(pf, normalized=True)


def _closure_samples(
    spec: domain.DomainSpec, sample_count: int, seed: int
) -> np.ndarray:
  interior = domain.sample_interior(
      spec, domain.Region.full(), sample_count, seed
  ).points
  boundary_count = max(1, sample_count // 10)
  boundary = np.array(
      [p.zeta for p in domain.boundary_points(spec, boundary_count, seed)]
  )
  return np.concatenate([interior, boundary])


def choose_eta(
    pf: PeakFunction,
    d3: float,
    sample_count: int,
    *,
    eta2: float,
    seed: int = 0,
) -> float:
  """Largest tested radius eta <= eta2 / 2 with |h| >= d3 on B(zeta, eta).

  Radii are tested on the grid (eta2 / 2) j / 64, j = 1..64, against samples
  of B(zeta, eta2 / 2) ∩ closure(G) plus the inward-ray point at each radius.

  Returns:
    The radius, or 0.0 (with a warning) when no radius qualifies.
  """
  limit = eta2 / 2.0
  radii = limit * np.arange(1, constants.ETA_GRID_SIZE + 1) / (
      constants.ETA_GRID_SIZE
  )
  samples = domain.sample_ball(pf.spec, pf.zeta, limit, sample_count, seed)
  normal = domain.outward_normal(pf.spec, pf.zeta)
  ray = pf.zeta.zeta[None, :] - radii[:, None] * normal[None, :]
  ray = ray[domain.in_box(pf.spec, ray)]
  ray = ray[np.atleast_1d(domain.eval_r(pf.spec, ray)) <= 0]
  points = np.concatenate([samples.points, ray])
  dist = np.linalg.norm(points - pf.zeta.zeta, axis=1)
  modulus = np.abs(pf.values(points))
  eta = 0.0
  for radius in radii:
    inside = dist <= radius
    if inside.any() and modulus[inside].min() < d3 - _TIE_TOLERANCE:
      break
    eta = float(radius)
  if eta == 0.0:
    logging.warning(
        'No radius qualifies for d3=%s at zeta=%s.', d3, pf.zeta.zeta
    )
  return eta


def power_radius(
    pf: PeakFunction,
    gamma: float,
    theta_prime: float,
    samples: np.ndarray,
    grid: int = constants.ETA_GRID_SIZE,
) -> PowerRadius:
  """Measures the power k and radius theta used to localize with h^k.

  k is the least power with |h^k| <= gamma on the samples outside
  B(zeta, theta'); theta is the largest grid radius in (0, theta'] with
  |h^k| > 1 - gamma on the samples inside B(zeta, theta).
  """
  if not 0 < gamma < 1:
    raise PeakParameterError(f'gamma must lie in (0, 1), got {gamma}.')
  dist = np.linalg.norm(samples - pf.zeta.zeta, axis=1)
  modulus = np.abs(pf.values(samples))
  far = modulus[dist >= theta_prime]
  d = float(far.max()) if far.size else 0.0
  if d >= 1.0:
    raise PeakFailureError(_PEAK_FAILURE_MSG, samples[dist >= theta_prime][
        np.argmax(far)])
  k = 1 if d == 0.0 else max(1, math.ceil(math.log(gamma) / math.log(d)))
  theta = 0.0
  for radius in theta_prime * np.arange(1, grid + 1) / grid:
    inside = dist <= radius
    if inside.any() and (modulus[inside] ** k).min() <= 1.0 - gamma:
      break
    theta = float(radius)
  return PowerRadius(k=k, theta=theta)


def _certify_pair(
    spec: domain.DomainSpec,
    zeta_index: int,
    zeta: domain.BoundaryPoint,
    closure: np.ndarray,
    lam: float,
    eta1: float,
    eta2: float,
    sample_count: int,
    seed: int,
    normalized: bool,
) -> tuple[PeakFunction, PeakConstants]:
  log = mobly_logger.PrefixLoggerAdapter(
      logging.getLogger(),
      {
          mobly_logger.PrefixLoggerAdapter.EXTRA_KEY_LOG_PREFIX: (
              f'[Peak|t={spec.t}|zeta={zeta_index}]'
          )
      },
  )
  pf = levi_peak(spec, zeta, lam)
  if normalized:
    pf = normalize_peak(pf)
  dist = np.linalg.norm(closure - zeta.zeta, axis=1)
  modulus = np.abs(pf.values(closure))
  away = dist > _AWAY_FROM_PEAK
  if away.any() and modulus[away].max() >= 1.0:
    witness = closure[away][np.argmax(modulus[away])]
    raise PeakFailureError(_PEAK_FAILURE_MSG, witness)
  far = dist >= eta1
  if not far.any():
    raise PeakParameterError(f'No closure sample at distance >= {eta1}.')
  d2 = float(modulus[far].max())
  witness = closure[far][np.argmax(modulus[far])]
  near = domain.sample_ball(spec, zeta, eta2, sample_count, seed).points
  near = np.concatenate([near, closure[(dist <= eta2) & away]])
  near_dist = np.linalg.norm(near - zeta.zeta, axis=1)
  keep = near_dist > 0
  d1 = float(
      np.max(np.abs(1.0 - pf.values(near[keep])) / near_dist[keep])
  )
  passed = d2 < 1.0 and math.isfinite(d1)
  log.debug('d1=%.6g d2=%.6g passed=%s', d1, d2, passed)
  return pf, PeakConstants(
      t=spec.t,
      zeta_index=zeta_index,
      zeta=zeta.to_list(),
      d1=d1,
      d2=d2,
      eta1=eta1,
      eta2=eta2,
      passed=passed,
      witness=[[float(c.real), float(c.imag)] for c in witness],
  )


def certify(
    specs: Sequence[domain.DomainSpec],
    lam: float,
    eta1: float,
    sample_count: int,
    seed: int,
    *,
    boundary_count: int = 8,
    boundary_seed: int | None = None,
    zetas: Sequence[Sequence[domain.BoundaryPoint]] | None = None,
    eta2: float | None = None,
    d3: float | None = None,
    normalized: bool = False,
    max_workers: int = 1,
) -> PeakCertificate:
  """Certifies the peak contract over sampled (t, zeta) pairs of a family.

  Args:
    specs: The sampled family members.
    lam: The exponential scale.
    eta1: The exclusion radius of the d2 bound.
    sample_count: Proposal count for the closure and local samples.
    seed: Sampling seed.
    boundary_count: Boundary points per member when `zetas` is not given.
    boundary_seed: Seed of the boundary points; defaults to `seed`.
    zetas: Explicit boundary points per member.
    eta2: The Lipschitz radius; defaults to eta1 / 2.
    d3: The family threshold; defaults to (1 + d2_family) / 2.
    normalized: Certify the (h + 3) / 4 replacement instead of h.
    max_workers: Worker pool size over pairs.

  Returns:
    The certificate.

  Raises:
    PeakFailureError: |h| >= 1 at a closure sample away from zeta.
    PeakParameterError: eta1 or d3 is out of range.
  """
  if eta1 <= 0:
    raise PeakParameterError(f'eta1 must be positive, got {eta1}.')
  eta2 = constants.ETA2_RATIO * eta1 if eta2 is None else eta2
  if boundary_seed is None:
    boundary_seed = seed
  if zetas is None:
    zetas = [
        domain.boundary_points(spec, boundary_count, boundary_seed)
        for spec in specs
    ]
  params = []
  for spec, member_zetas in zip(specs, zetas):
    closure = _closure_samples(spec, sample_count, seed)
    for index, zeta in enumerate(member_zetas):
      params.append([spec, index, zeta, closure, lam, eta1, eta2,
                     sample_count, seed, normalized])
  results = utils.parallel_map(_certify_pair, params, max_workers)
  d2_family = max(c.d2 for _, c in results)
  d1_family = max(c.d1 for _, c in results)
  if d3 is None:
    d3 = (1.0 + d2_family) / 2.0
  if not d2_family < d3 < 1.0:
    raise PeakParameterError(
        f'd3={d3} must lie in (d2={d2_family}, 1).'
    )
  pairs = []
  for pf, pair in results:
    eta = choose_eta(pf, d3, sample_count, eta2=eta2, seed=seed)
    pairs.append(dataclasses.replace(pair, d3=d3, eta=eta))
  d1_values = [p.d1 for p in pairs]
  d2_values = [p.d2 for p in pairs]
  uniform = all(p.passed for p in pairs) and math.isfinite(d1_family)
  uniform = uniform and d2_family < 1.0
  return PeakCertificate(
      pairs=pairs,
      d1=d1_family,
      d2=d2_family,
      d3=d3,
      eta_min=min(p.eta for p in pairs),
      eta1=eta1,
      eta2=eta2,
      uniform=uniform,
      d1_spread=max(d1_values) / min(d1_values),
      d2_spread=max(d2_values) / min(d2_values),
  )
