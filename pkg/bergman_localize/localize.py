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

"""Localization of the Bergman kernel and metric at boundary points.

For a boundary point zeta and a cap G ∩ B(zeta, R) the sweep compares the
kernel K, the extremal quantity M and the metric beta of the cap with those
of G along the inward normal ray. Cap and full systems share one
cap-centered chart, one retained subspace and nested quadrature, so

  K_cap >= K_full  and  M_cap >= M_full

hold exactly in the finite model. The localization side,

  K_cap <= (1 + eps) K_full,  M_cap <= (1 + eps) M_full,
  beta_cap / (1 + eps) <= beta_full <= sqrt(1 + eps) beta_cap,

is measured. An offset is usable when its points are reliable for the mesh
and the kernel there has converged in the degree; theta(eps) is the largest
usable offset such that every sampled offset between it and the smallest
usable offset is usable and satisfies the bounds.
"""

from __future__ import annotations

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
from bergman_localize.lib import utils

# Error messages used in this module.
_RESOLUTION_MSG = 'Too many near-boundary evaluations are unreliable'
_NOT_CONNECTED_MSG = 'The cap is not connected'

_MATCHING_ROUNDS = 8


class Error(errors.Error):
  """Base error of the localize module."""


class ResolutionInsufficientError(Error, errors.NumericError):
  """More than the allowed fraction of offsets is flagged unreliable."""


class CapNotConnectedError(Error, errors.NumericError):
  """G ∩ B(zeta, R) is not connected at the tested resolution."""


class InvalidSweepError(Error, errors.ConfigError):
  """Offsets, directions or epsilon are out of range."""


@dataclasses.dataclass(frozen=True)
class LocalizationReport:
  """Cap-to-domain ratios along the inward ray at one boundary point.

  Attributes:
    t: The family parameter.
    zeta: The boundary point as [re, im] pairs.
    zeta_index: Position of zeta in the sampled boundary points.
    radius: The cap radius R.
    offsets: Strictly decreasing ray offsets s.
    directions: Unit directions X as [re, im] pairs.
    kernel_ratios: K_cap / K_full per offset.
    extremal_ratios: M_cap / M_full per offset and direction.
    beta_ratios: beta_full / beta_cap per offset and direction, from M / sqrt K.
    beta_ratios_direct: The same ratios from the Levi form of log K.
    full_kernels: K_full per offset.
    cap_kernels: K_cap per offset.
    unreliable: Reliability flags per offset.
    truncation_tails: The larger extrapolated relative truncation tail of
      K_full and K_cap per offset.
    resolved: Whether both kernels converged in the degree per offset.
    degree: The basis degree.
    retained: Number of basis functions in the matched subspace.
    nested: Whether the cap nodes are a subset of the full nodes.
  """

  t: float
  zeta: list[list[float]]
  zeta_index: int
  radius: float
  offsets: list[float]
  directions: list[list[list[float]]]
  kernel_ratios: list[float]
  extremal_ratios: list[list[float]]
  beta_ratios: list[list[float]]
  beta_ratios_direct: list[list[float]]
  full_kernels: list[float]
  cap_kernels: list[float]
  unreliable: list[bool]
  truncation_tails: list[float]
  resolved: list[bool]
  degree: int
  retained: int
  nested: bool

  def rows(self) -> list[dict[str, Any]]:
    """One flat record per (offset, direction) for tabular output."""
    rows = []
    for i, s in enumerate(self.offsets):
      for j in range(len(self.directions)):
        rows.append({
            't': self.t,
            'zeta_index': self.zeta_index,
            'offset': s,
            'direction': j,
            'kernel_ratio': self.kernel_ratios[i],
            'extremal_ratio': self.extremal_ratios[i][j],
            'beta_ratio': self.beta_ratios[i][j],
            'unreliable': self.unreliable[i],
            'resolved': self.resolved[i],
        })
    return rows


@dataclasses.dataclass(frozen=True)
class SandwichResult:
  """Lower-sandwich check of one report.

  `passed` is meaningful only when `applicable` is set,
  i.e. when the cap quadrature was nested in the full quadrature.
  """

  passed: bool
  applicable: bool
  worst_kernel_margin: float
  worst_extremal_margin: float

  @property
  def worst_margin(self) -> float:
    return min(self.worst_kernel_margin, self.worst_extremal_margin)

  @property
  def violation(self) -> bool:
    return self.applicable and not self.passed


@dataclasses.dataclass(frozen=True)
class UniformityVerdict:
  """theta(eps) over a family grid of (t, zeta) pairs.

  Attributes:
    epsilon: The tolerance eps.
    thetas: Per-pair records {t, zeta_index, theta}.
    theta_min: Minimum of theta over the successful pairs.
    passed: theta_min > 0 and theta_min exceeds the smallest tested offset.
    witness: The pair attaining theta_min.
    spread: max theta / min theta over the successful pairs.
    min_offset: The smallest tested offset.
    excluded: Pairs whose sweep failed, with the error.
  """

  epsilon: float
  thetas: list[dict[str, Any]]
  theta_min: float
  passed: bool
  witness: dict[str, Any] | None
  spread: float
  min_offset: float
  excluded: list[dict[str, Any]] = dataclasses.field(default_factory=list)

  def to_dict(self) -> dict[str, Any]:
    result = dataclasses.asdict(self)
    result['format_version'] = constants.FORMAT_VERSION
    return result


def default_offsets(
    radius: float, levels: int = constants.OFFSET_LEVELS
) -> list[float]:
  """The geometric grid s_j = R 2^-j, j = 1..levels."""
  return [radius * 2.0**-j for j in range(1, levels + 1)]


def default_directions(
    spec: domain.DomainSpec, zeta: domain.BoundaryPoint
) -> np.ndarray:
  """The normal, a tangential frame, their mixtures and i times the normal."""
  normal = domain.outward_normal(spec, zeta)
  tangents = linalg.null_space(np.conj(normal)[None, :]).T
  directions = [normal]
  directions.extend(tangents)
  directions.extend((normal + tau) / math.sqrt(2.0) for tau in tangents)
  directions.append(1j * normal)
  return np.array(directions, dtype=complex)


def _match_retained(
    full: bergman.GramSystem, cap: bergman.GramSystem
) -> tuple[bergman.GramSystem, bergman.GramSystem]:
  """Restricts both systems until they retain the same basis functions."""
  for _ in range(_MATCHING_ROUNDS):
    if full.retained == cap.retained:
      return full, cap
    common = sorted(set(full.retained) & set(cap.retained))
    full = bergman.restrict(full, common)
    cap = bergman.restrict(cap, common)
  if full.retained != cap.retained:
    raise bergman.ConditioningError(
        'Cap and full systems do not settle on one subspace',
        full.effective_degree,
    )
  return full, cap


def _check_offsets(offsets: Sequence[float], radius: float) -> None:
  if not offsets:
    raise InvalidSweepError('No offsets to sweep.')
  if any(not 0 < s < radius for s in offsets):
    raise InvalidSweepError(f'Offsets must lie in (0, {radius}): {offsets}')
  if any(b >= a for a, b in zip(offsets, offsets[1:])):
    raise InvalidSweepError(f'Offsets must decrease strictly: {offsets}')


def ratio_sweep(
    spec: domain.DomainSpec,
    zeta: domain.BoundaryPoint,
    radius: float,
    offsets: Sequence[float] | None = None,
    directions: np.ndarray | None = None,
    degree: int | None = None,
    quad_count: int | None = None,
    seed: int = 0,
    *,
    zeta_index: int = 0,
    cap_seed: int | None = None,
    cache: gram_cache.GramCache | None = None,
    check_connected: bool = True,
    resolution: int = constants.CONNECTIVITY_RESOLUTION,
    max_unreliable_fraction: float = constants.MAX_UNRELIABLE_FRACTION,
    resolution_tolerance: float = constants.RESOLUTION_TOLERANCE,
    max_workers: int = 1,
) -> LocalizationReport:
  """Sweeps cap-to-domain ratios of K, M and beta along the inward ray.

  Args:
    spec: The domain.
    zeta: The boundary point.
    radius: The cap radius R.
    offsets: Strictly decreasing ray offsets in (0, R); defaults to the
      geometric grid.
    directions: Directions X; normalized to unit length. Defaults to
      `default_directions`.
    degree: The basis degree; defaults by dimension.
    quad_count: The quadrature proposal count; defaults by dimension.
    seed: The quadrature seed.
    zeta_index: Position of zeta in its sample, recorded in the report.
    cap_seed: A different seed for the cap quadrature. The cap nodes are then
      no longer nested in the full nodes.
    cache: Optional Gram cache.
    check_connected: Whether to require a connected cap.
    resolution: The connectivity grid resolution.
    max_unreliable_fraction: Largest tolerated fraction of unreliable offsets.
    resolution_tolerance: Largest relative truncation tail of K_full and
      K_cap at a resolved offset.
    max_workers: Worker pool size for Gram assembly.

  Returns:
    The localization report.

  Raises:
    CapNotConnectedError: The cap is not connected.
    InvalidSweepError: The offsets are invalid.
    ResolutionInsufficientError: Too many offsets are unreliable.
  """
  log = mobly_logger.PrefixLoggerAdapter(
      logging.getLogger(),
      {
          mobly_logger.PrefixLoggerAdapter.EXTRA_KEY_LOG_PREFIX: (
              f'[Localize|t={spec.t}|zeta={zeta_index}]'
          )
      },
  )
  if check_connected and not domain.cap_connected(
      spec, zeta, radius, resolution
  ):
    raise CapNotConnectedError(f'{_NOT_CONNECTED_MSG}: R={radius}')
  offsets = list(default_offsets(radius) if offsets is None else offsets)
  _check_offsets(offsets, radius)
  if directions is None:
    directions = default_directions(spec, zeta)
  directions = np.atleast_2d(np.asarray(directions, dtype=complex))
  norms = np.linalg.norm(directions, axis=1)
  if np.any(norms == 0):
    raise InvalidSweepError('Directions must be nonzero.')
  directions = directions / norms[:, None]
  if degree is None:
    degree = constants.DEFAULT_DEGREE[spec.n]
  if quad_count is None:
    quad_count = constants.DEFAULT_QUAD_COUNT[spec.n]
  normal = domain.outward_normal(spec, zeta)
  basis = bergman.MonomialBasis(
      spec.n, degree, tuple(zeta.zeta - 0.5 * radius * normal), radius
  )
  full = bergman.assemble_gram(
      spec, domain.Region.full(), basis, quad_count, seed, cache=cache,
      max_workers=max_workers,
  )
  cap = bergman.assemble_gram(
      spec, domain.Region.cap(zeta, radius), basis, quad_count,
      seed if cap_seed is None else cap_seed, cache=cache,
      max_workers=max_workers,
  )
  nested = cap.quadrature.is_subset_of(full.quadrature)
  if not nested:
    log.warning('Cap quadrature is not nested in the full quadrature.')
  full, cap = _match_retained(full, cap)
  kernel_ratios, extremal_ratios, beta_ratios, beta_direct = [], [], [], []
  full_kernels, cap_kernels, unreliable = [], [], []
  tails, resolved = [], []
  for s in offsets:
    z = domain.inward_ray(spec, zeta, s)
    on_full = bergman.evaluate(full, z, directions)
    on_cap = bergman.evaluate(cap, z, directions)
    full_kernels.append(on_full.kernel)
    cap_kernels.append(on_cap.kernel)
    kernel_ratios.append(on_cap.kernel / on_full.kernel)
    extremal_ratios.append((on_cap.extremal / on_full.extremal).tolist())
    beta_ratios.append((on_full.metric / on_cap.metric).tolist())
    beta_direct.append([
        bergman.metric_via_log_kernel(full, z, x)
        / bergman.metric_via_log_kernel(cap, z, x)
        for x in directions
    ])
    unreliable.append(on_full.unreliable or on_cap.unreliable)
    tail = max(
        bergman.truncation_tail(full, z), bergman.truncation_tail(cap, z)
    )
    tails.append(tail)
    resolved.append(tail <= resolution_tolerance)
  flagged = sum(unreliable)
  if flagged > max_unreliable_fraction * len(offsets):
    raise ResolutionInsufficientError(
        f'{_RESOLUTION_MSG}: {flagged} of {len(offsets)} offsets.'
    )
  if flagged:
    log.warning('%d of %d offsets are unreliable.', flagged, len(offsets))
  if not all(resolved):
    log.info(
        'Kernels are not resolved at degree %d on %d of %d offsets.', degree,
        len(resolved) - sum(resolved), len(offsets),
    )
  log.debug(
      'K ratio %.6g at s=%g, %.6g at s=%g.', kernel_ratios[0], offsets[0],
      kernel_ratios[-1], offsets[-1],
  )
  return LocalizationReport(
      t=float(spec.t),
      zeta=zeta.to_list(),
      zeta_index=zeta_index,
      radius=float(radius),
      offsets=[float(s) for s in offsets],
      directions=[
          [[float(c.real), float(c.imag)] for c in x] for x in directions
      ],
      kernel_ratios=kernel_ratios,
      extremal_ratios=extremal_ratios,
      beta_ratios=beta_ratios,
      beta_ratios_direct=beta_direct,
      full_kernels=full_kernels,
      cap_kernels=cap_kernels,
      unreliable=unreliable,
      truncation_tails=tails,
      resolved=resolved,
      degree=degree,
      retained=len(full.retained),
      nested=nested,
  )


def _qualifies(report: LocalizationReport, index: int, epsilon: float) -> bool:
  bound = 1.0 + epsilon
  if report.kernel_ratios[index] > bound:
    return False
  if max(report.extremal_ratios[index]) > bound:
    return False
  betas = report.beta_ratios[index]
  return min(betas) >= 1.0 / bound and max(betas) <= math.sqrt(bound)


def _usable(report: LocalizationReport, index: int) -> bool:
  return report.resolved[index] and not report.unreliable[index]


def resolution_floor(report: LocalizationReport) -> float | None:
  """The smallest offset that is reliable and resolved, if any."""
  usable = [s for i, s in enumerate(report.offsets) if _usable(report, i)]
  return min(usable) if usable else None


def theta_of_epsilon(report: LocalizationReport, epsilon: float) -> float:
  """Largest usable offset s* such that the run up to s* qualifies.

  Offsets are scanned upwards from the resolution floor. Offsets below the
  floor are outside the resolved window and are not scanned; above it, an
  unreliable or unresolved offset ends the run like a failing one.

  Returns:
    theta, or 0.0 when no offset is usable or the floor offset fails.
  """
  if epsilon < 0:
    raise InvalidSweepError(f'epsilon must be nonnegative, got {epsilon}.')
  theta = 0.0
  started = False
  for index in sorted(
      range(len(report.offsets)), key=lambda i: report.offsets[i]
  ):
    if not _usable(report, index):
      if started:
        break
      continue
    started = True
    if not _qualifies(report, index, epsilon):
      break
    theta = report.offsets[index]
  return theta


def sandwich_check(
    report: LocalizationReport,
    tolerance: float = constants.SANDWICH_TOLERANCE,
) -> SandwichResult:
  """Checks K_cap >= K_full and M_cap >= M_full at every sweep point."""
  kernel_margin = min(r - 1.0 for r in report.kernel_ratios)
  extremal_margin = min(
      r - 1.0 for row in report.extremal_ratios for r in row
  )
  passed = min(kernel_margin, extremal_margin) >= -tolerance
  if not report.nested:
    logging.warning(
        'Sandwich check at t=%s zeta=%d is not applicable: the quadrature is '
        'not nested.', report.t, report.zeta_index,
    )
  return SandwichResult(
      passed=passed,
      applicable=report.nested,
      worst_kernel_margin=kernel_margin,
      worst_extremal_margin=extremal_margin,
  )


def uniformity_from_reports(
    reports: Sequence[LocalizationReport],
    epsilon: float,
    min_offset: float,
    excluded: Sequence[dict[str, Any]] = (),
) -> UniformityVerdict:
  """Aggregates per-pair theta(eps) into a family verdict."""
  thetas = [
      {
          't': report.t,
          'zeta_index': report.zeta_index,
          'theta': theta_of_epsilon(report, epsilon),
          'resolution_floor': resolution_floor(report),
      }
      for report in reports
  ]
  if not thetas:
    return UniformityVerdict(
        epsilon=epsilon, thetas=[], theta_min=0.0, passed=False,
        witness=None, spread=math.inf, min_offset=min_offset,
        excluded=list(excluded),
    )
  worst = min(range(len(thetas)), key=lambda i: thetas[i]['theta'])
  theta_min = thetas[worst]['theta']
  theta_max = max(entry['theta'] for entry in thetas)
  return UniformityVerdict(
      epsilon=epsilon,
      thetas=thetas,
      theta_min=theta_min,
      passed=theta_min > 0 and theta_min > min_offset,
      witness={
          't': reports[worst].t,
          'zeta_index': reports[worst].zeta_index,
          'zeta': reports[worst].zeta,
      },
      spread=theta_max / theta_min if theta_min > 0 else math.inf,
      min_offset=min_offset,
      excluded=list(excluded),
  )


def _sweep_pair(spec, zeta, index, radius, offsets, degree, quad_count, seed,
                cache, max_unreliable_fraction):
  return ratio_sweep(
      spec, zeta, radius, offsets, degree=degree, quad_count=quad_count,
      seed=seed, zeta_index=index, cache=cache,
      max_unreliable_fraction=max_unreliable_fraction,
  )


def family_sweeps(
    specs: Sequence[domain.DomainSpec],
    zetas: Sequence[Sequence[domain.BoundaryPoint]],
    radius: float,
    degree: int | None = None,
    quad_count: int | None = None,
    seed: int = 0,
    *,
    offsets: Sequence[float] | None = None,
    cache: gram_cache.GramCache | None = None,
    max_unreliable_fraction: float = constants.MAX_UNRELIABLE_FRACTION,
    max_workers: int = 1,
) -> tuple[list[LocalizationReport], list[dict[str, Any]]]:
  """Runs ratio_sweep over every (t, zeta) pair.

  Returns:
    The reports of the successful pairs in grid order, and the excluded
    pairs with their errors.
  """
  offsets = list(default_offsets(radius) if offsets is None else offsets)
  params = [
      [spec, zeta, index, radius, offsets, degree, quad_count, seed, cache,
       max_unreliable_fraction]
      for spec, member_zetas in zip(specs, zetas)
      for index, zeta in enumerate(member_zetas)
  ]
  outcomes = utils.collect_map(_sweep_pair, params, max_workers=max_workers)
  reports, excluded = [], []
  for params_, outcome in zip(params, outcomes):
    if isinstance(outcome, errors.ConfigError):
      raise outcome
    if isinstance(outcome, errors.Error):
      logging.warning(
          'Excluding t=%s zeta=%d: %s', params_[0].t, params_[2], outcome
      )
      excluded.append({
          't': float(params_[0].t),
          'zeta_index': params_[2],
          'error': f'{type(outcome).__name__}: {outcome}',
      })
    elif isinstance(outcome, Exception):
      raise outcome
    else:
      reports.append(outcome)
  return reports, excluded


def family_uniformity(
    specs: Sequence[domain.DomainSpec],
    zetas: Sequence[Sequence[domain.BoundaryPoint]],
    radius: float,
    epsilon: float,
    degree: int | None = None,
    quad_count: int | None = None,
    seed: int = 0,
    *,
    offsets: Sequence[float] | None = None,
    cache: gram_cache.GramCache | None = None,
    max_unreliable_fraction: float = constants.MAX_UNRELIABLE_FRACTION,
    max_workers: int = 1,
) -> tuple[UniformityVerdict, list[LocalizationReport]]:
  """Sweeps the family grid and decides whether theta(eps) is uniform.

  Pairs whose sweep fails with a numeric toolkit error are excluded and
  listed in the verdict; config errors and any other exception propagate.

  Returns:
    The verdict and the reports it was computed from.
  """
  offsets = list(default_offsets(radius) if offsets is None else offsets)
  reports, excluded = family_sweeps(
      specs, zetas, radius, degree, quad_count, seed, offsets=offsets,
      cache=cache, max_unreliable_fraction=max_unreliable_fraction,
      max_workers=max_workers,
  )
  verdict = uniformity_from_reports(reports, epsilon, min(offsets), excluded)
  return verdict, reports


def theta_curve(
    reports: Sequence[LocalizationReport],
    epsilons: Sequence[float],
) -> list[tuple[float, float]]:
  """theta_min over the reports for every eps."""
  curve = []
  for epsilon in epsilons:
    thetas = [theta_of_epsilon(report, epsilon) for report in reports]
    curve.append((float(epsilon), min(thetas) if thetas else 0.0))
  return curve
