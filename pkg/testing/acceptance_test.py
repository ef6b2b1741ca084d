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

"""Desk-scale acceptance checks of the Bergman localization toolkit.

Every check records the measured quantities with `record_data` and asserts
its thresholds. Localization radii are measured on the offsets where the
finite basis resolves the kernel; the resolution floor is recorded with them.

Sizes come from the testbed `TestParams`, e.g.

  TestParams:
    seed: 7
    boundary_seed: 11
    quad_count_disc: 200000
    quad_count_ball: 1000000
    uniformity_boundary_count: 8
    uniformity_radius: 1.2
"""

import hashlib
import math
import os
import shutil
import time

from mobly import asserts
from mobly import test_runner
import numpy as np

from bergman_localize import bergman
from bergman_localize import cli
from bergman_localize import constants
from bergman_localize import domain
from bergman_localize import experiment_config
from bergman_localize import extend
from bergman_localize import localize
from bergman_localize import peak
from testing import bergman_base_test
from testing.utils import oracle_utils

_DISC_POINTS = (0.0, 0.3, 0.5, 0.7)
_FAMILY_T_VALUES = (1.0, 1.25, 1.5, 2.0)
_SWEEP_DEGREES = (8, 12, 16, 20)


def _catalogue() -> dict[str, domain.DomainSpec]:
  return {
      'disc': domain.DomainSpec(kind=domain.DomainKind.BALL, n=1),
      'ball': domain.DomainSpec(kind=domain.DomainKind.BALL, n=2),
      'ellipsoid': domain.DomainSpec(
          kind=domain.DomainKind.ELLIPSOID, n=2, weights=(1.0, 2.0)
      ),
      'perturbed_disc': domain.DomainSpec(
          kind=domain.DomainKind.PERTURBED_DISC, n=1, tau=0.1, m=2
      ),
  }


def _ellipsoid_family() -> domain.DomainFamily:
  return domain.DomainFamily(
      kind=domain.DomainKind.ELLIPSOID, n=2,
      t_min=min(_FAMILY_T_VALUES), t_max=max(_FAMILY_T_VALUES),
  )


def _file_digests(directory: str) -> dict[str, str]:
  """SHA-256 of every output except the manifest, which holds timestamps."""
  digests = {}
  for name in sorted(os.listdir(directory)):
    if name == constants.MANIFEST_FILE_NAME:
      continue
    with open(os.path.join(directory, name), 'rb') as f:
      digests[name] = hashlib.sha256(f.read()).hexdigest()
  return digests


class AcceptanceTest(bergman_base_test.BergmanBaseTest):
  """Oracle and property checks at the sizes the toolkit is tuned for."""

  def setup_class(self) -> None:
    super().setup_class()
    self.disc_quad_count = self.param(
        'quad_count_disc', constants.DEFAULT_QUAD_COUNT[1]
    )
    self.ball_quad_count = self.param(
        'quad_count_ball', constants.DEFAULT_QUAD_COUNT[2]
    )

  def pre_run(self) -> None:
    catalogue = _catalogue()
    self.generate_tests(
        test_logic=self._check_rkhs_identity,
        name_func=lambda name: f'test_rkhs_identity_{name}',
        arg_sets=[(name,) for name in catalogue],
    )

  def _check_rkhs_identity(self, name: str) -> None:
    spec = _catalogue()[name]
    if spec.n == 1:
      degree = self.param('rkhs_degree_n1', 12)
    else:
      degree = self.param('rkhs_degree_n2', 6)
    gs = bergman.assemble_gram(
        spec, domain.Region.full(), bergman.MonomialBasis(spec.n, degree),
        self.param('rkhs_quad_count', 50_000), self.seed, cache=self.cache,
        max_workers=self.jobs,
    )
    rng = np.random.default_rng(self.seed)
    points = gs.quadrature.points[
        rng.choice(gs.quadrature.count, size=100, replace=False)
    ]
    directions = rng.normal(size=(100, spec.n)) + 1j * rng.normal(
        size=(100, spec.n)
    )
    worst = 0.0
    for z, x in zip(points, directions):
      x = x / np.linalg.norm(x)
      beta = bergman.metric_at(gs, z, x)
      via_log = bergman.metric_via_log_kernel(gs, z, x)
      worst = max(worst, oracle_utils.relative_error(via_log, beta))
    self.record_data({'properties': {'domain': name, 'worst': worst}})
    asserts.assert_true(worst < 1e-8, f'{name}: relative gap {worst}')

  def test_disc_kernel_oracle(self) -> None:
    disc = self.disc()
    start = time.monotonic()
    gs = bergman.assemble_gram(
        disc, domain.Region.full(),
        bergman.MonomialBasis(1, constants.DEFAULT_DEGREE[1]),
        self.disc_quad_count, self.seed, cache=self.cache,
        max_workers=self.jobs,
    )
    gaps = {}
    for x in _DISC_POINTS:
      value = bergman.kernel_at(gs, [x]).value
      gaps[x] = oracle_utils.relative_error(
          value, oracle_utils.disc_kernel(x)
      )
    seconds = time.monotonic() - start
    self.record_data({'properties': {
        'errors': {str(x): e for x, e in gaps.items()},
        'seconds': seconds,
    }})
    asserts.assert_less(seconds, 30.0, 'Disc kernel run is too slow.')
    for x, error in gaps.items():
      asserts.assert_true(error < 1e-3, f'K({x}) relative error {error}')

  def test_ball_oracle(self) -> None:
    ball = self.ball(2)
    gs = bergman.assemble_gram(
        ball, domain.Region.full(),
        bergman.MonomialBasis(2, constants.DEFAULT_DEGREE[2]),
        self.ball_quad_count, self.seed, cache=self.cache,
        max_workers=self.jobs,
    )
    origin = np.zeros(2)
    kernel_error = oracle_utils.relative_error(
        bergman.kernel_at(gs, origin).value, oracle_utils.ball_kernel(origin, 2)
    )
    metric_errors = [
        oracle_utils.relative_error(
            bergman.metric_at(gs, origin, e), math.sqrt(3.0)
        )
        for e in np.eye(2)
    ]
    self.record_data({'properties': {
        'kernel_error': kernel_error, 'metric_errors': metric_errors,
    }})
    asserts.assert_true(kernel_error < 1e-3, f'K(0) error {kernel_error}')
    asserts.assert_true(max(metric_errors) < 1e-3,
                        f'beta(0; e_j) errors {metric_errors}')

  def test_extremal_brute_force(self) -> None:
    gs = bergman.assemble_gram(
        self.disc(), domain.Region.full(), bergman.MonomialBasis(1, 6),
        self.param('brute_force_quad_count', 50_000), self.seed,
        cache=self.cache, max_workers=self.jobs,
    )
    z = np.array([[0.3 + 0.2j]])
    x = np.array([1.0])
    psi = gs.orthonormal(z)[0]
    dpsi = gs.orthonormal_derivatives(z, x)[0]
    rng = np.random.default_rng(self.seed)

    def best_of(candidates):
      # Candidates are whitened coefficients e with f(z) = psi @ e = 0.
      candidates = candidates - np.outer(
          candidates @ psi, np.conj(psi)
      ) / np.vdot(psi, psi).real
      norms = np.linalg.norm(candidates, axis=1)
      values = np.abs(candidates @ dpsi) / norms
      index = int(np.argmax(values))
      return values[index], candidates[index] / norms[index]

    total = self.param('brute_force_candidates', 100_000)
    size = psi.shape[0]
    best, best_e = best_of(
        rng.normal(size=(total // 2, size))
        + 1j * rng.normal(size=(total // 2, size))
    )
    scale = 0.5
    for _ in range(total // 2 // 1000):
      noise = rng.normal(size=(1000, size)) + 1j * rng.normal(
          size=(1000, size)
      )
      value, e = best_of(best_e + scale * noise / math.sqrt(2 * size))
      if value > best:
        best, best_e = value, e
      else:
        scale *= 0.9
    extremal = bergman.m_extremal(gs, z[0], x)
    self.record_data({'properties': {'m': extremal, 'best': float(best)}})
    asserts.assert_true(best <= extremal * (1 + 1e-10),
                        f'Candidate {best} beats the extremal {extremal}.')
    asserts.assert_true(best >= 0.98 * extremal,
                        f'Best candidate {best} vs extremal {extremal}.')

  def _disc_report(self) -> localize.LocalizationReport:
    return localize.ratio_sweep(
        self.disc(), self.disc_point(1.0), 0.8,
        offsets=localize.default_offsets(0.8),
        degree=constants.DEFAULT_DEGREE[1],
        quad_count=self.disc_quad_count, seed=self.seed, cache=self.cache,
        max_workers=self.jobs,
    )

  def test_sandwich_and_disc_localization(self) -> None:
    report = self._disc_report()
    check = localize.sandwich_check(report)
    theta = localize.theta_of_epsilon(report, 0.25)
    self.record_data({'properties': {
        'theta': theta,
        'kernel_ratios': report.kernel_ratios,
        'unreliable': report.unreliable,
        'resolved': report.resolved,
        'truncation_tails': report.truncation_tails,
        'resolution_floor': localize.resolution_floor(report),
        'worst_kernel_margin': check.worst_kernel_margin,
        'worst_extremal_margin': check.worst_extremal_margin,
    }})
    asserts.assert_true(check.applicable, 'Quadrature is not nested.')
    asserts.assert_true(check.passed, f'Sandwich violated: {check}')
    thetas = [localize.theta_of_epsilon(report, e)
              for e in constants.DEFAULT_EPSILONS]
    asserts.assert_equal(thetas, sorted(thetas))
    asserts.assert_equal(len(report.offsets), constants.OFFSET_LEVELS)
    asserts.assert_true(theta >= 0.0125 * report.radius,
                        f'theta(0.25) = {theta}')

  def test_ellipsoid_family_uniformity(self) -> None:
    family = _ellipsoid_family()
    specs = [family.member(t) for t in _FAMILY_T_VALUES]
    count = self.param('uniformity_boundary_count', 8)
    radius = self.param('uniformity_radius', 1.2)
    zetas = [
        domain.boundary_points(spec, count, self.boundary_seed)
        for spec in specs
    ]
    start = time.monotonic()
    verdict, reports = localize.family_uniformity(
        specs, zetas, radius, 0.25,
        degree=self.param('uniformity_degree', constants.DEFAULT_DEGREE[2]),
        quad_count=self.ball_quad_count, seed=self.seed,
        offsets=localize.default_offsets(radius),
        cache=self.cache,
        max_unreliable_fraction=self.param(
            'uniformity_max_unreliable_fraction', 0.8
        ),
        max_workers=self.jobs,
    )
    seconds = time.monotonic() - start
    self.record_data({'properties': {**verdict.to_dict(),
                                     'seconds': seconds}})
    asserts.assert_equal(
        len(reports) + len(verdict.excluded), len(specs) * count
    )
    for report in reports:
      check = localize.sandwich_check(report)
      asserts.assert_true(
          check.passed, f't={report.t} zeta={report.zeta_index}: {check}'
      )
    curve = localize.theta_curve(reports, constants.DEFAULT_EPSILONS)
    asserts.assert_equal([theta for _, theta in curve],
                         sorted(theta for _, theta in curve))
    asserts.assert_false(verdict.excluded,
                         f'Excluded pairs: {verdict.excluded}')
    asserts.assert_true(verdict.passed, f'theta_min = {verdict.theta_min}')
    asserts.assert_less(verdict.spread, 4.0, 'theta varies across pairs.')
    asserts.assert_less(seconds, 900.0, 'Family sweep is too slow.')

  def test_family_peak_certificate(self) -> None:
    family = _ellipsoid_family()
    specs = [family.member(t) for t in _FAMILY_T_VALUES]
    certificate = peak.certify(
        specs, constants.DEFAULT_PEAK_SCALE, 0.5,
        self.param('peak_sample_count', 10_000), self.seed,
        boundary_count=self.param('uniformity_boundary_count', 8),
        boundary_seed=self.boundary_seed, max_workers=self.jobs,
    )
    self.record_data({'properties': certificate.to_dict()})
    asserts.assert_equal(
        len(certificate.pairs),
        len(specs) * self.param('uniformity_boundary_count', 8),
    )
    failed = [(p.t, p.zeta_index) for p in certificate.pairs if not p.passed]
    asserts.assert_false(failed, f'Pairs not certified: {failed}')
    asserts.assert_true(certificate.uniform, 'Certificate is not uniform.')
    asserts.assert_true(certificate.d2 < 1.0, f'd2 = {certificate.d2}')
    asserts.assert_true(math.isfinite(certificate.d1),
                        f'd1 = {certificate.d1}')

  def test_extension_contract(self) -> None:
    disc = self.disc()
    zetas = domain.boundary_points(
        disc, self.param('extension_boundary_count', 3), self.boundary_seed
    )
    quad_count = self.param('extension_quad_count', 100_000)
    slack = self.param('monotone_slack', 1e-6)
    ratios = []
    for zeta in zetas:
      probs = [
          extend.pole_problem(disc, zeta, 0.5, 0.2, delta, 0.05)
          for delta in constants.DEFAULT_POLE_OFFSETS
      ]
      local_errors = [[] for _ in probs]
      for degree in _SWEEP_DEGREES:
        # The systems depend on zeta and the radii only.
        systems = extend.extension_systems(
            probs[0], degree, quad_count, self.seed, cache=self.cache,
            max_workers=self.jobs,
        )
        for prob, errors_of_prob in zip(probs, local_errors):
          result = extend.variational_extend(
              prob, systems.full, systems.cap, systems.inner, mu=0.0
          )
          asserts.assert_true(
              result.jet_residual <= 1e-8,
              f'{prob.to_dict()} degree={degree}: jet {result.jet_residual}',
          )
          errors_of_prob.append(result.local_error)
          if degree == _SWEEP_DEGREES[-1]:
            asserts.assert_true(math.isfinite(result.norm_ratio),
                                f'B = {result.norm_ratio}')
            ratios.append(result.norm_ratio)
      for errors_of_prob in local_errors:
        for previous, current in zip(errors_of_prob, errors_of_prob[1:]):
          asserts.assert_true(
              current <= previous * (1 + slack) + slack,
              f'Local errors over degrees {errors_of_prob}',
          )
    median = float(np.median(ratios))
    spread = max(ratios) / min(ratios)
    self.record_data({'properties': {'norm_ratios': ratios,
                                     'median': median, 'spread': spread}})
    outside = [b for b in ratios if not median / 2.0 <= b <= 2.0 * median]
    asserts.assert_false(
        outside, f'B outside a factor 2 of the median {median}: {outside}'
    )

  def test_constructive_decay(self) -> None:
    disc = self.disc()
    zeta = self.disc_point(1.0)
    prob = extend.pole_problem(disc, zeta, 0.5, 0.05, 0.1, 0.02)
    systems = extend.extension_systems(
        prob, self.param('constructive_degree', 12),
        self.param('constructive_quad_count', 20_000), self.seed,
        cache=self.cache, max_workers=self.jobs,
    )
    pf = peak.normalize_peak(
        peak.levi_peak(disc, zeta, constants.DEFAULT_PEAK_SCALE)
    )
    certificate = peak.certify(
        [disc], constants.DEFAULT_PEAK_SCALE, prob.radius / 2.0,
        self.param('peak_sample_count', 10_000), self.seed, zetas=[[zeta]],
        normalized=True,
    )
    pair = certificate.pairs[0]
    try:
      _, trace, _ = extend.constructive_extend_1d(
          prob, pf, systems, k_max=self.param('k_max', 40), epsilon=0.0,
          peak_constants=pair, max_workers=self.jobs,
      )
    except extend.NoDecayError as err:
      trace = err.trace
    fitted = [
        (k, e) for k, e in zip(trace.steps, trace.cap_errors)
        if k >= 5 and e > 0
    ]
    self.record_data({'properties': trace.to_dict()})
    asserts.assert_true(len(fitted) >= 2, f'Too few steps: {trace.steps}')
    ks, values = zip(*fitted)
    slope, _ = np.polyfit(np.array(ks, dtype=float), np.log(values), 1)
    bound = math.log(pair.d2 / pair.d3) + 0.1
    asserts.assert_true(slope <= bound, f'Slope {slope} above {bound}.')

  def test_runs_are_byte_identical(self) -> None:
    root = self.make_temp_dir()
    try:
      data = {
          'command': 'localize',
          'family': {'kind': 'perturbed_disc', 'n': 1, 't_min': 0.0,
                     't_max': 0.2, 't_values': [0.0, 0.2],
                     'params': {'m': 2}, 'boundary_count': 2},
          'numeric': {'degree': 8, 'quad_count': 30_000,
                      'seeds': {'quadrature': self.seed,
                                'boundary': self.boundary_seed},
                      'radius': 0.8, 'offset_levels': 5},
      }
      config = experiment_config.from_dict(data)
      digests = []
      for name, jobs in (('first', 1), ('second', max(self.jobs, 2))):
        out_dir = os.path.join(root, name)
        cli.run_experiment(config, data, out_dir=out_dir, jobs=jobs)
        digests.append(_file_digests(out_dir))
      self.record_data({'properties': {'files': sorted(digests[0])}})
      asserts.assert_equal(digests[0], digests[1])
    finally:
      shutil.rmtree(root, ignore_errors=True)


if __name__ == '__main__':
  test_runner.main()
