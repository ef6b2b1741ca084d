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

"""Tests of finite-basis Bergman kernels, extremal problems and metrics."""

import math

from mobly import asserts
from mobly import test_runner
import numpy as np

from bergman_localize import bergman
from bergman_localize import constants
from bergman_localize import domain
from bergman_localize import gram_cache
from testing import bergman_base_test
from testing.utils import oracle_utils

_DISC_DEGREE = 16
_DISC_QUAD = 100_000
_BALL_DEGREE = 6
_BALL_QUAD = 200_000


class BergmanTest(bergman_base_test.BergmanBaseTest):
  """Checks kernel, extremal and metric values against closed forms."""

  def setup_class(self) -> None:
    super().setup_class()
    self.disc_system = bergman.assemble_gram(
        self.disc(), domain.Region.full(),
        bergman.MonomialBasis(1, _DISC_DEGREE), _DISC_QUAD, self.seed,
        cache=self.cache, max_workers=self.jobs,
    )

  def test_basis_layout(self) -> None:
    basis = bergman.MonomialBasis(2, 3)
    asserts.assert_equal(basis.size, 10)
    asserts.assert_equal(basis.multi_indices[0], (0, 0))
    asserts.assert_true(
        np.all(np.diff(basis.degrees) >= 0), 'Basis is not graded.'
    )
    asserts.assert_equal(
        basis.prefix(2).multi_indices, basis.multi_indices[:6]
    )
    with asserts.assert_raises(bergman.BasisTooLargeError):
      bergman.MonomialBasis(1, -1)

  def test_basis_derivatives_match_differences(self) -> None:
    basis = bergman.MonomialBasis(2, 4, center=(0.1, -0.2j), scale=0.7)
    z = np.array([[0.3 + 0.1j, -0.2 + 0.25j]])
    step = 1e-6
    derivatives = basis.derivatives(z)[0]
    for j in range(2):
      shift = np.zeros((1, 2), dtype=complex)
      shift[0, j] = step
      difference = (basis.values(z + shift) - basis.values(z - shift)) / (
          2 * step
      )
      np.testing.assert_allclose(
          derivatives[j], difference[0], rtol=1e-6, atol=1e-8
      )

  def test_disc_kernel_matches_closed_form(self) -> None:
    for x in (0.0, 0.3, 0.5j):
      value = bergman.kernel_at(self.disc_system, [x])
      error = oracle_utils.relative_error(
          value.value, oracle_utils.disc_kernel(x)
      )
      asserts.assert_true(error < 5e-3, f'K({x}) off by {error}.')
      asserts.assert_false(value.unreliable, f'{x} flagged unreliable.')
      asserts.assert_equal(value.degree, _DISC_DEGREE)

  def test_unreliable_near_boundary(self) -> None:
    value = bergman.kernel_at(self.disc_system, [0.999])
    asserts.assert_true(value.unreliable, 'Near-boundary point not flagged.')

  def test_point_outside_domain(self) -> None:
    with asserts.assert_raises(domain.DomainOfValidityError):
      bergman.kernel_at(self.disc_system, [1.01])

  def test_metric_identity(self) -> None:
    for z, x in ((0.2, 1.0), (0.6j, 1 + 1j), (-0.7 + 0.1j, 1j)):
      extremal = bergman.metric_at(self.disc_system, [z], [x])
      log_kernel = bergman.metric_via_log_kernel(self.disc_system, [z], [x])
      asserts.assert_true(
          oracle_utils.relative_error(log_kernel, extremal) < 1e-8,
          f'beta({z}; {x}): {extremal} vs {log_kernel}',
      )

  def test_disc_metric_matches_closed_form(self) -> None:
    for z in (0.0, 0.4):
      beta = bergman.metric_at(self.disc_system, [z], [1.0])
      expected = oracle_utils.ball_metric([z], [1.0], 1)
      asserts.assert_true(
          oracle_utils.relative_error(beta, expected) < 5e-3,
          f'beta({z}) = {beta}, expected {expected}',
      )

  def test_extremal_function_contract(self) -> None:
    z = np.array([0.3 - 0.2j])
    x = np.array([1.0 + 0.5j])
    gs = self.disc_system
    coefficients = bergman.extremal_function(gs, z, x)
    value = gs.basis.evaluate(coefficients, z[None, :])[0]
    derivative = gs.basis.evaluate_gradient(coefficients, z[None, :])[0] @ x
    nodes = gs.quadrature
    norm = math.sqrt(
        nodes.weight
        * np.sum(np.abs(gs.basis.evaluate(coefficients, nodes.points)) ** 2)
    )
    asserts.assert_true(abs(value) < 1e-8, f'f(z) = {value}')
    asserts.assert_almost_equal(
        abs(derivative), bergman.m_extremal(gs, z, x), delta=1e-8
    )
    asserts.assert_almost_equal(norm, 1.0, delta=1e-6)
    asserts.assert_equal(bergman.m_extremal(gs, z, [0.0]), 0.0)

  def test_reproducing_coefficients(self) -> None:
    w = np.array([0.4 + 0.4j])
    coefficients = bergman.reproducing_coefficients(self.disc_system, w)
    value = self.disc_system.basis.evaluate(coefficients, w[None, :])[0]
    kernel = bergman.kernel_at(self.disc_system, w).value
    asserts.assert_almost_equal(value.real, kernel, delta=1e-8 * kernel)
    asserts.assert_true(abs(value.imag) < 1e-8 * kernel, f'{value}')

  def test_degree_sweep_is_monotone(self) -> None:
    values = bergman.degree_sweep(
        self.disc(), domain.Region.full(), [0.6], [4, 8, 12, 16], _DISC_QUAD,
        self.seed, cache=self.cache,
    )
    kernels = [v.value for v in values]
    asserts.assert_equal([v.degree for v in values], [4, 8, 12, 16])
    asserts.assert_true(
        all(b >= a for a, b in zip(kernels, kernels[1:])),
        f'Kernel decreased along the sweep: {kernels}',
    )
    asserts.assert_true(sum(v.converged for v in values) <= 1,
                        'More than one degree marked converged.')
    with asserts.assert_raises(bergman.SweepOrderError):
      bergman.degree_sweep(
          self.disc(), domain.Region.full(), [0.6], [8, 4], _DISC_QUAD,
          self.seed,
      )

  def test_restrict_matches_truncation(self) -> None:
    restricted = bergman.restrict(self.disc_system, range(6))
    truncated = bergman.truncate_degree(self.disc_system, 5)
    asserts.assert_equal(restricted.retained, tuple(range(6)))
    asserts.assert_equal(restricted.effective_degree, 5)
    asserts.assert_true(
        oracle_utils.relative_error(
            bergman.kernel_at(restricted, [0.3]).value,
            bergman.kernel_at(truncated, [0.3]).value,
        ) < 1e-10,
        'Restricted and truncated systems differ.',
    )

  def test_truncation_tail(self) -> None:
    interior = bergman.truncation_tail(self.disc_system, [0.3])
    near_boundary = bergman.truncation_tail(self.disc_system, [0.95])
    self.record_data({'properties': {
        'interior_tail': interior,
        'near_boundary_tail': near_boundary,
    }})
    asserts.assert_true(interior < 1e-6, f'Tail at 0.3 is {interior}')
    asserts.assert_true(
        near_boundary > constants.RESOLUTION_TOLERANCE,
        f'Tail at 0.95 is {near_boundary}',
    )
    asserts.assert_equal(
        bergman.truncation_tail(
            bergman.truncate_degree(self.disc_system, 1), [0.3]
        ),
        math.inf,
    )

  def test_factorization_drops_in_basis_order(self) -> None:
    rng = np.random.default_rng(self.seed)
    v0, v1, v2 = rng.standard_normal((3, 12))
    # Column 2 depends on columns 0 and 1; column 3 dominates the diagonal.
    samples = np.stack([v0, v1, v0 + v1, 100.0 * v2], axis=1)
    gram = samples.T @ samples
    _, factor, retained, truncated, _ = bergman._factorize(
        gram.astype(complex), bergman.MonomialBasis(1, 3), range(4)
    )
    asserts.assert_equal(retained, (0, 1, 3))
    asserts.assert_equal(truncated, (2,))
    asserts.assert_equal(factor.shape, (3, 3))

  def test_basis_too_large_for_quadrature(self) -> None:
    with asserts.assert_raises(bergman.BasisTooLargeError):
      bergman.assemble_gram(
          self.disc(), domain.Region.full(), bergman.MonomialBasis(1, 200),
          1000, self.seed,
      )

  def test_ball_kernel_and_metric(self) -> None:
    ball = self.ball(2)
    gs = bergman.assemble_gram(
        ball, domain.Region.full(), bergman.MonomialBasis(2, _BALL_DEGREE),
        _BALL_QUAD, self.seed, cache=self.cache, max_workers=self.jobs,
    )
    origin = np.zeros(2)
    kernel = bergman.kernel_at(gs, origin).value
    asserts.assert_true(
        oracle_utils.relative_error(
            kernel, oracle_utils.ball_kernel(origin, 2)
        ) < 1e-2,
        f'K(0) = {kernel}',
    )
    for x in np.eye(2):
      beta = bergman.metric_at(gs, origin, x)
      asserts.assert_true(
          oracle_utils.relative_error(beta, math.sqrt(3.0)) < 1e-2,
          f'beta(0; {x}) = {beta}',
      )

  def test_gram_cache_round_trip(self) -> None:
    cache = gram_cache.GramCache(self.make_temp_dir())
    basis = bergman.MonomialBasis(1, 6)
    first = bergman.assemble_gram(
        self.disc(), domain.Region.cap([1.0], 0.5), basis, 20_000,
        self.seed, cache=cache,
    )
    second = bergman.assemble_gram(
        self.disc(), domain.Region.cap([1.0], 0.5), basis, 20_000,
        self.seed, cache=cache,
    )
    asserts.assert_equal((cache.misses, cache.hits), (1, 1))
    np.testing.assert_array_equal(first.gram, second.gram)


if __name__ == '__main__':
  test_runner.main()
