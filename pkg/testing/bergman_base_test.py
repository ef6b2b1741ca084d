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

"""The base test class for Bergman localization tests."""

import logging
import tempfile
from typing import Any

from mobly import base_test
import numpy as np

from bergman_localize import domain
from bergman_localize import gram_cache
from testing.utils import constants


class BergmanBaseTest(base_test.BaseTestClass):
  """A Mobly base test for the Bergman localization toolkit.

  Testbed `TestParams` tune the tests: `seed`, `boundary_seed`, `jobs` and
  `cache_dir` (a Gram cache shared across test classes).
  """

  cache: gram_cache.GramCache | None
  jobs: int
  seed: int
  boundary_seed: int

  def setup_class(self) -> None:
    suite_name = f'{constants.SUITE_NAME}: {constants.VERSION}'
    self.record_data({
        'properties': {
            'suite_name': f'[{suite_name}]',
        }
    })
    cache_dir = self.user_params.get('cache_dir')
    self.cache = gram_cache.GramCache(cache_dir) if cache_dir else None
    self.jobs = int(self.user_params.get('jobs', 1))
    self.seed = int(self.user_params.get('seed', constants.DEFAULT_SEED))
    self.boundary_seed = int(
        self.user_params.get('boundary_seed', constants.DEFAULT_BOUNDARY_SEED)
    )
    logging.info('Running with seed %d and %d worker(s).', self.seed,
                 self.jobs)

  def param(self, name: str, default: Any) -> Any:
    """Returns a testbed parameter converted to the type of `default`."""
    return type(default)(self.user_params.get(name, default))

  def make_temp_dir(self) -> str:
    return tempfile.mkdtemp(prefix='bergman-')

  @staticmethod
  def disc() -> domain.DomainSpec:
    return domain.DomainSpec(kind=domain.DomainKind.BALL, n=1)

  @staticmethod
  def ball(n: int = 2) -> domain.DomainSpec:
    return domain.DomainSpec(kind=domain.DomainKind.BALL, n=n)

  @staticmethod
  def disc_point(x: complex) -> domain.BoundaryPoint:
    """The boundary point of the unit disc at x."""
    return domain.project_to_boundary(
        domain.DomainSpec(kind=domain.DomainKind.BALL, n=1), np.array([x])
    )
