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

"""Unit test suite of the Bergman localization toolkit."""

from mobly import suite_runner

from testing import bergman_test
from testing import cli_test
from testing import domain_test
from testing import extend_test
from testing import localize_test
from testing import peak_test
from testing import utils_test


if __name__ == '__main__':
  suite_runner.run_suite([
      domain_test.DomainTest,
      bergman_test.BergmanTest,
      peak_test.PeakTest,
      extend_test.ExtendTest,
      localize_test.LocalizeTest,
      cli_test.CliTest,
      utils_test.UtilsTest,
  ])
