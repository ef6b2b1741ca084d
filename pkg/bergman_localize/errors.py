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

"""Root error classes of the Bergman localization toolkit.

Every module defines its own errors deriving from one of the categories
below. The category decides the exit code of the command-line front end:

  ConfigError  -> 2 (schema violations, invalid parameters)
  NumericError -> 3 (conditioning, no-decay, resolution-insufficient, ...)
  ReportError  -> 4 (missing or unreadable outputs, together with OSError)
"""


class Error(Exception):
  """Base error of the toolkit."""


class ConfigError(Error):
  """An experiment, domain or solver parameter is invalid."""


class NumericError(Error):
  """A numerical procedure failed or its result cannot be trusted."""

  def to_dict(self) -> dict[str, str]:
    """Serializes the error for `error.json`."""
    return {
        'type': type(self).__name__,
        'module': type(self).__module__.rsplit('.', 1)[-1],
        'message': str(self),
    }


class ReportError(Error):
  """Outputs referenced by a manifest are missing or unreadable."""
