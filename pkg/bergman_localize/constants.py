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

"""Constants shared by the Bergman localization toolkit."""

import enum

import immutabledict

VERSION = '1.0.0'

# Every file written by the toolkit carries this `format_version`.
FORMAT_VERSION = 1

# Boundary projection.
BOUNDARY_TOLERANCE = 1e-10
NEWTON_MAX_ITERATIONS = 50
BOUNDARY_MAX_ATTEMPTS_FACTOR = 4

# Relative enlargement of the closure's bounding box for default boxes.
BOX_MARGIN = 0.05

# Gram systems.
PIVOT_FLOOR = 1e-12
INDEFINITE_PIVOT = -1e-8
GRAM_CHUNK_SIZE = 32768
CONVERGENCE_TOLERANCE = 1e-4
# Largest extrapolated relative truncation tail of K at a resolved point.
RESOLUTION_TOLERANCE = 2e-2
MONOTONICITY_SLACK = 1e-10
RELIABILITY_MESH_FACTOR = 2.0
MAX_BASIS_FRACTION = 0.1
DEFAULT_DEGREE = immutabledict.immutabledict({1: 20, 2: 10})
DEFAULT_QUAD_COUNT = immutabledict.immutabledict({1: 200_000, 2: 1_000_000})

# Cap connectivity.
CONNECTIVITY_RESOLUTION = 64

# Peak functions.
DEFAULT_PEAK_SCALE = 2.0
ETA2_RATIO = 0.5
ETA_GRID_SIZE = 64

# Extension.
DEFAULT_MU = 1e-6
LSTSQ_CUTOFF = 1e-12
CONSTRAINT_RANK_TOLERANCE = 1e-12
CAUCHY_BANDWIDTH = 3.0
# Target-by-source entries evaluated per Cauchy transform block.
CAUCHY_BLOCK_ELEMENTS = 1 << 22
DEFAULT_K_MAX = 40
STAGNATION_STEPS = 5
DEFAULT_POLE_OFFSETS = (0.02, 0.05, 0.1)

# Localization.
OFFSET_LEVELS = 12
MAX_UNRELIABLE_FRACTION = 0.5
SANDWICH_TOLERANCE = 1e-10
DEFAULT_EPSILONS = (0.1, 0.25, 0.5, 1.0)

# Command line.
CACHE_ENV_VAR = 'BERGMAN_LOCALIZE_CACHE'
SVG_HASH_SALT = 'bergman-localize'
MANIFEST_FILE_NAME = 'manifest.json'
ERROR_FILE_NAME = 'error.json'


@enum.unique
class Command(enum.Enum):
  """Commands of the `bergman-localize` front end."""

  KERNEL = 'kernel'
  METRIC = 'metric'
  PEAK_CHECK = 'peak-check'
  EXTEND = 'extend'
  LOCALIZE = 'localize'
  REPORT = 'report'


@enum.unique
class Solver(enum.Enum):
  """Extension solvers."""

  VARIATIONAL = 'variational'
  CONSTRUCTIVE = 'constructive'


@enum.unique
class ExitCode(enum.IntEnum):
  """Exit codes of the command-line front end."""

  OK = 0
  CONFIG_ERROR = 2
  NUMERIC_ERROR = 3
  IO_ERROR = 4
