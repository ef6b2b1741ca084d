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

"""Experiment configuration files of the `bergman-localize` front end.

Configs are JSON. Example (kernel values on the unit disc):

  {
    "format_version": 1,
    "command": "kernel",
    "domain": {"kind": "ball", "n": 1},
    "numeric": {"degree": 20, "quad_count": 200000,
                "seeds": {"quadrature": 7, "boundary": 11}},
    "evaluation": {"points": [[[0.0, 0.0]], [[0.5, 0.0]]]}
  }

Complex numbers are written as [re, im] pairs; a point of C^n is a list of n
pairs. Unknown fields are rejected and every seed must be given explicitly.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from typing import Any

import dacite

from bergman_localize import constants
from bergman_localize import domain
from bergman_localize import errors

# Error messages used in this module.
_CONFIG_MISSING_REQUIRED_KEY_MSG = 'Missing required field'
_CONFIG_INVALID_VALUE_MSG = 'Invalid value in config'
_CONFIG_UNKNOWN_KEY_MSG = 'Unknown field(s) in config'
_CONFIG_NOT_JSON_MSG = 'Config is not valid JSON'


class ConfigError(errors.ConfigError):
  """The experiment config is invalid."""


@dataclasses.dataclass(frozen=True)
class ParamsConfig:
  """Family parameters: ellipsoid weights, or tau and m of a perturbed disc."""

  weights: list[float] = dataclasses.field(default_factory=list)
  tau: float = 0.0
  m: int = 2


@dataclasses.dataclass(frozen=True)
class DomainConfig:
  """One domain of the catalogue."""

  kind: domain.DomainKind
  n: int
  t: float = 0.0
  params: ParamsConfig = dataclasses.field(default_factory=ParamsConfig)
  box: list[list[float]] | None = None

  def to_spec(self) -> domain.DomainSpec:
    return domain.DomainSpec(
        kind=self.kind,
        n=self.n,
        t=self.t,
        weights=tuple(self.params.weights),
        tau=self.params.tau,
        m=self.params.m,
        box=_box(self.box),
    )


@dataclasses.dataclass(frozen=True)
class FamilyConfig:
  """A one-parameter family sampled at `t_values`."""

  kind: domain.DomainKind
  n: int
  t_min: float
  t_max: float
  t_values: list[float]
  params: ParamsConfig = dataclasses.field(default_factory=ParamsConfig)
  box: list[list[float]] | None = None
  boundary_count: int = 8

  def to_family(self) -> domain.DomainFamily:
    return domain.DomainFamily(
        kind=self.kind,
        n=self.n,
        t_min=self.t_min,
        t_max=self.t_max,
        weights=tuple(self.params.weights),
        m=self.params.m,
        box=_box(self.box),
    )

  def members(self) -> list[domain.DomainSpec]:
    family = self.to_family()
    return [family.member(t) for t in self.t_values]


@dataclasses.dataclass(frozen=True)
class SeedsConfig:
  """Explicit seeds of every random stream."""

  quadrature: int
  boundary: int
  peak: int = 0


@dataclasses.dataclass(frozen=True)
class NumericConfig:
  """Numerical parameters shared by the commands.

  Attributes:
    degree: The basis degree.
    quad_count: The quadrature proposal count.
    seeds: The seeds.
    degrees: Degrees of a kernel sweep or of an extension refinement.
    radius: The cap radius R of localization sweeps.
    offsets: Explicit ray offsets; the geometric grid when empty.
    offset_levels: Levels of the geometric offset grid.
    max_unreliable_fraction: Largest tolerated fraction of unreliable offsets
      per localization sweep.
    epsilons: The eps grid of localization.
    lam: The peak scale.
    eta1: The peak exclusion radius.
    sample_count: Closure samples of peak certification.
    k_max: The largest power of the constructive solver.
    mu: The variational penalty weight.
    mu_values: Penalty weights of a (B)/(C) sweep.
    epsilon_target: Target local error of the constructive solver.
    gamma: The level of the reported power radius of peak functions.
    """

  degree: int
  quad_count: int
  seeds: SeedsConfig
  degrees: list[int] = dataclasses.field(default_factory=list)
  radius: float = 0.5
  offsets: list[float] = dataclasses.field(default_factory=list)
  offset_levels: int = constants.OFFSET_LEVELS
  max_unreliable_fraction: float = constants.MAX_UNRELIABLE_FRACTION
  epsilons: list[float] = dataclasses.field(
      default_factory=lambda: list(constants.DEFAULT_EPSILONS)
  )
  lam: float = constants.DEFAULT_PEAK_SCALE
  eta1: float = 0.5
  sample_count: int = 10_000
  k_max: int = constants.DEFAULT_K_MAX
  mu: float = constants.DEFAULT_MU
  mu_values: list[float] = dataclasses.field(default_factory=list)
  epsilon_target: float = 1e-2
  gamma: float = 0.25


@dataclasses.dataclass(frozen=True)
class EvaluationConfig:
  """Points and directions of the kernel and metric commands."""

  points: list[list[complex]]
  directions: list[list[complex]] = dataclasses.field(default_factory=list)


@dataclasses.dataclass(frozen=True)
class ProblemConfig:
  """One extension problem.

  Attributes:
    radius: The outer cap radius R.
    inner_radius: The inner cap radius rho.
    w_offset: Distance of w from zeta along the inward normal.
    zeta: A point projected onto the boundary to give zeta. When empty,
      zeta is taken from the seeded boundary points.
    zeta_index: Index into the seeded boundary points of the domain.
    delta: Pole offset along the outward normal (input `pole`).
    input: `pole`, `constant` or `kernel` (the outer-cap reproducing kernel
      at w).
    solver: `variational` or `constructive`.
    degree: Overrides the numeric degree.
  """

  radius: float
  inner_radius: float
  w_offset: float
  zeta: list[complex] = dataclasses.field(default_factory=list)
  zeta_index: int = 0
  delta: float = constants.DEFAULT_POLE_OFFSETS[0]
  input: str = 'pole'
  solver: constants.Solver = constants.Solver.VARIATIONAL
  degree: int | None = None

  def __post_init__(self):
    if self.input not in ('pole', 'constant', 'kernel'):
      raise ConfigError(f'{_CONFIG_INVALID_VALUE_MSG}: input={self.input}')


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
  """A validated experiment config."""

  command: constants.Command
  numeric: NumericConfig | None = None
  domain: DomainConfig | None = None
  family: FamilyConfig | None = None
  evaluation: EvaluationConfig | None = None
  problems: list[ProblemConfig] = dataclasses.field(default_factory=list)
  manifests: list[str] = dataclasses.field(default_factory=list)
  output_dir: str | None = None
  cache_dir: str | None = None
  format_version: int = constants.FORMAT_VERSION

  def __post_init__(self):
    if self.format_version != constants.FORMAT_VERSION:
      raise ConfigError(
          f'{_CONFIG_INVALID_VALUE_MSG}: format_version={self.format_version}'
      )
    command = self.command
    if command is constants.Command.REPORT:
      return
    if self.numeric is None:
      raise ConfigError(f'{_CONFIG_MISSING_REQUIRED_KEY_MSG}: numeric')
    needs_domain = (
        constants.Command.KERNEL, constants.Command.METRIC,
        constants.Command.EXTEND,
    )
    if command in needs_domain and self.domain is None:
      raise ConfigError(f'{_CONFIG_MISSING_REQUIRED_KEY_MSG}: domain')
    needs_family = (constants.Command.PEAK_CHECK, constants.Command.LOCALIZE)
    if command in needs_family and self.family is None:
      raise ConfigError(f'{_CONFIG_MISSING_REQUIRED_KEY_MSG}: family')
    needs_points = (constants.Command.KERNEL, constants.Command.METRIC)
    if command in needs_points and self.evaluation is None:
      raise ConfigError(f'{_CONFIG_MISSING_REQUIRED_KEY_MSG}: evaluation')
    if command is constants.Command.EXTEND and not self.problems:
      raise ConfigError(f'{_CONFIG_MISSING_REQUIRED_KEY_MSG}: problems')


def _box(box: list[list[float]] | None) -> domain.Box:
  if not box:
    return ()
  return tuple((float(lo), float(hi)) for lo, hi in box)


def _complex_converter(value: Any) -> complex:
  """Converts [re, im] pairs, numbers and numeric strings to complex."""
  if isinstance(value, (list, tuple)) and len(value) == 2:
    return complex(float(value[0]), float(value[1]))
  if isinstance(value, (int, float, complex)) and not isinstance(value, bool):
    return complex(value)
  if isinstance(value, str):
    return complex(value.replace(' ', ''))
  raise ValueError(f'Invalid value for complex: {value}')


def from_dict(data: dict[str, Any]) -> ExperimentConfig:
  """Parses and validates a config dict.

  Raises:
    ConfigError: The config violates the schema; the message names the
      offending field path.
  """
  type_converters = {
      float: float,
      complex: _complex_converter,
  }
  try:
    return dacite.from_dict(
        data_class=ExperimentConfig,
        data=data,
        config=dacite.Config(
            type_hooks=type_converters,
            cast=[constants.Command, constants.Solver, domain.DomainKind],
            strict=True,
        ),
    )
  except dacite.exceptions.MissingValueError as err:
    raise ConfigError(
        f'{_CONFIG_MISSING_REQUIRED_KEY_MSG}: {err.field_path}'
    ) from err
  except dacite.exceptions.UnexpectedDataError as err:
    raise ConfigError(
        f'{_CONFIG_UNKNOWN_KEY_MSG}: {sorted(err.keys)}'
    ) from err
  except dacite.exceptions.WrongTypeError as err:
    raise ConfigError(
        f'{_CONFIG_INVALID_VALUE_MSG}: {err.field_path}={err.value!r}'
    ) from err
  except (dacite.DaciteError, ValueError, TypeError) as err:
    raise ConfigError(f'{_CONFIG_INVALID_VALUE_MSG}: {err}') from err


def load(path: str) -> tuple[ExperimentConfig, dict[str, Any]]:
  """Reads a config file.

  Returns:
    The parsed config and the raw dict it was parsed from (for hashing).

  Raises:
    ConfigError: The file is not JSON or violates the schema.
    OSError: The file cannot be read.
  """
  logging.debug('Loading config: %s', path)
  with open(path, 'r', encoding='utf-8') as f:
    text = f.read()
  try:
    data = json.loads(text)
  except json.JSONDecodeError as err:
    raise ConfigError(f'{_CONFIG_NOT_JSON_MSG}: {path}: {err}') from err
  if not isinstance(data, dict):
    raise ConfigError(f'{_CONFIG_NOT_JSON_MSG}: {path}: not an object')
  return from_dict(data), data
