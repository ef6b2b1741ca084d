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

"""Command-line front end of the Bergman localization toolkit.

Usage:

  bergman-localize kernel|metric|peak-check|extend|localize|report \
      --config <path> [--cache <dir>] [--out <dir>] [--jobs N]

Each command writes its outputs atomically into the output directory together
with `manifest.json`, which lists every emitted file with its SHA-256.

Exit codes: 0 success, 2 config error, 3 numeric failure (the error is also
written to `error.json`), 4 I/O or report error.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
import dataclasses
import glob
import html
import json
import logging
import os
from typing import Any

from absl import app
from absl import flags
import dacite
from immutabledict import immutabledict
from mobly import logger as mobly_logger
from mobly import utils as mobly_utils
import numpy as np

from bergman_localize import bergman
from bergman_localize import constants
from bergman_localize import domain
from bergman_localize import errors
from bergman_localize import experiment_config
from bergman_localize import extend
from bergman_localize import gram_cache
from bergman_localize import localize
from bergman_localize import peak
from bergman_localize import plotting
from bergman_localize.lib import utils

_CONFIG = flags.DEFINE_string('config', None, 'Path of the experiment config.')
_CACHE = flags.DEFINE_string(
    'cache', None,
    'Gram cache directory. Takes precedence over the '
    f'{constants.CACHE_ENV_VAR} environment variable and the config.',
)
_OUT = flags.DEFINE_string(
    'out', None, 'Output directory. Takes precedence over the config.'
)
_JOBS = flags.DEFINE_integer(
    'jobs', None, 'Worker pool size. Defaults to the number of cores.',
    lower_bound=1,
)

# Error messages used in this module.
_USAGE_MSG = (
    'Usage: bergman-localize '
    f'{"|".join(c.value for c in constants.Command)} --config <path> '
    '[--cache <dir>] [--out <dir>] [--jobs N]'
)
_COMMAND_MISMATCH_MSG = 'Command does not match the config'
_NO_OUTPUT_DIR_MSG = 'Missing required field: output_dir'
_MISSING_OUTPUTS_MSG = 'Manifests reference missing outputs'
_INVALID_MANIFEST_MSG = 'Invalid manifest'

_SUMMARY_FILE_NAME = 'summary.html'


class Error(errors.Error):
  """Base error of the command-line front end."""


class UsageError(Error, errors.ConfigError):
  """The command line is malformed."""


class CommandMismatchError(Error, errors.ConfigError):
  """The positional command differs from the config's command."""


class MissingOutputsError(Error, errors.ReportError):
  """Manifests reference outputs that do not exist."""

  def __init__(self, missing: Sequence[str]):
    super().__init__(f'{_MISSING_OUTPUTS_MSG}: {", ".join(missing)}')
    self.missing = list(missing)


class InvalidManifestError(Error, errors.ReportError):
  """A manifest cannot be parsed."""


@dataclasses.dataclass
class RunManifest:
  """Record of one run.

  Attributes:
    command: The executed command.
    config_hash: SHA-256 of the canonical JSON of the config.
    version: The toolkit version.
    started_ms: Start time, milliseconds since the epoch.
    finished_ms: End time, milliseconds since the epoch.
    tasks: Per-task records {name, status, error}.
    files: Output file name (relative to the output directory) to SHA-256.
    format_version: The manifest format version.
  """

  command: str
  config_hash: str
  version: str
  started_ms: int
  finished_ms: int = 0
  tasks: list[dict[str, Any]] = dataclasses.field(default_factory=list)
  files: dict[str, str] = dataclasses.field(default_factory=dict)
  format_version: int = constants.FORMAT_VERSION

  def to_dict(self) -> dict[str, Any]:
    return dataclasses.asdict(self)

  @classmethod
  def load(cls, path: str) -> RunManifest:
    """Reads a manifest file.

    Raises:
      InvalidManifestError: The file is not a manifest of this format.
      OSError: The file cannot be read.
    """
    with open(path, 'r', encoding='utf-8') as f:
      try:
        data = json.load(f)
      except json.JSONDecodeError as err:
        raise InvalidManifestError(
            f'{_INVALID_MANIFEST_MSG}: {path}: {err}'
        ) from err
    try:
      manifest = dacite.from_dict(
          data_class=cls, data=data, config=dacite.Config(strict=True)
      )
    except dacite.DaciteError as err:
      raise InvalidManifestError(
          f'{_INVALID_MANIFEST_MSG}: {path}: {err}'
      ) from err
    if manifest.format_version != constants.FORMAT_VERSION:
      raise InvalidManifestError(
          f'{_INVALID_MANIFEST_MSG}: {path}: format_version='
          f'{manifest.format_version}'
      )
    return manifest


@dataclasses.dataclass
class _RunContext:
  """Output directory, cache and worker pool of one run."""

  config: experiment_config.ExperimentConfig
  out_dir: str
  base_dir: str
  cache: gram_cache.GramCache | None
  jobs: int
  manifest: RunManifest
  log: mobly_logger.PrefixLoggerAdapter

  def path(self, name: str) -> str:
    return os.path.join(self.out_dir, name)

  def _record(self, name: str) -> None:
    self.manifest.files[name] = utils.sha256_file(self.path(name))

  def write_csv(
      self, name: str, fieldnames: Sequence[str],
      rows: Sequence[dict[str, Any]],
  ) -> None:
    fieldnames = ['format_version', *fieldnames]
    rows = [{'format_version': constants.FORMAT_VERSION, **r} for r in rows]
    utils.write_csv(self.path(name), fieldnames, rows)
    self._record(name)

  def write_json(self, name: str, obj: Any) -> None:
    utils.write_json(self.path(name), obj)
    self._record(name)

  def write_text(self, name: str, text: str) -> None:
    utils.atomic_write_text(self.path(name), text)
    self._record(name)

  def task(self, name: str, status: str = 'ok', error: str | None = None):
    self.manifest.tasks.append(
        {'name': name, 'status': status, 'error': error}
    )


def _pair(value: complex) -> list[float]:
  return [float(value.real), float(value.imag)]


def _coordinate_fields(prefix: str, n: int) -> list[str]:
  return [f'{prefix}{j}_{part}' for j in range(n) for part in ('re', 'im')]


def _coordinates(prefix: str, z: np.ndarray) -> dict[str, float]:
  values = {}
  for j, c in enumerate(np.asarray(z, dtype=complex).ravel()):
    values[f'{prefix}{j}_re'] = float(c.real)
    values[f'{prefix}{j}_im'] = float(c.imag)
  return values


def _points(points: Sequence[Sequence[complex]], n: int) -> np.ndarray:
  array = np.array(points, dtype=complex)
  if array.ndim != 2 or array.shape[1] != n:
    raise experiment_config.ConfigError(
        f'Points must have {n} coordinates each, got shape {array.shape}.'
    )
  return array


def _run_kernel(ctx: _RunContext) -> None:
  config, numeric = ctx.config, ctx.config.numeric
  spec = config.domain.to_spec()
  points = _points(config.evaluation.points, spec.n)
  degrees = list(numeric.degrees) or [numeric.degree]
  gs = None
  if len(degrees) == 1:
    gs = bergman.assemble_gram(
        spec, domain.Region.full(), bergman.MonomialBasis(spec.n, degrees[0]),
        numeric.quad_count, numeric.seeds.quadrature, cache=ctx.cache,
        max_workers=ctx.jobs,
    )
  rows = []
  for index, z in enumerate(points):
    if gs is not None:
      values = [bergman.kernel_at(gs, z)]
    else:
      values = bergman.degree_sweep(
          spec, domain.Region.full(), z, degrees, numeric.quad_count,
          numeric.seeds.quadrature, cache=ctx.cache, max_workers=ctx.jobs,
      )
    for degree, value in zip(degrees, values):
      rows.append({
          'point': index,
          **_coordinates('z', z),
          'degree': degree,
          'effective_degree': value.degree,
          'kernel': value.value,
          'unreliable': value.unreliable,
          'converged': value.converged,
      })
      if value.unreliable:
        ctx.log.warning('Kernel at point %d is unreliable.', index)
    ctx.task(f'kernel[{index}]')
  ctx.write_csv(
      'kernel.csv',
      ['point', *_coordinate_fields('z', spec.n), 'degree',
       'effective_degree', 'kernel', 'unreliable', 'converged'],
      rows,
  )


def _run_metric(ctx: _RunContext) -> None:
  config, numeric = ctx.config, ctx.config.numeric
  spec = config.domain.to_spec()
  points = _points(config.evaluation.points, spec.n)
  if config.evaluation.directions:
    directions = _points(config.evaluation.directions, spec.n)
  else:
    directions = np.eye(spec.n, dtype=complex)
  gs = bergman.assemble_gram(
      spec, domain.Region.full(), bergman.MonomialBasis(spec.n, numeric.degree),
      numeric.quad_count, numeric.seeds.quadrature, cache=ctx.cache,
      max_workers=ctx.jobs,
  )
  rows = []
  for index, z in enumerate(points):
    evaluation = bergman.evaluate(gs, z, directions)
    for j, x in enumerate(directions):
      rows.append({
          'point': index,
          **_coordinates('z', z),
          'direction': j,
          **_coordinates('x', x),
          'kernel': evaluation.kernel,
          'extremal': float(evaluation.extremal[j]),
          'metric': float(evaluation.metric[j]),
          'metric_log_kernel': bergman.metric_via_log_kernel(gs, z, x),
          'unreliable': evaluation.unreliable,
      })
    ctx.task(f'metric[{index}]')
  ctx.write_csv(
      'metric.csv',
      ['point', *_coordinate_fields('z', spec.n), 'direction',
       *_coordinate_fields('x', spec.n), 'kernel', 'extremal', 'metric',
       'metric_log_kernel', 'unreliable'],
      rows,
  )


def _run_peak_check(ctx: _RunContext) -> None:
  config, numeric = ctx.config, ctx.config.numeric
  family = config.family
  specs = family.members()
  zetas = [
      domain.boundary_points(spec, family.boundary_count, numeric.seeds.boundary)
      for spec in specs
  ]
  certificate = peak.certify(
      specs, numeric.lam, numeric.eta1, numeric.sample_count,
      numeric.seeds.peak, zetas=zetas, max_workers=ctx.jobs,
  )
  members = []
  for spec, member_zetas in zip(specs, zetas):
    samples = domain.sample_interior(
        spec, domain.Region.full(), numeric.sample_count, numeric.seeds.peak
    ).points
    members.extend((spec, zeta, samples) for zeta in member_zetas)
  rows = []
  for pair, (spec, zeta, samples) in zip(certificate.pairs, members):
    radius = peak.power_radius(
        peak.levi_peak(spec, zeta, numeric.lam), numeric.gamma, numeric.eta1,
        samples,
    )
    rows.append({
        't': pair.t,
        'zeta_index': pair.zeta_index,
        **_coordinates('zeta', zeta.zeta),
        'd1': pair.d1,
        'd2': pair.d2,
        'd3': pair.d3,
        'eta': pair.eta,
        'power_k': radius.k,
        'power_theta': radius.theta,
        'passed': pair.passed,
    })
    ctx.task(
        f'peak[t={pair.t},zeta={pair.zeta_index}]',
        'ok' if pair.passed else 'not-certified',
    )
  n = specs[0].n
  ctx.write_csv(
      'peak_check.csv',
      ['t', 'zeta_index', *_coordinate_fields('zeta', n), 'd1', 'd2', 'd3',
       'eta', 'power_k', 'power_theta', 'passed'],
      rows,
  )
  summary = certificate.to_dict()
  summary['gamma'] = numeric.gamma
  ctx.write_json('peak_summary.json', summary)


def _extension_problem(
    spec: domain.DomainSpec,
    zeta: domain.BoundaryPoint,
    problem: experiment_config.ProblemConfig,
) -> extend.ExtensionProblem:
  if problem.input == 'pole':
    return extend.pole_problem(
        spec, zeta, problem.radius, problem.inner_radius, problem.delta,
        problem.w_offset,
    )
  return extend.ExtensionProblem(
      spec=spec,
      zeta=zeta,
      radius=problem.radius,
      inner_radius=problem.inner_radius,
      f=extend.constant_function(spec.n),
      w=domain.inward_ray(spec, zeta, problem.w_offset),
  )


def _summary_row(index: int, result: extend.ExtensionResult) -> dict[str, Any]:
  return {
      'problem': index,
      'solver': result.solver.value,
      'degree': result.degree,
      'mu': result.mu,
      'jet_residual': result.jet_residual,
      'norm_ratio': result.norm_ratio,
      'local_error': result.local_error,
      'steps': result.steps,
      'decay_ratio': None if result.trace is None else result.trace.decay_ratio,
  }


def _run_extend(ctx: _RunContext) -> None:
  config, numeric = ctx.config, ctx.config.numeric
  spec = config.domain.to_spec()
  seeded = [p for p in config.problems if not p.zeta]
  boundary = []
  if seeded:
    boundary = domain.boundary_points(
        spec, max(p.zeta_index for p in seeded) + 1, numeric.seeds.boundary
    )
  rows, curves = [], []
  for index, problem in enumerate(config.problems):
    if problem.zeta:
      zeta = domain.project_to_boundary(spec, np.array(problem.zeta))
    else:
      zeta = boundary[problem.zeta_index]
    prob = _extension_problem(spec, zeta, problem)
    degree = problem.degree or numeric.degree
    systems = extend.extension_systems(
        prob, degree, numeric.quad_count, numeric.seeds.quadrature,
        cache=ctx.cache, max_workers=ctx.jobs,
    )
    if problem.input == 'kernel':
      prob = dataclasses.replace(
          prob,
          f=extend.PolynomialFunction(
              systems.cap.basis,
              bergman.reproducing_coefficients(systems.cap, prob.w),
          ),
      )
    output = {'format_version': constants.FORMAT_VERSION}
    if problem.solver is constants.Solver.CONSTRUCTIVE:
      pf = peak.normalize_peak(peak.levi_peak(spec, zeta, numeric.lam))
      certificate = peak.certify(
          [spec], numeric.lam, prob.radius / 2.0, numeric.sample_count,
          numeric.seeds.peak, zetas=[[zeta]], normalized=True,
          max_workers=ctx.jobs,
      )
      result, trace, _ = extend.constructive_extend_1d(
          prob, pf, systems, k_max=numeric.k_max,
          epsilon=numeric.epsilon_target,
          peak_constants=certificate.pairs[0], max_workers=ctx.jobs,
      )
      curves.append(plotting.DecayCurve(
          label=f'problem {index}', steps=trace.steps,
          errors=trace.cap_errors, corrected_errors=trace.corrected_errors,
      ))
    else:
      result = extend.variational_extend(
          prob, systems.full, systems.cap, systems.inner, numeric.mu
      )
      output['mu_sweep'] = [
          _summary_row(index, r)
          for r in extend.mu_sweep(prob, systems, numeric.mu_values)
      ]
      refinement = []
      for refined_degree in numeric.degrees:
        refined = extend.extension_systems(
            prob, refined_degree, numeric.quad_count,
            numeric.seeds.quadrature, cache=ctx.cache, max_workers=ctx.jobs,
        )
        refinement.append(_summary_row(index, extend.variational_extend(
            prob, refined.full, refined.cap, refined.inner, numeric.mu
        )))
      output['degree_sweep'] = refinement
    output['problem'] = prob.to_dict()
    output['result'] = result.to_dict()
    ctx.write_json(f'extend_{index}.json', output)
    rows.append(_summary_row(index, result))
    ctx.task(f'extend[{index}]')
  ctx.write_csv(
      'extend_summary.csv',
      ['problem', 'solver', 'degree', 'mu', 'jet_residual', 'norm_ratio',
       'local_error', 'steps', 'decay_ratio'],
      rows,
  )
  if curves:
    ctx.write_text('extend_decay.svg', plotting.decay_figure(curves))


def _ratio_curve(report: localize.LocalizationReport) -> plotting.RatioCurve:
  return plotting.RatioCurve(
      label=f't={report.t:g} zeta={report.zeta_index}',
      offsets=report.offsets,
      kernel_ratios=report.kernel_ratios,
      extremal_ratios=[max(row) for row in report.extremal_ratios],
  )


def _run_localize(ctx: _RunContext) -> None:
  config, numeric = ctx.config, ctx.config.numeric
  family = config.family
  specs = family.members()
  zetas = [
      domain.boundary_points(spec, family.boundary_count, numeric.seeds.boundary)
      for spec in specs
  ]
  offsets = list(numeric.offsets) or localize.default_offsets(
      numeric.radius, numeric.offset_levels
  )
  reports, excluded = localize.family_sweeps(
      specs, zetas, numeric.radius, numeric.degree, numeric.quad_count,
      numeric.seeds.quadrature, offsets=offsets, cache=ctx.cache,
      max_unreliable_fraction=numeric.max_unreliable_fraction,
      max_workers=ctx.jobs,
  )
  for report in reports:
    ctx.task(f'localize[t={report.t},zeta={report.zeta_index}]')
  for entry in excluded:
    ctx.task(
        f'localize[t={entry["t"]},zeta={entry["zeta_index"]}]',
        'excluded', entry['error'],
    )
  sandwich = []
  for report in reports:
    check = localize.sandwich_check(report)
    sandwich.append({
        't': report.t,
        'zeta_index': report.zeta_index,
        'passed': check.passed,
        'applicable': check.applicable,
        'worst_kernel_margin': check.worst_kernel_margin,
        'worst_extremal_margin': check.worst_extremal_margin,
    })
  verdicts = [
      localize.uniformity_from_reports(reports, eps, min(offsets), excluded)
      for eps in numeric.epsilons
  ]
  curve = localize.theta_curve(reports, numeric.epsilons)
  ctx.write_csv(
      'localize_ratios.csv',
      ['t', 'zeta_index', 'offset', 'direction', 'kernel_ratio',
       'extremal_ratio', 'beta_ratio', 'unreliable', 'resolved'],
      [row for report in reports for row in report.rows()],
  )
  ctx.write_json('uniformity.json', {
      'format_version': constants.FORMAT_VERSION,
      'radius': numeric.radius,
      'offsets': offsets,
      'verdicts': [v.to_dict() for v in verdicts],
      'theta_curve': [list(point) for point in curve],
      'sandwich': sandwich,
  })
  ctx.write_text(
      'localize_ratios.svg',
      plotting.ratio_figure([_ratio_curve(r) for r in reports]),
  )
  ctx.write_text('localize_theta.svg', plotting.theta_figure(curve))


def _inline_svg(svg: str) -> str:
  start = svg.find('<svg')
  return svg[start:] if start >= 0 else svg


def _cell(value: Any) -> str:
  if isinstance(value, float):
    return utils.format_float(value)
  return str(value)


def _table(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
  parts = ['<table>', '<tr>']
  parts.extend(f'<th>{html.escape(str(h))}</th>' for h in header)
  parts.append('</tr>')
  for row in rows:
    parts.append('<tr>')
    parts.extend(f'<td>{html.escape(_cell(v))}</td>' for v in row)
    parts.append('</tr>')
  parts.append('</table>')
  return ''.join(parts)


def _csv_table(path: str) -> str:
  header, rows = utils.read_csv(path)
  return _table(header, [[row[h] for h in header] for row in rows])


def _localize_section(run_dir: str, manifest: RunManifest) -> list[str]:
  del manifest
  parts = []
  _, rows = utils.read_csv(os.path.join(run_dir, 'localize_ratios.csv'))
  grouped: dict[tuple[str, str], dict[float, list[float]]] = {}
  for row in rows:
    per_offset = grouped.setdefault((row['t'], row['zeta_index']), {})
    entry = per_offset.setdefault(
        float(row['offset']), [float(row['kernel_ratio']), 0.0]
    )
    entry[1] = max(entry[1], float(row['extremal_ratio']))
  for (t, zeta_index), per_offset in grouped.items():
    offsets = sorted(per_offset)
    curve = plotting.RatioCurve(
        label=f't={t} zeta={zeta_index}',
        offsets=offsets,
        kernel_ratios=[per_offset[s][0] for s in offsets],
        extremal_ratios=[per_offset[s][1] for s in offsets],
    )
    parts.append(f'<h3>t={html.escape(t)}, zeta {html.escape(zeta_index)}</h3>')
    parts.append(_inline_svg(plotting.ratio_figure([curve])))
  with open(os.path.join(run_dir, 'uniformity.json'), encoding='utf-8') as f:
    uniformity = json.load(f)
  parts.append('<h3>theta_min</h3>')
  parts.append(_table(
      ['eps', 'theta_min', 'passed', 'spread', 'excluded'],
      [[v['epsilon'], v['theta_min'], v['passed'], v['spread'],
        len(v['excluded'])] for v in uniformity['verdicts']],
  ))
  parts.append(_inline_svg(plotting.theta_figure(
      [tuple(point) for point in uniformity['theta_curve']]
  )))
  return parts


def _extend_section(run_dir: str, manifest: RunManifest) -> list[str]:
  parts = [_csv_table(os.path.join(run_dir, 'extend_summary.csv'))]
  curves = []
  for name in sorted(manifest.files):
    if not (name.startswith('extend_') and name.endswith('.json')):
      continue
    with open(os.path.join(run_dir, name), encoding='utf-8') as f:
      trace = json.load(f)['result']['trace']
    if trace:
      curves.append(plotting.DecayCurve(
          label=name[:-len('.json')], steps=trace['steps'],
          errors=trace['cap_errors'],
          corrected_errors=trace['corrected_errors'],
      ))
  if curves:
    parts.append(_inline_svg(plotting.decay_figure(curves)))
  return parts


def _peak_section(run_dir: str, manifest: RunManifest) -> list[str]:
  del manifest
  with open(os.path.join(run_dir, 'peak_summary.json'), encoding='utf-8') as f:
    summary = json.load(f)
  return [
      _table(['constant', 'value'], sorted(summary.items())),
      _csv_table(os.path.join(run_dir, 'peak_check.csv')),
  ]


def _table_section(name: str) -> Callable[[str, RunManifest], list[str]]:
  def section(run_dir, manifest):
    del manifest
    return [_csv_table(os.path.join(run_dir, name))]
  return section


_REPORT_SECTIONS = immutabledict({
    constants.Command.KERNEL.value: _table_section('kernel.csv'),
    constants.Command.METRIC.value: _table_section('metric.csv'),
    constants.Command.PEAK_CHECK.value: _peak_section,
    constants.Command.EXTEND.value: _extend_section,
    constants.Command.LOCALIZE.value: _localize_section,
})


def _run_section(index: int, run_dir: str, manifest: RunManifest) -> str:
  parts = [
      f'<h2>Run {index}: {html.escape(manifest.command)}</h2>',
      f'<p>config {html.escape(manifest.config_hash)}, '
      f'version {html.escape(manifest.version)}</p>',
      _table(
          ['task', 'status', 'error'],
          [[t['name'], t['status'], t['error'] or ''] for t in manifest.tasks],
      ),
  ]
  if constants.ERROR_FILE_NAME in manifest.files:
    with open(os.path.join(run_dir, constants.ERROR_FILE_NAME),
              encoding='utf-8') as f:
      failure = json.load(f)
    parts.append(
        f'<p>Failed: {html.escape(failure["type"])}: '
        f'{html.escape(failure["message"])}</p>'
    )
  else:
    section = _REPORT_SECTIONS.get(manifest.command)
    if section is not None:
      parts.extend(section(run_dir, manifest))
  return '\n'.join(parts)


def _run_report(ctx: _RunContext) -> None:
  runs, missing = [], []
  for path in ctx.config.manifests:
    if not os.path.isabs(path):
      path = os.path.join(ctx.base_dir, path)
    if not os.path.exists(path):
      missing.append(path)
      continue
    manifest = RunManifest.load(path)
    run_dir = os.path.dirname(os.path.abspath(path))
    missing.extend(
        os.path.join(run_dir, name) for name in sorted(manifest.files)
        if not os.path.exists(os.path.join(run_dir, name))
    )
    runs.append((run_dir, manifest))
  if missing:
    raise MissingOutputsError(missing)
  merged: dict[str, tuple[list[str], list[dict[str, Any]]]] = {}
  sections = []
  for index, (run_dir, manifest) in enumerate(runs):
    for name in sorted(manifest.files):
      if not name.endswith('.csv'):
        continue
      header, rows = utils.read_csv(os.path.join(run_dir, name))
      fields, merged_rows = merged.setdefault(name, (['run'], []))
      fields.extend(h for h in header if h not in fields)
      merged_rows.extend({'run': index, **row} for row in rows)
    sections.append(_run_section(index, run_dir, manifest))
    ctx.task(f'report[{index}]')
  for name, (fields, rows) in sorted(merged.items()):
    ctx.write_csv(
        f'merged_{name}', [f for f in fields if f != 'format_version'], rows
    )
  page = [
      '<!DOCTYPE html>',
      '<html><head><meta charset="utf-8">',
      '<title>bergman-localize summary</title>',
      '<style>table{border-collapse:collapse}'
      'td,th{border:1px solid #999;padding:2px 6px}</style>',
      '</head><body>',
      f'<h1>bergman-localize {html.escape(constants.VERSION)} summary</h1>',
      f'<p>{len(runs)} run(s).</p>',
      *sections,
      '</body></html>',
      '',
  ]
  ctx.write_text(_SUMMARY_FILE_NAME, '\n'.join(page))


_HANDLERS = immutabledict({
    constants.Command.KERNEL: _run_kernel,
    constants.Command.METRIC: _run_metric,
    constants.Command.PEAK_CHECK: _run_peak_check,
    constants.Command.EXTEND: _run_extend,
    constants.Command.LOCALIZE: _run_localize,
    constants.Command.REPORT: _run_report,
})


def _clear_stale_outputs(out_dir: str) -> None:
  stale = os.path.join(out_dir, constants.ERROR_FILE_NAME)
  if os.path.exists(stale):
    os.remove(stale)
  for path in glob.glob(os.path.join(out_dir, '.tmp-*')):
    os.remove(path)


def run_experiment(
    config: experiment_config.ExperimentConfig,
    raw: dict[str, Any],
    *,
    out_dir: str,
    cache_dir: str | None = None,
    jobs: int = 1,
    base_dir: str | None = None,
) -> RunManifest:
  """Executes a parsed config and writes its outputs and manifest.

  Args:
    config: The parsed config.
    raw: The dict the config was parsed from; its canonical JSON is hashed.
    out_dir: The output directory.
    cache_dir: The Gram cache directory, or None for no cache.
    jobs: The worker pool size.
    base_dir: Directory relative manifest paths are resolved against.

  Returns:
    The manifest.

  Raises:
    errors.ConfigError: Invalid parameters.
    errors.NumericError: A numerical procedure failed; `error.json` and the
      manifest are written before the error propagates.
    errors.ReportError: Missing outputs referenced by manifests.
  """
  command = config.command
  log = mobly_logger.PrefixLoggerAdapter(
      logging.getLogger(),
      {
          mobly_logger.PrefixLoggerAdapter.EXTRA_KEY_LOG_PREFIX: (
              f'[Run|{command.value}]'
          )
      },
  )
  mobly_utils.create_dir(out_dir)
  _clear_stale_outputs(out_dir)
  manifest = RunManifest(
      command=command.value,
      config_hash=utils.sha256_json(raw),
      version=constants.VERSION,
      started_ms=mobly_utils.get_current_epoch_time(),
  )
  ctx = _RunContext(
      config=config,
      out_dir=out_dir,
      base_dir=base_dir or os.getcwd(),
      cache=gram_cache.GramCache(cache_dir) if cache_dir else None,
      jobs=jobs,
      manifest=manifest,
      log=log,
  )
  log.info('Starting with %d worker(s), output %s.', jobs, out_dir)
  try:
    _HANDLERS[command](ctx)
  except errors.NumericError as err:
    log.error('Numeric failure: %s', err)
    ctx.task(command.value, 'failed', f'{type(err).__name__}: {err}')
    failure = err.to_dict()
    failure['format_version'] = constants.FORMAT_VERSION
    if isinstance(err, extend.NoDecayError):
      failure['trace'] = err.trace.to_dict()
    ctx.write_json(constants.ERROR_FILE_NAME, failure)
    _finish(ctx)
    raise
  _finish(ctx)
  if ctx.cache is not None:
    log.info('Gram cache: %d hit(s), %d miss(es).', ctx.cache.hits,
             ctx.cache.misses)
  return manifest


def _finish(ctx: _RunContext) -> None:
  ctx.manifest.finished_ms = mobly_utils.get_current_epoch_time()
  utils.write_json(
      ctx.path(constants.MANIFEST_FILE_NAME), ctx.manifest.to_dict()
  )


def run(
    config_path: str,
    *,
    command: constants.Command | None = None,
    out_dir: str | None = None,
    cache_dir: str | None = None,
    jobs: int = 1,
) -> RunManifest:
  """Loads a config file and runs it.

  The cache directory is taken from `cache_dir`, then the
  BERGMAN_LOCALIZE_CACHE environment variable, then the config. The output
  directory is taken from `out_dir`, then the config.

  Raises:
    CommandMismatchError: `command` differs from the config's command.
  """
  config, raw = experiment_config.load(config_path)
  if command is not None and command is not config.command:
    raise CommandMismatchError(
        f'{_COMMAND_MISMATCH_MSG}: {command.value} != {config.command.value}'
    )
  out_dir = out_dir or config.output_dir
  if not out_dir:
    raise experiment_config.ConfigError(_NO_OUTPUT_DIR_MSG)
  cache_dir = (
      cache_dir or os.environ.get(constants.CACHE_ENV_VAR) or config.cache_dir
  )
  return run_experiment(
      config, raw, out_dir=out_dir, cache_dir=cache_dir, jobs=jobs,
      base_dir=os.path.dirname(os.path.abspath(config_path)),
  )


def main(argv: Sequence[str]) -> int:
  """Entry point for `absl.app.run`; returns the exit code."""
  try:
    if len(argv) != 2 or not _CONFIG.value:
      raise UsageError(_USAGE_MSG)
    try:
      command = constants.Command(argv[1])
    except ValueError as err:
      raise UsageError(f'Unknown command {argv[1]!r}. {_USAGE_MSG}') from err
    manifest = run(
        _CONFIG.value,
        command=command,
        out_dir=_OUT.value,
        cache_dir=_CACHE.value,
        jobs=_JOBS.value or os.cpu_count() or 1,
    )
  except errors.ConfigError as err:
    logging.error('Config error: %s', err)
    return constants.ExitCode.CONFIG_ERROR
  except errors.NumericError as err:
    logging.error('Numeric failure: %s', err)
    return constants.ExitCode.NUMERIC_ERROR
  except (errors.ReportError, OSError) as err:
    logging.error('I/O failure: %s', err)
    return constants.ExitCode.IO_ERROR
  logging.info('Wrote %d file(s).', len(manifest.files))
  return constants.ExitCode.OK


def run_app() -> None:
  app.run(main)
