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

"""Tests of experiment configs and the `bergman-localize` front end."""

import copy
import json
import os
import shutil

from absl import flags
from absl.testing import flagsaver
from mobly import asserts
from mobly import test_runner

from bergman_localize import cli
from bergman_localize import constants
from bergman_localize import domain
from bergman_localize import errors
from bergman_localize import experiment_config
from bergman_localize import plotting
from bergman_localize.lib import utils
from testing import bergman_base_test
from testing.utils import oracle_utils

_KERNEL_CONFIG = {
    'format_version': 1,
    'command': 'kernel',
    'domain': {'kind': 'ball', 'n': 1},
    'numeric': {
        'degree': 12,
        'quad_count': 50_000,
        'seeds': {'quadrature': 7, 'boundary': 11},
    },
    'evaluation': {'points': [[[0.0, 0.0]], [[0.3, 0.0]]]},
}


class CliTest(bergman_base_test.BergmanBaseTest):
  """Runs the commands on small configs in a scratch directory."""

  def setup_class(self) -> None:
    super().setup_class()
    flags.FLAGS.mark_as_parsed()

  def setup_test(self) -> None:
    self.root = self.make_temp_dir()

  def teardown_test(self) -> None:
    shutil.rmtree(self.root, ignore_errors=True)

  def _write_config(self, name: str, data: dict) -> str:
    path = os.path.join(self.root, name)
    with open(path, 'w', encoding='utf-8') as f:
      json.dump(data, f)
    return path

  def _run_kernel(self, name: str, **overrides) -> cli.RunManifest:
    data = copy.deepcopy(_KERNEL_CONFIG)
    data.update(overrides)
    config = experiment_config.from_dict(data)
    return cli.run_experiment(
        config, data, out_dir=os.path.join(self.root, name),
        cache_dir=os.path.join(self.root, 'cache'),
    )

  def test_config_parsing(self) -> None:
    config = experiment_config.from_dict(copy.deepcopy(_KERNEL_CONFIG))
    asserts.assert_equal(config.command, constants.Command.KERNEL)
    asserts.assert_equal(config.domain.kind, domain.DomainKind.BALL)
    asserts.assert_equal(config.evaluation.points[1][0], complex(0.3, 0.0))
    asserts.assert_equal(config.numeric.seeds.peak, 0)
    asserts.assert_equal(config.domain.to_spec().n, 1)

  def test_missing_field_is_named(self) -> None:
    data = copy.deepcopy(_KERNEL_CONFIG)
    del data['numeric']['degree']
    with asserts.assert_raises_regex(
        experiment_config.ConfigError, r'numeric\.degree'
    ):
      experiment_config.from_dict(data)

  def test_invalid_configs(self) -> None:
    unknown = copy.deepcopy(_KERNEL_CONFIG)
    unknown['numeric']['degre'] = 3
    bad_kind = copy.deepcopy(_KERNEL_CONFIG)
    bad_kind['domain']['kind'] = 'torus'
    no_family = copy.deepcopy(_KERNEL_CONFIG)
    no_family['command'] = 'localize'
    old = copy.deepcopy(_KERNEL_CONFIG)
    old['format_version'] = 0
    for data in (unknown, bad_kind, no_family, old):
      with asserts.assert_raises(errors.ConfigError):
        experiment_config.from_dict(data)

  def test_kernel_command(self) -> None:
    manifest = self._run_kernel('run')
    asserts.assert_equal(manifest.command, 'kernel')
    asserts.assert_equal(sorted(manifest.files), ['kernel.csv'])
    asserts.assert_equal([t['status'] for t in manifest.tasks], ['ok', 'ok'])
    header, rows = utils.read_csv(os.path.join(self.root, 'run', 'kernel.csv'))
    asserts.assert_equal(header[0], 'format_version')
    asserts.assert_equal(len(rows), 2)
    kernel = float(rows[0]['kernel'])
    asserts.assert_true(
        oracle_utils.relative_error(kernel, oracle_utils.disc_kernel(0.0))
        < 1e-2,
        f'K(0) = {kernel}',
    )
    asserts.assert_equal(rows[0]['unreliable'], 'false')
    loaded = cli.RunManifest.load(
        os.path.join(self.root, 'run', constants.MANIFEST_FILE_NAME)
    )
    asserts.assert_equal(loaded.files, manifest.files)

  def test_runs_are_reproducible(self) -> None:
    cold = self._run_kernel('cold')
    warm = self._run_kernel('warm')
    asserts.assert_equal(cold.config_hash, warm.config_hash)
    asserts.assert_equal(cold.files, warm.files)

  def test_numeric_failure_writes_error_file(self) -> None:
    outside = {'points': [[[1.5, 0.0]]]}
    with asserts.assert_raises(errors.NumericError):
      self._run_kernel('failed', evaluation=outside)
    out_dir = os.path.join(self.root, 'failed')
    with open(os.path.join(out_dir, constants.ERROR_FILE_NAME)) as f:
      failure = json.load(f)
    asserts.assert_equal(failure['type'], 'DomainOfValidityError')
    manifest = cli.RunManifest.load(
        os.path.join(out_dir, constants.MANIFEST_FILE_NAME)
    )
    asserts.assert_equal(manifest.tasks[-1]['status'], 'failed')

  def test_exit_codes(self) -> None:
    good = self._write_config('kernel.json', _KERNEL_CONFIG)
    broken = copy.deepcopy(_KERNEL_CONFIG)
    del broken['numeric']['seeds']
    broken_path = self._write_config('broken.json', broken)
    outside = copy.deepcopy(_KERNEL_CONFIG)
    outside['evaluation']['points'] = [[[1.5, 0.0]]]
    outside_path = self._write_config('outside.json', outside)
    out = os.path.join(self.root, 'out')
    cases = (
        (good, ['prog', 'kernel'], constants.ExitCode.OK),
        (good, ['prog', 'metric'], constants.ExitCode.CONFIG_ERROR),
        (good, ['prog', 'knl'], constants.ExitCode.CONFIG_ERROR),
        (broken_path, ['prog', 'kernel'], constants.ExitCode.CONFIG_ERROR),
        (outside_path, ['prog', 'kernel'], constants.ExitCode.NUMERIC_ERROR),
        (os.path.join(self.root, 'absent.json'), ['prog', 'kernel'],
         constants.ExitCode.IO_ERROR),
    )
    for path, argv, expected in cases:
      with flagsaver.flagsaver(config=path, out=out, jobs=1):
        asserts.assert_equal(cli.main(argv), expected, f'{path} {argv}')
    with flagsaver.flagsaver(config=None):
      asserts.assert_equal(
          cli.main(['prog', 'kernel']), constants.ExitCode.CONFIG_ERROR
      )

  def test_report_merges_runs(self) -> None:
    self._run_kernel('first')
    self._run_kernel('second')
    data = {
        'format_version': 1,
        'command': 'report',
        'manifests': ['first/manifest.json', 'second/manifest.json'],
    }
    manifest = cli.run_experiment(
        experiment_config.from_dict(data), data,
        out_dir=os.path.join(self.root, 'report'), base_dir=self.root,
    )
    asserts.assert_equal(
        sorted(manifest.files), ['merged_kernel.csv', 'summary.html']
    )
    header, rows = utils.read_csv(
        os.path.join(self.root, 'report', 'merged_kernel.csv')
    )
    asserts.assert_equal(header[:2], ['format_version', 'run'])
    asserts.assert_equal(sorted({row['run'] for row in rows}), ['0', '1'])
    with open(os.path.join(self.root, 'report', 'summary.html')) as f:
      asserts.assert_true('2 run(s)' in f.read(), 'Run count missing.')

  def test_report_names_missing_outputs(self) -> None:
    self._run_kernel('first')
    os.remove(os.path.join(self.root, 'first', 'kernel.csv'))
    data = {
        'format_version': 1,
        'command': 'report',
        'manifests': ['first/manifest.json', 'absent/manifest.json'],
    }
    with asserts.assert_raises(cli.MissingOutputsError) as context:
      cli.run_experiment(
          experiment_config.from_dict(data), data,
          out_dir=os.path.join(self.root, 'report'), base_dir=self.root,
      )
    missing = context.exception.missing
    asserts.assert_equal(len(missing), 2)
    asserts.assert_true(missing[0].endswith('first/kernel.csv'),
                        f'{missing}')
    asserts.assert_true(missing[1].endswith('absent/manifest.json'),
                        f'{missing}')

  def test_empty_report(self) -> None:
    data = {'format_version': 1, 'command': 'report', 'manifests': []}
    manifest = cli.run_experiment(
        experiment_config.from_dict(data), data,
        out_dir=os.path.join(self.root, 'report'),
    )
    asserts.assert_equal(sorted(manifest.files), ['summary.html'])

  def test_every_command_runs_and_reports(self) -> None:
    seeds = {'quadrature': 7, 'boundary': 11, 'peak': 3}
    cap = {'radius': 0.5, 'inner_radius': 0.2, 'w_offset': 0.05,
           'zeta': [[1.0, 0.0]], 'delta': 0.1}
    configs = {
        'metric': {
            'command': 'metric',
            'domain': {'kind': 'ball', 'n': 1},
            'numeric': {'degree': 10, 'quad_count': 20_000, 'seeds': seeds},
            'evaluation': {'points': [[[0.2, 0.1]]],
                           'directions': [[[1.0, 0.0]]]},
        },
        'peak-check': {
            'command': 'peak-check',
            'family': {'kind': 'ellipsoid', 'n': 2, 't_min': 1.0,
                       't_max': 2.0, 't_values': [1.0, 2.0],
                       'boundary_count': 1},
            'numeric': {'degree': 2, 'quad_count': 1000, 'seeds': seeds,
                        'sample_count': 2000},
        },
        'extend': {
            'command': 'extend',
            'domain': {'kind': 'ball', 'n': 1},
            'numeric': {'degree': 6, 'quad_count': 20_000, 'seeds': seeds,
                        'degrees': [4], 'mu_values': [1e-6, 1e-2],
                        'k_max': 2, 'sample_count': 2000},
            'problems': [
                cap,
                {**cap, 'input': 'constant'},
                {**cap, 'input': 'kernel'},
                {**cap, 'solver': 'constructive'},
            ],
        },
        'localize': {
            'command': 'localize',
            'family': {'kind': 'perturbed_disc', 'n': 1, 't_min': 0.0,
                       't_max': 0.2, 't_values': [0.0, 0.2],
                       'params': {'m': 2}, 'boundary_count': 1},
            'numeric': {'degree': 6, 'quad_count': 20_000, 'seeds': seeds,
                        'radius': 0.8, 'offset_levels': 4,
                        'epsilons': [0.25, 1.0]},
        },
    }
    expected = {
        'metric': ['metric.csv'],
        'peak-check': ['peak_check.csv', 'peak_summary.json'],
        'extend': ['extend_0.json', 'extend_1.json', 'extend_2.json',
                   'extend_3.json', 'extend_decay.svg',
                   'extend_summary.csv'],
        'localize': ['localize_ratios.csv', 'localize_ratios.svg',
                     'localize_theta.svg', 'uniformity.json'],
    }
    for name, data in configs.items():
      manifest = cli.run_experiment(
          experiment_config.from_dict(data), data,
          out_dir=os.path.join(self.root, name), jobs=self.jobs,
      )
      asserts.assert_equal(sorted(manifest.files), expected[name], name)
    _, rows = utils.read_csv(
        os.path.join(self.root, 'extend', 'extend_summary.csv')
    )
    asserts.assert_equal(
        [row['solver'] for row in rows],
        ['variational'] * 3 + ['constructive'],
    )
    for row in rows:
      asserts.assert_true(float(row['jet_residual']) < 1e-6, f'{row}')
    with open(os.path.join(self.root, 'extend', 'extend_0.json')) as f:
      output = json.load(f)
    asserts.assert_equal(len(output['mu_sweep']), 2)
    asserts.assert_equal(len(output['degree_sweep']), 1)
    with open(os.path.join(self.root, 'localize', 'uniformity.json')) as f:
      uniformity = json.load(f)
    asserts.assert_equal(
        [v['epsilon'] for v in uniformity['verdicts']], [0.25, 1.0]
    )
    asserts.assert_true(all(s['passed'] for s in uniformity['sandwich']),
                        f'{uniformity["sandwich"]}')
    report = {
        'command': 'report',
        'manifests': [f'{name}/manifest.json' for name in configs],
    }
    manifest = cli.run_experiment(
        experiment_config.from_dict(report), report,
        out_dir=os.path.join(self.root, 'report'), base_dir=self.root,
    )
    asserts.assert_equal(
        sorted(manifest.files),
        ['merged_extend_summary.csv', 'merged_localize_ratios.csv',
         'merged_metric.csv', 'merged_peak_check.csv', 'summary.html'],
    )
    with open(os.path.join(self.root, 'report', 'summary.html')) as f:
      page = f.read()
    asserts.assert_in('<p>4 run(s).</p>', page)
    asserts.assert_true(page.count('<svg') >= 4, 'Figures missing from summary.')

  def test_figures_are_deterministic(self) -> None:
    curve = [(0.1, 0.05), (0.25, 0.1), (0.5, 0.2), (1.0, 0.4)]
    first = plotting.theta_figure(curve)
    asserts.assert_equal(first, plotting.theta_figure(curve))
    asserts.assert_true(first.lstrip().startswith('<?xml'), first[:40])


if __name__ == '__main__':
  test_runner.main()
