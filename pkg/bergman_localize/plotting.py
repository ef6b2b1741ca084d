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

"""Deterministic SVG figures of experiment results.

Figures carry no timestamps and use a fixed hash salt, so the same data always
renders to the same bytes.
"""

from __future__ import annotations

from collections.abc import Sequence
import dataclasses
import io

import matplotlib

matplotlib.use('Agg')

from matplotlib import figure  # pylint: disable=g-import-not-at-top
from matplotlib import pyplot as plt  # pylint: disable=g-import-not-at-top

from bergman_localize import constants

matplotlib.rcParams['svg.hashsalt'] = constants.SVG_HASH_SALT
matplotlib.rcParams['svg.fonttype'] = 'path'


@dataclasses.dataclass(frozen=True)
class RatioCurve:
  """Cap-to-domain ratios of one (t, zeta) pair against the ray offset."""

  label: str
  offsets: Sequence[float]
  kernel_ratios: Sequence[float]
  extremal_ratios: Sequence[float]


@dataclasses.dataclass(frozen=True)
class DecayCurve:
  """Local error of the constructive solver against the power k."""

  label: str
  steps: Sequence[int]
  errors: Sequence[float]
  corrected_errors: Sequence[float]


def _to_svg(fig: figure.Figure) -> str:
  buffer = io.StringIO()
  try:
    fig.savefig(buffer, format='svg', metadata={'Date': None})
  finally:
    plt.close(fig)
  return buffer.getvalue()


def ratio_figure(curves: Sequence[RatioCurve]) -> str:
  """K_cap / K_full and the worst M_cap / M_full against the offset."""
  fig, (kernel_ax, extremal_ax) = plt.subplots(1, 2, figsize=(10, 4))
  for curve in curves:
    kernel_ax.plot(
        curve.offsets, curve.kernel_ratios, marker='.', label=curve.label
    )
    extremal_ax.plot(
        curve.offsets, curve.extremal_ratios, marker='.', label=curve.label
    )
  for ax, title in ((kernel_ax, 'K_cap / K_full'),
                    (extremal_ax, 'max M_cap / M_full')):
    ax.set_xscale('log')
    ax.set_xlabel('offset s')
    ax.set_title(title)
    ax.axhline(1.0, color='grey', linewidth=0.5)
    ax.grid(True, which='both', linewidth=0.3)
  if curves:
    kernel_ax.legend(fontsize='x-small')
  fig.tight_layout()
  return _to_svg(fig)


def decay_figure(curves: Sequence[DecayCurve]) -> str:
  fig, ax = plt.subplots(figsize=(6, 4))
  for curve in curves:
    ax.semilogy(curve.steps, curve.errors, marker='.', label=curve.label)
    ax.semilogy(
        curve.steps, curve.corrected_errors, linestyle='--', marker='x',
        label=f'{curve.label} (jet corrected)',
    )
  ax.set_xlabel('k')
  ax.set_ylabel('relative L2 error on the inner cap')
  ax.grid(True, which='both', linewidth=0.3)
  if curves:
    ax.legend(fontsize='x-small')
  fig.tight_layout()
  return _to_svg(fig)


def theta_figure(curve: Sequence[tuple[float, float]]) -> str:
  """theta_min against eps."""
  fig, ax = plt.subplots(figsize=(6, 4))
  if curve:
    epsilons, thetas = zip(*curve)
    ax.plot(epsilons, thetas, marker='o')
  ax.set_xscale('log')
  ax.set_xlabel('eps')
  ax.set_ylabel('theta_min(eps)')
  ax.grid(True, which='both', linewidth=0.3)
  fig.tight_layout()
  return _to_svg(fig)
