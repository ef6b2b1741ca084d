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

"""On-disk cache of assembled Gram matrices.

Each entry is an `.npz` container named after its content key, the SHA-256 of
the canonical JSON of (domain, region, basis, quadrature count, seed, format
version). Entries are written through a temporary file and an atomic rename,
so an interrupted run never leaves a truncated entry behind.
"""

from __future__ import annotations

import io
import logging
import os
from typing import Any

import numpy as np

from bergman_localize import constants
from bergman_localize.lib import utils


class GramCache:
  """A directory of cached Gram matrices."""

  def __init__(self, directory: str):
    self.directory = directory
    self.hits = 0
    self.misses = 0

  def __repr__(self) -> str:
    return f'<GramCache|{self.directory}>'

  @staticmethod
  def key(spec: Any, region: Any, basis: Any, quad_count: int,
          seed: int) -> str:
    """Returns the content key of a Gram matrix."""
    return utils.sha256_json({
        'format_version': constants.FORMAT_VERSION,
        'spec': spec.to_dict(),
        'region': region.to_dict(),
        'basis': basis.to_dict(),
        'quad_count': int(quad_count),
        'seed': int(seed),
    })

  def _path(self, key: str) -> str:
    return os.path.join(self.directory, f'{key}.npz')

  def load(self, key: str) -> np.ndarray | None:
    """Returns the cached matrix, or None on a miss or an unusable entry."""
    path = self._path(key)
    if not os.path.exists(path):
      self.misses += 1
      return None
    try:
      with np.load(path, allow_pickle=False) as entry:
        version = int(entry['format_version'])
        stored_key = str(entry['key'])
        gram = entry['gram']
    except (OSError, KeyError, ValueError) as e:
      logging.warning('Ignoring unreadable cache entry %s: %s', path, e)
      self.misses += 1
      return None
    if version != constants.FORMAT_VERSION or stored_key != key:
      logging.warning('Ignoring stale cache entry %s.', path)
      self.misses += 1
      return None
    self.hits += 1
    logging.debug('Gram cache hit %s.', key)
    return gram

  def store(self, key: str, gram: np.ndarray) -> None:
    """Writes a matrix under its key."""
    buffer = io.BytesIO()
    np.savez(
        buffer,
        format_version=np.array(constants.FORMAT_VERSION),
        key=np.array(key),
        gram=gram,
    )
    utils.atomic_write_bytes(self._path(key), buffer.getvalue())
    logging.debug('Gram cache stored %s.', key)
