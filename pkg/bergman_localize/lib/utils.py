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

"""Common utils used across the Bergman localization toolkit."""

from __future__ import annotations

from collections.abc import Callable, Iterable, Sequence
import csv
import hashlib
import io
import json
import logging
import os
import tempfile
from typing import Any, TypeVar

from mobly import utils as mobly_utils

_T = TypeVar('_T')

_HASH_CHUNK_BYTES = 1 << 20


def format_float(value: float) -> str:
  """Formats a float with the shortest round-trip decimal representation."""
  return repr(float(value))


def canonical_json(obj: Any) -> str:
  """Dumps `obj` as JSON with sorted keys and no insignificant whitespace."""
  return json.dumps(obj, sort_keys=True, separators=(',', ':'))


def sha256_json(obj: Any) -> str:
  """Returns the hex SHA-256 digest of the canonical JSON of `obj`."""
  return hashlib.sha256(canonical_json(obj).encode('utf-8')).hexdigest()


def sha256_file(path: str) -> str:
  """Returns the hex SHA-256 digest of the file content."""
  digest = hashlib.sha256()
  with open(path, 'rb') as f:
    for chunk in iter(lambda: f.read(_HASH_CHUNK_BYTES), b''):
      digest.update(chunk)
  return digest.hexdigest()


def atomic_write_bytes(path: str, data: bytes) -> None:
  """Writes `data` to `path` through a temporary file and a rename.

  Args:
    path: The destination file path. Its directory is created if needed.
    data: The bytes to write.
  """
  directory = os.path.dirname(os.path.abspath(path))
  mobly_utils.create_dir(directory)
  fd, tmp_path = tempfile.mkstemp(dir=directory, prefix='.tmp-')
  try:
    with os.fdopen(fd, 'wb') as f:
      f.write(data)
    os.replace(tmp_path, path)
  except BaseException:
    if os.path.exists(tmp_path):
      os.remove(tmp_path)
    raise


def atomic_write_text(path: str, text: str) -> None:
  """Writes UTF-8 `text` to `path` atomically."""
  atomic_write_bytes(path, text.encode('utf-8'))


def write_json(path: str, obj: Any) -> None:
  """Writes `obj` as indented JSON with sorted keys, atomically."""
  atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=2) + '\n')


def parallel_map(
    func: Callable[..., _T],
    param_list: Sequence[Sequence[Any]],
    max_workers: int = 1,
) -> list[_T]:
  """Runs `func` over `param_list` and returns the results in input order.

  With more than one worker the calls go through Mobly's
  `concurrent_exec`. Exceptions are re-raised in input order, so the first
  failing parameter set decides which error the caller sees.

  Args:
    func: The function to call.
    param_list: One argument sequence per call.
    max_workers: The worker pool size.

  Returns:
    The return values of `func`, in the order of `param_list`.
  """
  if max_workers <= 1 or len(param_list) <= 1:
    return [func(*params) for params in param_list]
  results = mobly_utils.concurrent_exec(
      func,
      [list(params) for params in param_list],
      max_workers=max_workers,
      raise_on_exception=False,
  )
  for result in results:
    if isinstance(result, Exception):
      raise result
  return results


def collect_map(
    func: Callable[..., _T],
    param_list: Sequence[Sequence[Any]],
    max_workers: int = 1,
) -> list[_T | Exception]:
  """Like `parallel_map` but returns exceptions in place of results."""
  if max_workers <= 1 or len(param_list) <= 1:
    results = []
    for params in param_list:
      try:
        results.append(func(*params))
      except Exception as e:  # pylint: disable=broad-except
        logging.warning('Call with %s failed: %s', params, e)
        results.append(e)
    return results
  return mobly_utils.concurrent_exec(
      func,
      [list(params) for params in param_list],
      max_workers=max_workers,
      raise_on_exception=False,
  )


def chunked(count: int, chunk_size: int) -> Iterable[slice]:
  """Yields consecutive slices covering `range(count)`."""
  for start in range(0, count, chunk_size):
    yield slice(start, min(start + chunk_size, count))


def _csv_cell(value: Any) -> str:
  if isinstance(value, bool):
    return 'true' if value else 'false'
  if isinstance(value, float):
    return format_float(value)
  if value is None:
    return ''
  return str(value)


def write_csv(
    path: str, fieldnames: Sequence[str], rows: Iterable[dict[str, Any]]
) -> None:
  """Writes `rows` as CSV atomically, with round-trip float formatting."""
  buffer = io.StringIO()
  writer = csv.DictWriter(buffer, fieldnames=list(fieldnames),
                          lineterminator='\n')
  writer.writeheader()
  for row in rows:
    writer.writerow({key: _csv_cell(value) for key, value in row.items()})
  atomic_write_text(path, buffer.getvalue())


def read_csv(path: str) -> tuple[list[str], list[dict[str, str]]]:
  """Reads a CSV file into its header and rows of strings."""
  with open(path, 'r', encoding='utf-8', newline='') as f:
    reader = csv.DictReader(f)
    rows = list(reader)
    return list(reader.fieldnames or []), rows
