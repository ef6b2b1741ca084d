"""Pytest collection for the Mobly test classes under testing/.

The tests are Mobly `BaseTestClass` subclasses, which pytest does not collect
on its own. This hook collects each `test_*` method of every Mobly class in a
`testing/*_test.py` module and runs it through Mobly with the matching testbed
of `config/LocalTestbed.yaml` (the same testbeds the suite runners use).
"""

import inspect
import os

from mobly import base_test
from mobly import config_parser
from mobly import test_runner
import pytest

_ROOT = os.path.dirname(os.path.abspath(__file__))
_CONFIG = os.path.join(_ROOT, 'config', 'LocalTestbed.yaml')
# Testbed per test class, as in acceptance_suite.py; others use LocalTestbed.
_TESTBEDS = {'AcceptanceTest': 'AcceptanceTestbed'}


def pytest_collect_file(parent, file_path):
  if (file_path.suffix == '.py' and file_path.name.endswith('_test.py')
      and file_path.parent.name == 'testing'):
    return MoblyModule.from_parent(parent, path=file_path)
  return None


class MoblyModule(pytest.Module):
  """Collects Mobly test classes defined in a module."""

  def collect(self):
    module = self.obj
    for name, cls in inspect.getmembers(module, inspect.isclass):
      if (cls.__module__ == module.__name__
          and issubclass(cls, base_test.BaseTestClass)
          and cls is not base_test.BaseTestClass):
        yield MoblyClass.from_parent(self, name=name, mobly_cls=cls)


class MoblyClass(pytest.Collector):
  """Collects the test methods of one Mobly test class."""

  def __init__(self, *, mobly_cls, **kwargs):
    super().__init__(**kwargs)
    self.cls = mobly_cls

  def collect(self):
    for name in sorted(dir(self.cls)):
      if name.startswith('test_') and callable(getattr(self.cls, name)):
        yield MoblyItem.from_parent(self, name=name)


class MoblyItem(pytest.Item):
  """Runs one Mobly test method and reports its Mobly result."""

  def runtest(self):
    cls = self.parent.cls
    testbed = _TESTBEDS.get(cls.__name__, 'LocalTestbed')
    config = config_parser.load_test_config_file(_CONFIG, [testbed])[0]
    runner = test_runner.TestRunner(config.log_path, config.testbed_name)
    with runner.mobly_logger():
      runner.add_test_class(config, cls, [self.name])
      runner.run()
    results = runner.results
    records = results.failed + results.error + results.skipped
    if not results.passed and not records:
      raise MoblyTestFailure(f'{self.name} did not run')
    for record in records:
      if record in results.skipped:
        pytest.skip(str(record.details))
      raise MoblyTestFailure(
          f'{record.test_name} {record.result}: {record.details}\n'
          f'{record.stacktrace or ""}')

  def repr_failure(self, excinfo):
    if isinstance(excinfo.value, MoblyTestFailure):
      return str(excinfo.value)
    return super().repr_failure(excinfo)

  def reportinfo(self):
    return self.path, 0, f'{self.parent.name}.{self.name}'


class MoblyTestFailure(Exception):
  """A Mobly test method failed or errored."""
