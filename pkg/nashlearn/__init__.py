from .scenario import Scenario
from .version import __version__
