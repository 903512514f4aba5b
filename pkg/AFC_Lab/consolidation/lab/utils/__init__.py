from .managers import RunDirectoryManager
from .workers import SweepWorker, run_sweep, sweep_points
