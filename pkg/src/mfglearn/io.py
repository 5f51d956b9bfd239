"""Result persistence.

Numbers go to CSV with 17 significant digits, which round-trips every
double exactly; manifests and summaries go to JSON. Nothing else in the
package writes files.
"""

from __future__ import annotations

import json
import platform
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__

FLOAT_FORMAT = "%.17g"


def write_csv(path, columns: dict):
    """Write equal-length 1-d arrays as named columns."""
    names = list(columns)
    data = np.column_stack([np.asarray(columns[n], dtype=float).ravel() for n in names])
    np.savetxt(path, data, fmt=FLOAT_FORMAT, delimiter=",", header=",".join(names), comments="")


def read_csv(path):
    with open(path, encoding="utf-8") as fh:
        names = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return {n: data[:, i] for i, n in enumerate(names)}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, payload):
    Path(path).write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")


class RunDirectory:
    """Output directory of one run with a manifest that tracks its status.

    Used as a context manager: the manifest says ``running`` on entry and
    ``complete`` or ``failed`` on exit, so an interrupted run leaves its
    partial outputs next to a manifest marked incomplete.
    """

    def __init__(self, root, command, config, seed):
        self.path = Path(root)
        self.path.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.config = config
        self.seed = seed
        self.outputs = []
        self._start = None

    def file(self, name):
        self.outputs.append(name)
        return self.path / name

    def csv(self, name, columns):
        write_csv(self.file(name), columns)

    def json(self, name, payload):
        write_json(self.file(name), payload)

    def _manifest(self, status, error=None):
        payload = {
            "command": self.command,
            "config_hash": self.config.hash(),
            "seed": self.seed,
            "status": status,
            "versions": {
                "mfglearn": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
            "wall_time_s": None if self._start is None else time.perf_counter() - self._start,
            "outputs": sorted(self.outputs),
        }
        if error is not None:
            payload["error"] = error
        write_json(self.path / "manifest.json", payload)

    def __enter__(self):
        self._start = time.perf_counter()
        (self.path / "config.toml").write_text(self.config.to_toml(), encoding="utf-8")
        self._manifest("running")
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self._manifest("complete")
        else:
            self._manifest("failed" if exc_type is not KeyboardInterrupt else "interrupted", f"{exc_type.__name__}: {exc}")
        return False


def write_densities(run: RunDirectory, grid, densities, dates, prefix="density"):
    """One CSV per stored date: wealth, then the mass at each income level."""
    for k, mass in zip(dates, densities):
        cols = {"wealth": grid.wealth_nodes}
        for j in range(mass.shape[1]):
            cols[f"mass_y{j}"] = mass[:, j]
        run.csv(f"{prefix}_{int(k):04d}.csv", cols)
