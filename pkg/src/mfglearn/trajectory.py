"""Time-indexed record of a simulated economy."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass(eq=False)
class Trajectory:
    """Prices, beliefs, densities and policies along a run.

    ``prices[n]`` is the realized price vector at date ``times[n]`` and equals
    the price functional of ``densities[n]``; both hold ``n_steps + 1`` dates,
    the state after the last step included. ``consumption[n]`` is the policy
    executed over step ``n``.
    """

    times: np.ndarray
    prices: np.ndarray
    densities: np.ndarray
    consumption: Optional[np.ndarray] = None
    beliefs: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_steps(self):
        return self.prices.shape[0] - 1

    def forecast_errors(self):
        return self.diagnostics.get("forecast_errors")
