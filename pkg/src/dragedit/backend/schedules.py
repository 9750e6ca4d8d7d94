"""Noise schedules. Only the cumulative signal level alpha_bar is consumed
by inversion and sampling; t is indexed 0..T with alpha_bar(0) == 1."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError


class LinearBetaSchedule:
    """alpha_bar(t) = prod_{i<=t} (1 - beta_i) with beta linearly spaced."""

    kind = "linear"

    def __init__(self, beta_start: float, beta_end: float, t_max: int):
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ContractError("need 0 < beta_start <= beta_end < 1")
        if t_max < 1:
            raise ContractError("t_max must be >= 1")
        self.beta_start = float(beta_start)
        self.beta_end = float(beta_end)
        self.t_max = int(t_max)
        betas = np.linspace(beta_start, beta_end, t_max, dtype=np.float64)
        self._alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.t_max:
            raise ContractError(f"timestep {t} outside schedule 0..{self.t_max}")
        return float(self._alpha_bar[t])

    def to_config(self) -> dict:
        return {
            "kind": self.kind,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "t_max": self.t_max,
        }


def schedule_from_config(cfg: dict) -> LinearBetaSchedule:
    kind = cfg.get("kind", "linear")
    if kind != "linear":
        raise ContractError(f"unknown schedule kind {kind!r}")
    return LinearBetaSchedule(cfg["beta_start"], cfg["beta_end"], cfg["t_max"])
