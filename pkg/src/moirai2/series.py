"""The univariate series record shared by every stage of the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SEASON_BY_FREQ = {"H": 24, "D": 7, "W": 52, "M": 12, "15min": 96, "15T": 96}


def season_length_for(freq: str) -> int:
    return SEASON_BY_FREQ.get(freq, 1)


@dataclass
class Series:
    """One univariate series; missing positions hold NaN in ``values``."""

    id: str
    values: np.ndarray
    freq: str = "H"
    season_length: int | None = None
    missing: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.missing is None:
            self.missing = np.isnan(self.values)
        else:
            self.missing = np.asarray(self.missing, dtype=bool).reshape(-1) | np.isnan(self.values)
        if self.missing.shape != self.values.shape:
            raise ValueError(f"missing flags {self.missing.shape} do not match values {self.values.shape}")
        if self.missing.any():
            self.values = np.where(self.missing, np.nan, self.values)
        if self.season_length is None:
            self.season_length = season_length_for(self.freq)
        if self.season_length < 1:
            raise ValueError(f"season_length must be >= 1, got {self.season_length}")

    def __len__(self) -> int:
        return self.values.shape[0]

    def slice(self, start: int, stop: int | None = None, suffix: str = "") -> Series:
        return Series(
            id=self.id + suffix,
            values=self.values[start:stop].copy(),
            freq=self.freq,
            season_length=self.season_length,
            missing=self.missing[start:stop].copy(),
        )
