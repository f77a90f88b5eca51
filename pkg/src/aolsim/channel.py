"""CQI spectral-efficiency table and the bandwidth-to-latency link model."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib import resources
from typing import Mapping, Sequence

import numpy as np

CQI_MIN = 1
CQI_MAX = 15


class CqiError(ValueError):
    pass


@dataclass(frozen=True)
class CqiTable:
    efficiency: Mapping[int, float]
    modulation: Mapping[int, str] | None = None

    def __post_init__(self):
        keys = sorted(self.efficiency)
        if keys != list(range(CQI_MIN, CQI_MAX + 1)):
            raise CqiError(f"CQI table must cover indices {CQI_MIN}..{CQI_MAX}, got {keys}")
        effs = [self.efficiency[k] for k in keys]
        if any(e <= 0 for e in effs):
            raise CqiError("spectral efficiencies must be positive")
        if any(b <= a for a, b in zip(effs, effs[1:])):
            raise CqiError("spectral efficiency must increase strictly with CQI")

    def __getitem__(self, cqi: int) -> float:
        try:
            return self.efficiency[cqi]
        except KeyError:
            raise CqiError(f"CQI {cqi!r} outside {CQI_MIN}..{CQI_MAX}") from None


def load_cqi_table(path=None) -> CqiTable:
    """Load the CQI table from ``path`` or the bundled data file."""
    if path is None:
        text = resources.files("aolsim").joinpath("data/cqi_table.csv").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    rows = csv.DictReader(line for line in io.StringIO(text) if not line.startswith("#"))
    eff, mod = {}, {}
    for row in rows:
        k = int(row["cqi"])
        eff[k] = float(row["efficiency"])
        mod[k] = row["modulation"]
    return CqiTable(eff, mod)


DEFAULT_TABLE = load_cqi_table()


@dataclass(frozen=True)
class TransmissionSpec:
    payload: float
    bandwidth: float
    cqi: int

    def __post_init__(self):
        if not self.payload > 0:
            raise ValueError("payload must be > 0 bits")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be > 0 Hz")
        if self.cqi not in range(CQI_MIN, CQI_MAX + 1):
            raise CqiError(f"CQI {self.cqi!r} outside {CQI_MIN}..{CQI_MAX}")


def latency(spec: TransmissionSpec, table: CqiTable = DEFAULT_TABLE) -> float:
    """Seconds needed to push ``payload`` bits at ``efficiency(cqi) * bandwidth`` bit/s."""
    return spec.payload / (table[spec.cqi] * spec.bandwidth)


def min_bandwidth_for_deadline(
    payload: float, cqi: int, deadline: float, menu: Sequence[float], table: CqiTable = DEFAULT_TABLE
) -> float:
    """Smallest menu bandwidth meeting ``deadline``; the largest one if none does."""
    if not menu:
        raise ValueError("bandwidth menu is empty")
    for b in menu:
        if latency(TransmissionSpec(payload, b, cqi), table) <= deadline:
            return b
    return menu[-1]


def sample_cqi(rng: np.random.Generator) -> int:
    return int(rng.integers(CQI_MIN, CQI_MAX + 1))
