"""Deterministic stand-in epidemic simulator.

Expected-value SEIR dynamics with an asymptomatic branch, advanced in two
half-day steps per calendar day.  Takes six parameters:

    (infected, removed, compliance, trans_prob, prop_asym, rel_inf)

Indices 0-2 are local (region-specific), 3-5 are global (virus-intrinsic).
The output is the expected number of daily new infections, so repeated calls
with identical arguments are bit-identical.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import yaml

PARAM_NAMES = ("infected", "removed", "compliance", "trans_prob", "prop_asym", "rel_inf")
N_PARAMS = 6
LOCAL_INDICES = (0, 1, 2)
GLOBAL_INDICES = (3, 4, 5)

# Fixed disease-progression constants (documented in config output).
LATENT_PERIOD_DAYS = 3.0
INFECTIOUS_PERIOD_DAYS = 5.0
HALF_STEP_DAYS = 0.5
# Full compliance reduces contacts by at most 50%.
MAX_COMPLIANCE_REDUCTION = 0.5

DEFAULT_UNDERREPORT_FACTOR = 3.0


class DomainError(ValueError):
    """A physically meaningful input lies outside its allowed range."""


class CurveKind(str, Enum):
    DAILY_NEW = "DAILY_NEW"
    CUMULATIVE = "CUMULATIVE"
    CUMULATIVE_NORMALIZED = "CUMULATIVE_NORMALIZED"


@dataclass(frozen=True)
class EpiParams:
    infected: float
    removed: float
    compliance: float
    trans_prob: float
    prop_asym: float
    rel_inf: float

    def __post_init__(self):
        arr = self.as_array()
        if not np.all(np.isfinite(arr)):
            raise DomainError("all six parameters must be finite, got %s" % (arr,))

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.infected, self.removed, self.compliance,
             self.trans_prob, self.prop_asym, self.rel_inf],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, arr) -> "EpiParams":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (N_PARAMS,):
            raise ValueError(f"expected a 6-vector, got shape {arr.shape}")
        return cls(*[float(v) for v in arr])


@dataclass(frozen=True)
class ParameterBox:
    """Per-parameter (low, high) bounds, in the canonical parameter order."""

    lows: tuple
    highs: tuple

    def __post_init__(self):
        lows = np.asarray(self.lows, dtype=np.float64)
        highs = np.asarray(self.highs, dtype=np.float64)
        if lows.shape != (N_PARAMS,) or highs.shape != (N_PARAMS,):
            raise ValueError("box needs exactly 6 (low, high) pairs")
        if not (np.all(np.isfinite(lows)) and np.all(np.isfinite(highs))):
            raise ValueError("box bounds must be finite")
        if np.any(lows >= highs):
            bad = [PARAM_NAMES[i] for i in np.nonzero(lows >= highs)[0]]
            raise ValueError(f"degenerate bounds (low >= high) for: {', '.join(bad)}")

    @property
    def lows_array(self) -> np.ndarray:
        return np.asarray(self.lows, dtype=np.float64)

    @property
    def highs_array(self) -> np.ndarray:
        return np.asarray(self.highs, dtype=np.float64)

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=np.float64)
        return bool(np.all(x >= self.lows_array) and np.all(x <= self.highs_array))

    def clip(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=np.float64), self.lows_array, self.highs_array)

    def validate_params(self, params: EpiParams) -> None:
        arr = params.as_array()
        for i, name in enumerate(PARAM_NAMES):
            if not (self.lows[i] <= arr[i] <= self.highs[i]):
                raise DomainError(
                    f"parameter '{name}' = {arr[i]} outside "
                    f"[{self.lows[i]}, {self.highs[i]}]"
                )

    def to_dict(self) -> dict:
        return {name: [float(self.lows[i]), float(self.highs[i])]
                for i, name in enumerate(PARAM_NAMES)}

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterBox":
        missing = [n for n in PARAM_NAMES if n not in d]
        if missing:
            raise ValueError(f"box config missing parameters: {', '.join(missing)}")
        lows = tuple(float(d[n][0]) for n in PARAM_NAMES)
        highs = tuple(float(d[n][1]) for n in PARAM_NAMES)
        return cls(lows, highs)


# Plausible epidemiological ranges; overridable via config and recorded in
# dataset metadata.
DEFAULT_BOX = ParameterBox(
    lows=(0.1, 0.0, 0.1, 0.05, 0.2, 0.2),
    highs=(1.0, 0.3, 0.9, 0.6, 0.6, 1.0),
)


@dataclass(frozen=True)
class MsaProfile:
    """Static description of one metropolitan region."""

    id: str
    population: float
    initial_cases: float
    contact_scale: float
    underreport_factor: float = DEFAULT_UNDERREPORT_FACTOR

    def __post_init__(self):
        if self.population < 1000:
            raise DomainError(f"{self.id}: population must be >= 1000")
        if self.initial_cases < 0 or self.initial_cases > self.population:
            raise DomainError(f"{self.id}: initial_cases must be in [0, population]")
        if self.contact_scale <= 0:
            raise DomainError(f"{self.id}: contact_scale must be positive")
        if self.underreport_factor <= 0:
            raise DomainError(f"{self.id}: underreport_factor must be positive")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "population": float(self.population),
            "initial_cases": float(self.initial_cases),
            "contact_scale": float(self.contact_scale),
            "underreport_factor": float(self.underreport_factor),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MsaProfile":
        return cls(
            id=str(d["id"]),
            population=float(d["population"]),
            initial_cases=float(d["initial_cases"]),
            contact_scale=float(d["contact_scale"]),
            underreport_factor=float(d.get("underreport_factor", DEFAULT_UNDERREPORT_FACTOR)),
        )


@dataclass
class EpidemicCurve:
    msa_id: str
    values: np.ndarray
    kind: CurveKind

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.kind = CurveKind(self.kind)
        if self.values.ndim != 1:
            raise ValueError("curve values must be a 1-D sequence")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("curve values must be finite and nonnegative")
        if self.kind in (CurveKind.CUMULATIVE, CurveKind.CUMULATIVE_NORMALIZED):
            if np.any(np.diff(self.values) < 0):
                raise ValueError(f"{self.kind.value} curve must be nondecreasing")
        if self.kind is CurveKind.CUMULATIVE_NORMALIZED and np.any(self.values > 1.0):
            raise ValueError("normalized curve values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.values)


def simulate(params: EpiParams, msa: MsaProfile, horizon_days: int,
             box: ParameterBox | None = DEFAULT_BOX) -> EpidemicCurve:
    """Run the deterministic compartment recurrence.

    Returns the expected daily new infections (new symptomatic + asymptomatic
    cases per calendar day) over `horizon_days`.  Pass box=None to skip the
    range check (tests exercise out-of-range corners such as trans_prob = 0).
    """
    if not isinstance(horizon_days, (int, np.integer)) or horizon_days < 1:
        raise ValueError(f"horizon_days must be a positive integer, got {horizon_days!r}")
    if box is not None:
        box.validate_params(params)

    pop = float(msa.population)
    i_total = params.infected * msa.initial_cases * msa.underreport_factor
    i_asym = params.prop_asym * i_total
    i_sym = i_total - i_asym
    removed = params.removed * pop
    exposed = 0.0
    susceptible = max(pop - i_total - removed, 0.0)

    beta = (params.trans_prob * msa.contact_scale
            * (1.0 - MAX_COMPLIANCE_REDUCTION * params.compliance))
    dt = HALF_STEP_DAYS
    progress_rate = 1.0 / LATENT_PERIOD_DAYS
    recovery_rate = 1.0 / INFECTIOUS_PERIOD_DAYS

    values = np.zeros(int(horizon_days), dtype=np.float64)
    for day in range(int(horizon_days)):
        new_today = 0.0
        for _ in range(2):
            force = beta * (i_sym + params.rel_inf * i_asym) / pop
            new_exposed = min(force * susceptible * dt, susceptible)
            becoming_infectious = min(exposed * progress_rate * dt, exposed)
            to_asym = params.prop_asym * becoming_infectious
            to_sym = becoming_infectious - to_asym
            sym_recovering = min(i_sym * recovery_rate * dt, i_sym)
            asym_recovering = min(i_asym * recovery_rate * dt, i_asym)

            susceptible -= new_exposed
            exposed += new_exposed - becoming_infectious
            i_sym += to_sym - sym_recovering
            i_asym += to_asym - asym_recovering
            removed += sym_recovering + asym_recovering
            new_today += becoming_infectious
        values[day] = new_today

    return EpidemicCurve(msa_id=msa.id, values=values, kind=CurveKind.DAILY_NEW)


def load_msa_profiles(path) -> list[MsaProfile]:
    """Load a list of MSA profiles from a YAML or JSON config file."""
    path = Path(path)
    text = path.read_text()
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    if isinstance(data, dict):
        data = data.get("msas", data)
    if not isinstance(data, list):
        raise ValueError(f"{path}: expected a list of MSA records")
    return [MsaProfile.from_dict(rec) for rec in data]


def write_curves_csv(path, curves: list[EpidemicCurve]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["msa_id", "day", "value", "kind"])
        for curve in curves:
            for day, value in enumerate(curve.values):
                writer.writerow([curve.msa_id, day + 1, repr(float(value)), curve.kind.value])
