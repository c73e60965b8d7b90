"""Parameter sampling, multi-region ensemble generation, and curve transforms.

The transforms put every region into a common learning space: daily new
infections -> cumulative counts -> fraction of regional population.  All
steps are reversible so predictions can be mapped back to raw counts.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .simcore import (
    DEFAULT_BOX,
    N_PARAMS,
    PARAM_NAMES,
    CurveKind,
    DomainError,
    EpidemicCurve,
    EpiParams,
    MsaProfile,
    ParameterBox,
    simulate,
)

TRAIN = "TRAIN"
TEST = "TEST"

DEFAULT_HORIZON = 28
DEFAULT_RUNS_PER_MSA = 500


def _child_seed(seed: int, index: int) -> int:
    """Stable per-MSA RNG seed derived from the top-level seed."""
    return int(np.random.SeedSequence(entropy=(int(seed), int(index))).generate_state(1)[0])


def sample_parameters(n: int, box: ParameterBox, seed: int) -> list[EpiParams]:
    """Latin-hypercube sample of n parameter sets inside the box.

    Each parameter's n values occupy n distinct equal-width strata.
    Deterministic given the seed.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    lows, highs = box.lows_array, box.highs_array
    points = np.empty((n, N_PARAMS), dtype=np.float64)
    for j in range(N_PARAMS):
        strata = rng.permutation(n)
        offsets = rng.random(n)
        unit = (strata + offsets) / n
        points[:, j] = lows[j] + unit * (highs[j] - lows[j])
    return [EpiParams.from_array(row) for row in points]


def to_cumulative(curve: EpidemicCurve) -> EpidemicCurve:
    if curve.kind is not CurveKind.DAILY_NEW:
        raise ValueError(f"expected a DAILY_NEW curve, got {curve.kind.value}")
    return EpidemicCurve(curve.msa_id, np.cumsum(curve.values), CurveKind.CUMULATIVE)


def to_daily(curve: EpidemicCurve) -> EpidemicCurve:
    """Inverse of to_cumulative."""
    if curve.kind is not CurveKind.CUMULATIVE:
        raise ValueError(f"expected a CUMULATIVE curve, got {curve.kind.value}")
    daily = np.diff(curve.values, prepend=0.0)
    return EpidemicCurve(curve.msa_id, np.maximum(daily, 0.0), CurveKind.DAILY_NEW)


def normalize_by_population(curve: EpidemicCurve, population: float) -> EpidemicCurve:
    if curve.kind is not CurveKind.CUMULATIVE:
        raise ValueError(f"expected a CUMULATIVE curve, got {curve.kind.value}")
    if population < 1:
        raise ValueError("population must be >= 1")
    if np.any(curve.values > population):
        raise DomainError("curve exceeds population; cannot normalize")
    return EpidemicCurve(curve.msa_id, curve.values / population,
                         CurveKind.CUMULATIVE_NORMALIZED)


def denormalize(curve: EpidemicCurve, population: float) -> EpidemicCurve:
    if curve.kind is not CurveKind.CUMULATIVE_NORMALIZED:
        raise ValueError(f"expected a CUMULATIVE_NORMALIZED curve, got {curve.kind.value}")
    return EpidemicCurve(curve.msa_id, curve.values * population, CurveKind.CUMULATIVE)


@dataclass
class EnsembleDataset:
    """Flat record store for one generated ensemble.

    Arrays are aligned: row i is run `run_index[i]` of MSA
    `profiles[msa_index[i]]`.
    """

    profiles: list[MsaProfile]
    split: dict[str, str]               # msa_id -> TRAIN | TEST
    msa_index: np.ndarray               # (n,) int
    run_index: np.ndarray               # (n,) int
    params: np.ndarray                  # (n, 6)
    raw: np.ndarray                     # (n, T) daily new infections
    normalized: np.ndarray              # (n, T) cumulative fraction of population
    seed: int
    horizon: int
    box: ParameterBox

    @property
    def n_records(self) -> int:
        return self.params.shape[0]

    def profile_by_id(self, msa_id: str) -> MsaProfile:
        for p in self.profiles:
            if p.id == msa_id:
                return p
        raise KeyError(f"unknown MSA id: {msa_id}")

    def record_mask(self, split: str | None = None, msa_id: str | None = None,
                    max_runs: int | None = None) -> np.ndarray:
        mask = np.ones(self.n_records, dtype=bool)
        if split is not None:
            wanted = {i for i, p in enumerate(self.profiles) if self.split[p.id] == split}
            mask &= np.isin(self.msa_index, sorted(wanted))
        if msa_id is not None:
            idx = next(i for i, p in enumerate(self.profiles) if p.id == msa_id)
            mask &= self.msa_index == idx
        if max_runs is not None:
            mask &= self.run_index < max_runs
        return mask

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {
            "seed": int(self.seed),
            "horizon": int(self.horizon),
            "box": self.box.to_dict(),
            "split": {k: self.split[k] for k in sorted(self.split)},
            "msas": [p.to_dict() for p in self.profiles],
            "n_records": int(self.n_records),
        }
        (directory / "meta.json").write_text(
            json.dumps(meta, sort_keys=True, indent=2) + "\n")
        with open(directory / "params.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["msa_id", "run", *PARAM_NAMES])
            for i in range(self.n_records):
                msa_id = self.profiles[self.msa_index[i]].id
                writer.writerow([msa_id, int(self.run_index[i]),
                                 *[repr(float(v)) for v in self.params[i]]])
        with open(directory / "curves.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["msa_id", "run", "day", "raw", "normalized"])
            for i in range(self.n_records):
                msa_id = self.profiles[self.msa_index[i]].id
                for day in range(self.horizon):
                    writer.writerow([msa_id, int(self.run_index[i]), day + 1,
                                     repr(float(self.raw[i, day])),
                                     repr(float(self.normalized[i, day]))])

    @classmethod
    def load(cls, directory) -> "EnsembleDataset":
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text())
        profiles = [MsaProfile.from_dict(d) for d in meta["msas"]]
        id_to_index = {p.id: i for i, p in enumerate(profiles)}
        horizon = int(meta["horizon"])
        n = int(meta["n_records"])

        msa_index = np.empty(n, dtype=np.int64)
        run_index = np.empty(n, dtype=np.int64)
        params = np.empty((n, N_PARAMS), dtype=np.float64)
        with open(directory / "params.csv", newline="") as fh:
            for i, row in enumerate(csv.DictReader(fh)):
                msa_index[i] = id_to_index[row["msa_id"]]
                run_index[i] = int(row["run"])
                params[i] = [float(row[name]) for name in PARAM_NAMES]

        raw = np.empty((n, horizon), dtype=np.float64)
        normalized = np.empty((n, horizon), dtype=np.float64)
        row_of = {(int(msa_index[i]), int(run_index[i])): i for i in range(n)}
        with open(directory / "curves.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                i = row_of[(id_to_index[row["msa_id"]], int(row["run"]))]
                day = int(row["day"]) - 1
                raw[i, day] = float(row["raw"])
                normalized[i, day] = float(row["normalized"])

        return cls(
            profiles=profiles,
            split=dict(meta["split"]),
            msa_index=msa_index,
            run_index=run_index,
            params=params,
            raw=raw,
            normalized=normalized,
            seed=int(meta["seed"]),
            horizon=horizon,
            box=ParameterBox.from_dict(meta["box"]),
        )


def default_split(msas: list[MsaProfile]) -> dict[str, str]:
    """First two-thirds of the MSAs train, the rest test (split by whole MSA)."""
    n_train = int(round(len(msas) * 2 / 3))
    return {p.id: (TRAIN if i < n_train else TEST) for i, p in enumerate(msas)}


def generate_ensemble(msas: list[MsaProfile], runs_per_msa: int,
                      box: ParameterBox = DEFAULT_BOX,
                      horizon: int = DEFAULT_HORIZON,
                      seed: int = 0,
                      split: dict[str, str] | None = None) -> EnsembleDataset:
    """Sample parameters per MSA and run the simulator on every record."""
    if not msas:
        raise ValueError("need at least one MSA profile")
    if split is None:
        split = default_split(msas)

    n_total = len(msas) * runs_per_msa
    msa_index = np.empty(n_total, dtype=np.int64)
    run_index = np.empty(n_total, dtype=np.int64)
    params = np.empty((n_total, N_PARAMS), dtype=np.float64)
    raw = np.empty((n_total, horizon), dtype=np.float64)
    normalized = np.empty((n_total, horizon), dtype=np.float64)

    row = 0
    for m, msa in enumerate(msas):
        # Parameter sampling is stratified jointly across the MSA's runs, so
        # the stream is derived per (seed, msa index); the simulator itself
        # is deterministic.
        msa_params = sample_parameters(runs_per_msa, box, _child_seed(seed, m))
        for r, p in enumerate(msa_params):
            try:
                curve = simulate(p, msa, horizon, box=box)
            except Exception as exc:
                raise RuntimeError(f"simulation failed for MSA {msa.id} run {r}") from exc
            msa_index[row] = m
            run_index[row] = r
            params[row] = p.as_array()
            raw[row] = curve.values
            normalized[row] = normalize_by_population(
                to_cumulative(curve), msa.population).values
            row += 1

    return EnsembleDataset(
        profiles=list(msas), split=dict(split),
        msa_index=msa_index, run_index=run_index,
        params=params, raw=raw, normalized=normalized,
        seed=int(seed), horizon=int(horizon), box=box,
    )
