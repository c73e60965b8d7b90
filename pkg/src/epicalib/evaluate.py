"""Benchmark harness: re-run top posterior samples through the simulator and
score curve fits (as a fraction of population) and parameter recovery.

Mirrors the protocol used throughout this toolkit: fit on an observed prefix,
score against the full-horizon truth curve with known planted parameters.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibrate import (
    METHOD_NAIVE,
    METHOD_OPT,
    METHOD_OPT_GLOBAL,
    METHOD_OPT_KLD,
    CalibrationProblem,
    MvnModel,
    OptimizerConfig,
    PosteriorSamples,
    fit_prior_from_dataset,
    naive_posterior,
    optimize_posterior,
)
from .ensemble import TEST, EnsembleDataset, normalize_by_population, to_cumulative
from .pca import PcaBasis
from .simcore import EpiParams, MsaProfile, ParameterBox, simulate
from .surrogate import SurrogateModel

ALL_METHODS = (METHOD_NAIVE, METHOD_OPT, METHOD_OPT_KLD, METHOD_OPT_GLOBAL)
DEFAULT_T_OBS = (10, 20, 25)
SENSITIVE_PARAMS = {0: "INFECTED", 3: "TRANSPROP"}


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)

    def add(self, method: str, t_obs: int, metric: str, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        self.rows.append({
            "method": method, "t_obs": int(t_obs), "metric": metric,
            "mean": float(np.mean(values)), "std": float(np.std(values)),
            "n": int(values.size),
        })

    def cell(self, method: str, t_obs: int, metric: str) -> dict:
        for row in self.rows:
            if (row["method"], row["t_obs"], row["metric"]) == (method, t_obs, metric):
                return row
        raise KeyError(f"no report cell for {(method, t_obs, metric)}")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "t_obs", "metric", "mean", "std", "n"])
            for row in self.rows:
                writer.writerow([row["method"], row["t_obs"], row["metric"],
                                 repr(row["mean"]), repr(row["std"]), row["n"]])


def oracle_reevaluate(samples: PosteriorSamples, msa: MsaProfile, horizon: int,
                      top_k: int = 100,
                      box: ParameterBox | None = None) -> list[tuple[EpiParams, np.ndarray]]:
    """Run the simulator on the top_k samples ranked by surrogate GOF."""
    if top_k > samples.samples.shape[0]:
        raise ValueError(f"top_k = {top_k} exceeds sample count {samples.samples.shape[0]}")
    order = np.argsort(samples.gof, kind="stable")[:top_k]
    out = []
    for idx in order:
        params = EpiParams.from_array(samples.samples[idx])
        curve = simulate(params, msa, horizon, box=box)
        out.append((params, curve.values))
    return out


def curve_rmse_pct(truth: np.ndarray, candidates: list[np.ndarray],
                   population: float) -> tuple[float, float, np.ndarray]:
    """Per-candidate RMSE in persons, as fraction of population x 1e3.

    Returns (mean, std, per-candidate values).
    """
    truth = np.asarray(truth, dtype=np.float64)
    per = []
    for cand in candidates:
        cand = np.asarray(cand, dtype=np.float64)
        if cand.shape != truth.shape:
            raise ValueError("candidate/truth length mismatch")
        rmse = np.sqrt(np.mean((cand - truth) ** 2))
        per.append(rmse / population * 1e3)
    per = np.array(per)
    return float(np.mean(per)), float(np.std(per)), per


def param_rmse(truth: EpiParams, samples: np.ndarray,
               indices: dict[int, str] = SENSITIVE_PARAMS) -> dict[str, float]:
    """RMSE of each sensitive parameter across the sample set."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] == 0:
        raise ValueError("empty sample set")
    truth_arr = truth.as_array()
    return {name: float(np.sqrt(np.mean((samples[:, idx] - truth_arr[idx]) ** 2)))
            for idx, name in indices.items()}


def _companion_problems(dataset: EnsembleDataset, companions: list[MsaProfile],
                        truth: np.ndarray, t_obs: int, horizon: int,
                        seed: int) -> list[CalibrationProblem]:
    """Observed prefixes for co-calibrated regions sharing the truth's
    global parameters, with locally re-drawn region parameters."""
    box = dataset.box
    problems = []
    for c_idx, msa in enumerate(companions):
        rng = np.random.default_rng(np.random.SeedSequence(
            entropy=(int(seed), 104729, c_idx)))
        local = box.lows_array[:3] + rng.random(3) * (box.highs_array[:3] - box.lows_array[:3])
        params = EpiParams.from_array(np.concatenate([local, truth[3:]]))
        curve = simulate(params, msa, horizon, box=box)
        y_norm = normalize_by_population(to_cumulative(curve), msa.population).values
        problems.append(CalibrationProblem(msa=msa, y_obs=y_norm[:t_obs], t_obs=t_obs))
    return problems


def estimate_posterior(method: str, problem: CalibrationProblem,
                       dataset: EnsembleDataset, model: SurrogateModel,
                       basis: PcaBasis, prior: MvnModel, cfg: OptimizerConfig,
                       companions: list[CalibrationProblem] | None = None,
                       trace_rows: list | None = None) -> PosteriorSamples:
    """Run one estimation method for one target region."""
    if method == METHOD_NAIVE:
        return naive_posterior(model, basis, prior, problem, cfg, box=dataset.box)
    if method == METHOD_OPT:
        return optimize_posterior([problem], model, basis, prior, cfg, dataset.box,
                                  use_kld=False, use_global=False,
                                  trace_rows=trace_rows)[0]
    if method == METHOD_OPT_KLD:
        return optimize_posterior([problem], model, basis, prior, cfg, dataset.box,
                                  use_kld=True, use_global=False,
                                  trace_rows=trace_rows)[0]
    if method == METHOD_OPT_GLOBAL:
        if not companions:
            raise ValueError("OPT_GLOBAL requires companion problems")
        return optimize_posterior([problem, *companions], model, basis, prior, cfg,
                                  dataset.box, use_kld=True, use_global=True,
                                  trace_rows=trace_rows)[0]
    raise ValueError(f"unknown method: {method}")


def run_benchmark(dataset: EnsembleDataset, model: SurrogateModel, basis: PcaBasis,
                  methods: tuple[str, ...] = ALL_METHODS,
                  t_obs_list: tuple[int, ...] = DEFAULT_T_OBS,
                  n_test_curves: int = 15,
                  opt_cfg: OptimizerConfig | None = None,
                  top_k: int = 100,
                  seed: int = 0,
                  out_dir=None) -> EvalReport:
    """Full cross of methods x observation windows on planted test curves.

    Test curves come from the first TEST-split region; the global-consistency
    method co-calibrates against the next two TEST regions.  Writes
    report.csv plus per-cell raw CSVs when out_dir is given.
    """
    opt_cfg = opt_cfg or OptimizerConfig(seed=seed)
    test_msas = [p for p in dataset.profiles if dataset.split[p.id] == TEST]
    if not test_msas:
        raise ValueError("dataset has no TEST-split regions")
    target = test_msas[0]
    companions = test_msas[1:3]
    if METHOD_OPT_GLOBAL in methods and len(companions) < 2:
        raise ValueError("OPT_GLOBAL needs at least three TEST regions")

    mask = dataset.record_mask(msa_id=target.id)
    rows = np.nonzero(mask)[0][:n_test_curves]
    if rows.size < n_test_curves:
        raise ValueError(f"only {rows.size} records available for {target.id}")
    prior = fit_prior_from_dataset(dataset, jitter=opt_cfg.jitter)

    report = EvalReport()
    raw_cells = {}
    for t_obs in t_obs_list:
        for method in methods:
            curve_vals, inf_vals, trans_vals = [], [], []
            for curve_no, row in enumerate(rows):
                truth_params = EpiParams.from_array(dataset.params[row])
                truth_cum = np.cumsum(dataset.raw[row])
                y_norm = dataset.normalized[row]
                problem = CalibrationProblem(msa=target, y_obs=y_norm[:t_obs],
                                             t_obs=t_obs)
                cfg_j = OptimizerConfig(**{**opt_cfg.to_dict(),
                                           "seed": _cell_seed(seed, t_obs, method, curve_no)})
                comp = None
                if method == METHOD_OPT_GLOBAL:
                    comp = _companion_problems(dataset, companions,
                                               truth_params.as_array(), t_obs,
                                               dataset.horizon, cfg_j.seed)
                posterior = estimate_posterior(method, problem, dataset, model,
                                               basis, prior, cfg_j, companions=comp)
                k = min(top_k, posterior.samples.shape[0])
                reeval = oracle_reevaluate(posterior, target, dataset.horizon,
                                           top_k=k, box=dataset.box)
                candidates = [np.cumsum(vals) for _, vals in reeval]
                _, _, per_cand = curve_rmse_pct(truth_cum, candidates, target.population)
                curve_vals.append(float(np.mean(per_cand)))
                top_samples = np.array([p.as_array() for p, _ in reeval])
                errs = param_rmse(truth_params, top_samples)
                inf_vals.append(errs["INFECTED"])
                trans_vals.append(errs["TRANSPROP"])
            report.add(method, t_obs, "curve_rmse_pct1e3", curve_vals)
            report.add(method, t_obs, "param_rmse_INFECTED", inf_vals)
            report.add(method, t_obs, "param_rmse_TRANSPROP", trans_vals)
            raw_cells[(method, t_obs)] = {
                "curve_rmse_pct1e3": curve_vals,
                "param_rmse_INFECTED": inf_vals,
                "param_rmse_TRANSPROP": trans_vals,
            }

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.write_csv(out_dir / "report.csv")
        for (method, t_obs), cell in raw_cells.items():
            with open(out_dir / f"raw_{method}_t{t_obs}.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["curve", *cell.keys()])
                for i in range(len(cell["curve_rmse_pct1e3"])):
                    writer.writerow([i, *[repr(cell[m][i]) for m in cell]])
    return report


def _cell_seed(seed: int, t_obs: int, method: str, curve_no: int) -> int:
    entropy = (int(seed), int(t_obs), int(sum(method.encode())), int(curve_no))
    return int(np.random.SeedSequence(entropy=entropy).generate_state(1)[0])
