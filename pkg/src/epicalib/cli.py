"""Pipeline orchestrator.

Every stage is a subcommand driven by one YAML config; each command writes
its artifacts plus a manifest (input/output checksums, seed, version) so any
artifact can be regenerated byte-identically.

Exit codes: 0 success, 1 validation failure, 2 numeric failure.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
from pathlib import Path

import click
import numpy as np
import yaml

from . import __version__
from . import calibrate as cal
from . import ensemble as ens
from . import evaluate as ev
from . import pca as pca_mod
from . import plots
from . import surrogate as sur
from .simcore import DEFAULT_BOX, EpiParams, MsaProfile, ParameterBox

WORKSPACE_ENV = "EPICALIB_WORKSPACE"

EXIT_VALIDATION = 1
EXIT_NUMERIC = 2


class ConfigError(Exception):
    """One or more invalid or missing config fields (collected exhaustively)."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _apply_override(cfg: dict, spec: str) -> None:
    if "=" not in spec:
        raise ConfigError([f"--set expects section.key=value, got {spec!r}"])
    dotted, raw_value = spec.split("=", 1)
    keys = dotted.split(".")
    node = cfg
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError([f"--set path {dotted!r} crosses a non-mapping node"])
    node[keys[-1]] = yaml.safe_load(raw_value)


def load_config(path: str, overrides: tuple[str, ...]) -> dict:
    problems = []
    cfg_path = Path(path)
    if not cfg_path.is_file():
        raise ConfigError([f"config file not found: {cfg_path}"])
    cfg = yaml.safe_load(cfg_path.read_text())
    if not isinstance(cfg, dict):
        raise ConfigError([f"config root must be a mapping: {cfg_path}"])
    for spec in overrides:
        _apply_override(cfg, spec)

    workspace = os.environ.get(WORKSPACE_ENV) or cfg.get("workspace")
    if not workspace:
        problems.append("missing 'workspace' (or set $" + WORKSPACE_ENV + ")")
    for section in ("ensemble",):
        if section not in cfg:
            problems.append(f"missing '{section}' section")
    if "ensemble" in cfg:
        section = cfg["ensemble"]
        if "msas" not in section and "msa_file" not in section:
            problems.append("ensemble section needs 'msas' or 'msa_file'")
        for key in ("seed", "runs_per_msa", "horizon"):
            if key not in section:
                problems.append(f"ensemble section missing '{key}'")
    if problems:
        raise ConfigError(problems)
    cfg["workspace"] = workspace
    cfg["_config_path"] = str(cfg_path)
    return cfg


def _paths(cfg: dict) -> dict:
    ws = Path(cfg["workspace"])
    return {
        "workspace": ws,
        "dataset": ws / "dataset",
        "basis": ws / "basis.json",
        "model": ws / "model.json",
        "calibration": ws / "calibration",
        "reports": ws / "reports",
    }


def _load_msas(cfg: dict) -> list[MsaProfile]:
    section = cfg["ensemble"]
    if "msa_file" in section:
        from .simcore import load_msa_profiles
        return load_msa_profiles(section["msa_file"])
    return [MsaProfile.from_dict(d) for d in section["msas"]]


def _box_from_cfg(cfg: dict) -> ParameterBox:
    box_cfg = cfg.get("ensemble", {}).get("box")
    return ParameterBox.from_dict(box_cfg) if box_cfg else DEFAULT_BOX


def _write_manifest(cfg: dict, command: str, inputs: list[Path],
                    outputs: list[Path], seeds: dict) -> None:
    ws = Path(cfg["workspace"])
    manifest = {
        "command": command,
        "version": __version__,
        "seeds": seeds,
        "config": _sha256(Path(cfg["_config_path"])),
        "inputs": {str(p.relative_to(ws) if p.is_relative_to(ws) else p): _sha256(p)
                   for p in inputs},
        "outputs": {str(p.relative_to(ws) if p.is_relative_to(ws) else p): _sha256(p)
                    for p in outputs},
    }
    (ws / f"manifest_{command}.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _require_artifacts(paths: dict, names: list[str]) -> None:
    missing = [f"missing upstream artifact '{n}': {paths[n]}"
               for n in names if not paths[n].exists()]
    if missing:
        raise ConfigError(missing)


def _dataset_files(paths: dict) -> list[Path]:
    return [paths["dataset"] / n for n in ("meta.json", "params.csv", "curves.csv")]


def do_ensemble(cfg: dict) -> None:
    paths = _paths(cfg)
    section = cfg["ensemble"]
    msas = _load_msas(cfg)
    split = section.get("split")
    dataset = ens.generate_ensemble(
        msas, runs_per_msa=int(section["runs_per_msa"]), box=_box_from_cfg(cfg),
        horizon=int(section["horizon"]), seed=int(section["seed"]), split=split)
    paths["workspace"].mkdir(parents=True, exist_ok=True)
    dataset.save(paths["dataset"])
    _write_manifest(cfg, "ensemble", [], _dataset_files(paths),
                    {"ensemble": int(section["seed"])})
    click.echo(f"ensemble: {dataset.n_records} records -> {paths['dataset']}")


def do_pca(cfg: dict) -> None:
    paths = _paths(cfg)
    _require_artifacts(paths, ["dataset"])
    section = cfg.get("pca", {})
    dataset = ens.EnsembleDataset.load(paths["dataset"])
    mask = dataset.record_mask(split=ens.TRAIN,
                               max_runs=section.get("max_train_runs"))
    basis = pca_mod.fit(dataset.normalized[mask],
                        k=int(section.get("components", pca_mod.DEFAULT_COMPONENTS)))
    pca_mod.save(basis, paths["basis"])
    rmse = pca_mod.reconstruction_rmse(basis, dataset.normalized[mask])
    _write_manifest(cfg, "pca", _dataset_files(paths), [paths["basis"]], {})
    click.echo(f"pca: k={basis.k}, train reconstruction RMSE {rmse:.3e} -> {paths['basis']}")


def do_train(cfg: dict) -> None:
    paths = _paths(cfg)
    _require_artifacts(paths, ["dataset", "basis"])
    section = cfg.get("train", {})
    dataset = ens.EnsembleDataset.load(paths["dataset"])
    basis = pca_mod.load(paths["basis"])
    max_runs = section.pop("max_train_runs", None) if isinstance(section, dict) else None
    known = {k: v for k, v in section.items()
             if k in sur.TrainConfig().__dict__}
    train_cfg = sur.TrainConfig(**known)
    model = sur.train(dataset, basis, train_cfg, max_runs_per_msa=max_runs)
    sur.save(model, paths["model"])
    paths["reports"].mkdir(parents=True, exist_ok=True)
    plots.plot_training_history(model.meta["train_losses"], model.meta["val_losses"],
                                paths["reports"] / "training_history.png")
    _write_manifest(cfg, "train", _dataset_files(paths) + [paths["basis"]],
                    [paths["model"]], {"train": train_cfg.seed})
    click.echo(f"train: final val loss {model.meta['final_val_loss']:.3e} -> {paths['model']}")


def _optimizer_cfg(section: dict) -> cal.OptimizerConfig:
    known = {k: v for k, v in (section or {}).items()
             if k in cal.OptimizerConfig().__dict__}
    return cal.OptimizerConfig(**known)


def do_calibrate(cfg: dict) -> None:
    paths = _paths(cfg)
    _require_artifacts(paths, ["dataset", "basis", "model"])
    section = cfg.get("calibrate", {})
    dataset = ens.EnsembleDataset.load(paths["dataset"])
    basis = pca_mod.load(paths["basis"])
    model = sur.load(paths["model"])
    prior = cal.fit_prior_from_dataset(dataset)
    opt_cfg = _optimizer_cfg(section.get("optimizer"))

    target_id = section.get("target_msa")
    if target_id is None:
        target_id = next(p.id for p in dataset.profiles
                         if dataset.split[p.id] == ens.TEST)
    target = dataset.profile_by_id(target_id)
    record = int(section.get("record_index", 0))
    t_obs = int(section.get("t_obs", 20))
    methods = tuple(section.get("methods", ev.ALL_METHODS))

    row = np.nonzero(dataset.record_mask(msa_id=target_id))[0][record]
    truth = EpiParams.from_array(dataset.params[row])
    problem = cal.CalibrationProblem(msa=target, y_obs=dataset.normalized[row][:t_obs],
                                     t_obs=t_obs)
    companions = None
    if ev.METHOD_OPT_GLOBAL in methods:
        others = [p for p in dataset.profiles
                  if dataset.split[p.id] == ens.TEST and p.id != target_id][:2]
        companions = ev._companion_problems(dataset, others, truth.as_array(),
                                            t_obs, dataset.horizon, opt_cfg.seed)

    paths["calibration"].mkdir(parents=True, exist_ok=True)
    posteriors = []
    samples_by_method = {}
    outputs = []
    for method in methods:
        trace_rows: list = []
        post = ev.estimate_posterior(method, problem, dataset, model, basis,
                                     prior, opt_cfg, companions=companions,
                                     trace_rows=trace_rows)
        posteriors.append(post)
        samples_by_method[method] = post.samples
        if trace_rows:
            trace_path = paths["calibration"] / f"trace_{method}.csv"
            cal.write_trace_csv(trace_path, trace_rows)
            outputs.append(trace_path)
    posterior_path = paths["calibration"] / "posterior.csv"
    cal.write_posteriors_csv(posterior_path, posteriors)
    outputs.insert(0, posterior_path)
    plots.plot_posterior_marginals(samples_by_method, truth.as_array(), dataset.box,
                                   paths["calibration"] / "posterior_marginals.png")
    _write_manifest(cfg, "calibrate",
                    _dataset_files(paths) + [paths["basis"], paths["model"]],
                    outputs, {"calibrate": opt_cfg.seed})
    click.echo(f"calibrate: {len(methods)} methods on {target_id} "
               f"(T_obs={t_obs}) -> {paths['calibration']}")


def do_eval(cfg: dict) -> None:
    paths = _paths(cfg)
    _require_artifacts(paths, ["dataset", "basis", "model"])
    section = cfg.get("eval", {})
    dataset = ens.EnsembleDataset.load(paths["dataset"])
    basis = pca_mod.load(paths["basis"])
    model = sur.load(paths["model"])
    methods = tuple(section.get("methods", ev.ALL_METHODS))
    t_obs_list = tuple(int(t) for t in section.get("t_obs_list", ev.DEFAULT_T_OBS))
    report = ev.run_benchmark(
        dataset, model, basis, methods=methods, t_obs_list=t_obs_list,
        n_test_curves=int(section.get("n_test_curves", 15)),
        opt_cfg=_optimizer_cfg(section.get("optimizer")),
        top_k=int(section.get("top_k", 100)),
        seed=int(section.get("seed", 0)),
        out_dir=paths["reports"])
    plots.plot_report_summary(report.rows, paths["reports"] / "report_summary.png")
    outputs = [paths["reports"] / "report.csv"]
    outputs += [paths["reports"] / f"raw_{m}_t{t}.csv"
                for t in t_obs_list for m in methods]
    _write_manifest(cfg, "eval",
                    _dataset_files(paths) + [paths["basis"], paths["model"]],
                    outputs, {"eval": int(section.get("seed", 0))})
    click.echo(f"eval: {len(report.rows)} report cells -> {paths['reports']}")


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__)
def main():
    """Surrogate-based calibration pipeline for the six-parameter epidemic
    simulator: ensemble generation, curve compression, surrogate training,
    posterior estimation, and benchmark reporting."""


def _command(func, name: str, help_text: str):
    @click.option("--config", "-c", "config_path", required=True,
                  type=click.Path(), help="Pipeline config file (YAML).")
    @click.option("--set", "-s", "overrides", multiple=True,
                  help="Override a config value: section.key=value.")
    @click.option("--jobs", type=int, default=1, show_default=True,
                  help="Worker cap (stages currently run serially for "
                       "reproducibility).")
    def runner(config_path, overrides, jobs):
        try:
            cfg = load_config(config_path, overrides)
            func(cfg)
        except ConfigError as exc:
            for problem in exc.problems:
                click.echo(f"error: {problem}", err=True)
            sys.exit(EXIT_VALIDATION)
        except (ArithmeticError, np.linalg.LinAlgError) as exc:
            click.echo(f"numeric failure: {exc}", err=True)
            sys.exit(EXIT_NUMERIC)

    runner.__name__ = name
    runner.__doc__ = help_text
    return main.command(name=name)(runner)


cmd_ensemble = _command(do_ensemble, "ensemble",
                        "Sample parameters and run the simulator for every region.")
cmd_pca = _command(do_pca, "pca",
                   "Fit the curve-compression basis on the TRAIN split.")
cmd_train = _command(do_train, "train", "Train the neural surrogate.")
cmd_calibrate = _command(do_calibrate, "calibrate",
                         "Estimate posterior parameter sets for one observed curve.")
cmd_eval = _command(do_eval, "eval",
                    "Run the methods x T_obs benchmark and render the report.")


def do_all(cfg: dict) -> None:
    for stage in (do_ensemble, do_pca, do_train, do_calibrate, do_eval):
        stage(cfg)


cmd_all = _command(do_all, "all", "Run the full pipeline end to end.")


if __name__ == "__main__":
    main()
