import hashlib
import json
import shutil
from pathlib import Path

import pytest
import yaml
from click.testing import CliRunner

from epicalib import cli

SMOKE_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "smoke.yaml"


def _hash_tree(root: Path) -> dict:
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = hashlib.sha256(
                path.read_bytes()).hexdigest()
    return out


def _smoke_cfg_file(tmp_path: Path, workspace: Path, **tweaks) -> Path:
    cfg = yaml.safe_load(SMOKE_CONFIG.read_text())
    cfg["workspace"] = str(workspace)
    for dotted, value in tweaks.items():
        node = cfg
        keys = dotted.split(".")
        for key in keys[:-1]:
            node = node.setdefault(key, {})
        node[keys[-1]] = value
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


# ---------------------------------------------------------------- help/usage

@pytest.mark.parametrize("sub", ["ensemble", "pca", "train", "calibrate",
                                 "eval", "all"])
def test_subcommand_help(sub):
    result = CliRunner().invoke(cli.main, [sub, "--help"])
    assert result.exit_code == 0
    assert "--config" in result.output
    assert "--set" in result.output
    assert "--jobs" in result.output


def test_group_lists_subcommands():
    result = CliRunner().invoke(cli.main, ["--help"])
    assert result.exit_code == 0
    for sub in ("ensemble", "pca", "train", "calibrate", "eval", "all"):
        assert sub in result.output


# ---------------------------------------------------------------- validation

def test_missing_config_file_exits_1(tmp_path):
    missing = tmp_path / "nope.yaml"
    result = CliRunner().invoke(cli.main, ["ensemble", "-c", str(missing)])
    assert result.exit_code == cli.EXIT_VALIDATION
    assert str(missing) in result.output


def test_config_problems_are_collected(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("ensemble: {msas: []}\n")
    result = CliRunner().invoke(cli.main, ["ensemble", "-c", str(path)],
                                env={cli.WORKSPACE_ENV: ""})
    assert result.exit_code == cli.EXIT_VALIDATION
    # both the missing workspace and the missing ensemble keys are reported
    assert "workspace" in result.output
    assert "seed" in result.output
    assert "runs_per_msa" in result.output
    assert "horizon" in result.output


def test_pca_without_dataset_exits_1_naming_path(tmp_path):
    cfg = _smoke_cfg_file(tmp_path, tmp_path / "ws")
    result = CliRunner().invoke(cli.main, ["pca", "-c", str(cfg)])
    assert result.exit_code == cli.EXIT_VALIDATION
    assert "dataset" in result.output


def test_malformed_set_override_exits_1(tmp_path):
    cfg = _smoke_cfg_file(tmp_path, tmp_path / "ws")
    result = CliRunner().invoke(cli.main, ["ensemble", "-c", str(cfg),
                                           "-s", "no-equals-sign"])
    assert result.exit_code == cli.EXIT_VALIDATION


def test_workspace_env_override(tmp_path):
    cfg = _smoke_cfg_file(tmp_path, tmp_path / "ignored")
    env_ws = tmp_path / "env_ws"
    result = CliRunner().invoke(cli.main, ["ensemble", "-c", str(cfg)],
                                env={cli.WORKSPACE_ENV: str(env_ws)})
    assert result.exit_code == 0
    assert (env_ws / "dataset" / "meta.json").exists()


# ---------------------------------------------------------------- pipeline

@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    """One full smoke pipeline, reused by the assertion tests below."""
    tmp = tmp_path_factory.mktemp("cli_smoke")
    ws = tmp / "ws"
    cfg = _smoke_cfg_file(tmp, ws)
    result = CliRunner().invoke(cli.main, ["all", "-c", str(cfg)])
    assert result.exit_code == 0, result.output
    return cfg, ws


def test_all_produces_expected_artifacts(smoke_run):
    _, ws = smoke_run
    for rel in ("dataset/meta.json", "dataset/params.csv", "dataset/curves.csv",
                "basis.json", "model.json",
                "calibration/posterior.csv",
                "calibration/posterior_marginals.png",
                "reports/report.csv",
                "reports/report_summary.png",
                "reports/training_history.png"):
        assert (ws / rel).exists(), rel
    for stage in ("ensemble", "pca", "train", "calibrate", "eval"):
        assert (ws / f"manifest_{stage}.json").exists()


def test_manifest_checksums_match_artifacts(smoke_run):
    _, ws = smoke_run
    manifest = json.loads((ws / "manifest_train.json").read_text())
    for rel, digest in {**manifest["inputs"], **manifest["outputs"]}.items():
        path = ws / rel
        assert path.exists()
        assert hashlib.sha256(path.read_bytes()).hexdigest() == digest


def test_rerun_is_byte_identical(smoke_run, tmp_path):
    cfg_old, ws_old = smoke_run
    ws_new = tmp_path / "ws2"
    cfg = _smoke_cfg_file(tmp_path, ws_new)
    result = CliRunner().invoke(cli.main, ["all", "-c", str(cfg)])
    assert result.exit_code == 0, result.output
    old = _hash_tree(ws_old)
    new = _hash_tree(ws_new)
    # the config checksum inside manifests differs (workspace path differs),
    # so compare everything except the manifests themselves
    old_data = {k: v for k, v in old.items() if not k.startswith("manifest_")}
    new_data = {k: v for k, v in new.items() if not k.startswith("manifest_")}
    assert old_data == new_data


def test_set_override_changes_output(tmp_path):
    ws = tmp_path / "ws"
    cfg = _smoke_cfg_file(tmp_path, ws)
    result = CliRunner().invoke(cli.main, ["ensemble", "-c", str(cfg),
                                           "-s", "ensemble.runs_per_msa=5"])
    assert result.exit_code == 0
    meta = json.loads((ws / "dataset" / "meta.json").read_text())
    assert meta["n_records"] == 5 * len(meta["msas"])
