# Copyright 2024 Anirban Basu

# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at

#     http://www.apache.org/licenses/LICENSE-2.0

# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

import json
from pathlib import Path

import pandas as pd
import pytest
from typer.testing import CliRunner

from cli import ConfigError, app, load_run_config, load_splits
from losses import load_matrix_csv
from utils import ExitCodes

runner = CliRunner()

BASE_CONFIG = {
    "DATA__SOURCE": "blobs",
    "DATA__N_CLASSES": "3",
    "DATA__PER_CLASS": "30",
    "DATA__FEATURE_DIM": "4",
    "MODEL__HIDDEN_WIDTHS": "8",
    "TRAIN__EPOCHS": "3",
    "TRAIN__BATCH_SIZE": "16",
    "ATTACK__STEPS": "3",
    "ATTACK__THREADS": "1",
    "ATTACK__PER_PAIR_CAP": "3",
    "SEARCH__PER_PAIR_CAP": "3",
    "OUTPUT__DIR": "out",
}


def _write_config(directory: Path, name: str = "run.env", **overrides: str) -> Path:
    entries = {**BASE_CONFIG, **overrides}
    path = directory / name
    path.write_text("".join(f"{key}={value}\n" for key, value in entries.items()))
    return path


def _read_json(path: Path):
    with open(path) as f:
        return json.load(f)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A configuration together with the output directory of its train command."""
    directory = tmp_path_factory.mktemp("trained")
    config = _write_config(directory)
    result = runner.invoke(app, ["train", "--config", str(config)])
    assert result.exit_code == 0, result.output
    return config, directory / "out"


def test_train_writes_model_metrics_and_manifest(trained):
    _, out_dir = trained
    for name in ("model.json", "metrics.json", "manifest.json"):
        assert (out_dir / name).is_file()
    metrics = _read_json(out_dir / "metrics.json")
    assert 0.0 <= metrics["test_accuracy"] <= 1.0
    assert len(metrics["loss_curve"]) == 3
    manifest = _read_json(out_dir / "manifest.json")
    assert manifest["command"] == "train"
    assert [o["path"] for o in manifest["outputs"]] == ["metrics.json", "model.json"]
    assert manifest["seeds"]["init"] == 0
    assert len(manifest["config_hash"]) == 64


def test_rerunning_train_reproduces_the_outputs(trained, tmp_path):
    config, out_dir = trained
    result = runner.invoke(app, ["train", "--config", str(config), "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    first = _read_json(out_dir / "manifest.json")
    second = _read_json(tmp_path / "manifest.json")
    assert first["outputs"] == second["outputs"]
    assert first["config_hash"] == second["config_hash"]


def test_sensitive_loss_without_a_matrix_is_a_config_error(tmp_path):
    config = _write_config(tmp_path, LOSS__VARIANT="combined_v2")
    result = runner.invoke(app, ["train", "--config", str(config)])
    assert result.exit_code == ExitCodes.VALIDATION
    assert "LOSS__MATRIX" in result.output


def test_unknown_section_is_a_config_error(tmp_path):
    config = _write_config(tmp_path, OPTIMISER__MOMENTUM="0.9")
    result = runner.invoke(app, ["train", "--config", str(config)])
    assert result.exit_code == ExitCodes.VALIDATION
    assert "OPTIMISER" in result.output


def test_missing_config_file(tmp_path):
    result = runner.invoke(app, ["train", "--config", str(tmp_path / "absent.env")])
    assert result.exit_code == ExitCodes.VALIDATION


def test_divergence_has_its_own_exit_code(tmp_path):
    config = _write_config(tmp_path, TRAIN__LR="1e300")
    result = runner.invoke(app, ["train", "--config", str(config)])
    assert result.exit_code == ExitCodes.DIVERGENCE
    assert "diverged" in result.output


def test_train_with_an_inline_matrix(tmp_path):
    config = _write_config(
        tmp_path,
        LOSS__VARIANT="combined_v2",
        LOSS__LAMBDA="0.5",
        LOSS__MATRIX_INLINE="0,2,1;1,0,1;1,1,0",
    )
    result = runner.invoke(app, ["train", "--config", str(config)])
    assert result.exit_code == 0, result.output
    loss = _read_json(tmp_path / "out" / "metrics.json")["config"]["loss"]
    assert loss["lambda"] == 0.5
    assert loss["matrix"] == [[0.0, 2.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]]


def test_attack_writes_one_row_per_sample(trained, tmp_path):
    config, out_dir = trained
    result = runner.invoke(
        app,
        [
            "attack",
            "--config",
            str(config),
            "--source",
            "0",
            "--target",
            "2",
            "--model",
            str(out_dir / "model.json"),
            "--out",
            str(tmp_path),
        ],
    )
    assert result.exit_code == 0, result.output
    _, _, test_set = load_splits(load_run_config(config))
    k = len(test_set.of_class(0))
    # Every source sample is attacked, regardless of ATTACK__PER_PAIR_CAP.
    assert k == 6
    frame = pd.read_csv(tmp_path / "attack_0_2.csv")
    assert len(frame) == k
    assert frame["sample_index"].tolist() == list(range(k))
    assert set(frame["target"]) == {2}
    assert (frame["linf"] <= 0.05 + 1e-9).all()


def test_attack_rejects_a_class_out_of_range(trained, tmp_path):
    config, out_dir = trained
    result = runner.invoke(
        app,
        [
            "attack",
            "--config",
            str(config),
            "--source",
            "0",
            "--target",
            "3",
            "--model",
            str(out_dir / "model.json"),
            "--out",
            str(tmp_path),
        ],
    )
    assert result.exit_code == ExitCodes.VALIDATION
    assert "--target" in result.output


def test_robustness_on_validation_and_test(trained, tmp_path):
    config, out_dir = trained
    result = runner.invoke(
        app,
        [
            "robustness",
            "--config",
            str(config),
            "--model",
            str(out_dir / "model.json"),
            "--out",
            str(tmp_path),
        ],
    )
    assert result.exit_code == 0, result.output
    summary = _read_json(tmp_path / "robustness_summary.json")
    for name in ("val", "test"):
        assert (tmp_path / f"robustness_{name}.csv").is_file()
        assert 0.0 <= summary[name]["min_r"] <= 1.0
        assert 0.0 <= summary[name]["clean_accuracy"] <= 1.0
    manifest = _read_json(tmp_path / "manifest.json")
    assert len(manifest["outputs"]) == 5


def test_robustness_requires_a_model(trained, tmp_path):
    config, _ = trained
    result = runner.invoke(
        app, ["robustness", "--config", str(config), "--out", str(tmp_path)]
    )
    assert result.exit_code == ExitCodes.VALIDATION


def test_infeasible_search_is_flagged(tmp_path):
    config = _write_config(tmp_path, SEARCH__XI="1.01")
    result = runner.invoke(app, ["search", "--config", str(config), "--objective", "lower"])
    assert result.exit_code == 0, result.output
    assert "constraint-infeasible" in result.output
    out_dir = tmp_path / "out"
    assert _read_json(out_dir / "manifest.json")["flags"]["constraint_infeasible"] is True
    search = _read_json(out_dir / "search.json")
    assert search["constraint_infeasible"] is True
    assert search["records"] == 1
    assert load_matrix_csv(out_dir / "matrix.csv").to_list() == [
        [0.0, 1.0, 1.0],
        [1.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
    ]


def test_weighted_search_needs_weights(tmp_path):
    config = _write_config(tmp_path)
    result = runner.invoke(app, ["search", "--config", str(config), "--objective", "weighted"])
    assert result.exit_code == ExitCodes.VALIDATION
    assert "SEARCH__WEIGHTS" in result.output


def test_unknown_objective(tmp_path):
    config = _write_config(tmp_path)
    result = runner.invoke(app, ["search", "--config", str(config), "--objective", "mean"])
    assert result.exit_code == ExitCodes.VALIDATION


@pytest.mark.parametrize(
    "objective, overrides",
    [
        ("lower", {"SEARCH__MAX_OUTER_ITERS": "2", "SEARCH__BATCH_T": "2"}),
        ("weighted", {"SEARCH__MAX_OUTER_ITERS": "1", "SEARCH__WEIGHTS": "uniform"}),
    ],
)
def test_resumed_search_matches_an_uninterrupted_one(tmp_path, objective, overrides):
    config = _write_config(tmp_path, SEARCH__XI="0", SEARCH__DELTA="2", **overrides)
    full_dir, resumed_dir = tmp_path / "full", tmp_path / "resumed"
    result = runner.invoke(
        app,
        ["search", "--config", str(config), "--objective", objective, "--out", str(full_dir)],
    )
    assert result.exit_code == 0, result.output
    full_lines = (full_dir / "trace.jsonl").read_text().splitlines()
    assert json.loads(full_lines[-1])["action"] == "done"

    resumed_dir.mkdir()
    partial = resumed_dir / "trace.jsonl"
    partial.write_text("".join(f"{line}\n" for line in full_lines[:2]))
    result = runner.invoke(
        app,
        [
            "search",
            "--config",
            str(config),
            "--objective",
            objective,
            "--resume",
            str(partial),
            "--out",
            str(resumed_dir),
        ],
    )
    assert result.exit_code == 0, result.output
    assert partial.read_text().splitlines() == full_lines
    assert (resumed_dir / "matrix.csv").read_text() == (full_dir / "matrix.csv").read_text()


def test_load_run_config_reads_sections(tmp_path):
    config = load_run_config(
        _write_config(
            tmp_path,
            LOSS__VARIANT="combined_v1",
            LOSS__LAMBDA="0.25",
            LOSS__MATRIX_INLINE="0,3;2,0",
            DATA__N_CLASSES="2",
            DATA__SPLIT="0.5,0.25,0.25",
            SEARCH__LAMBDA="2",
            TRAIN__AUGMENT_METHODS="pgd, ifgsm",
        )
    )
    assert config.loss.lam == 0.25
    assert config.search.lam == 2.0
    assert config.data.split == (0.5, 0.25, 0.25)
    assert config.train.augment_methods == ["pgd", "ifgsm"]
    assert config.output.directory == tmp_path.resolve() / "out"
    assert config.attack_sensitive_matrix(2).entries[0, 1] == 3.0
    assert [a.method for a in config.train_config().augment_attacks] == ["pgd", "ifgsm"]
    with pytest.raises(ConfigError) as excinfo:
        config.attack_sensitive_matrix(3)
    assert excinfo.value.field == "LOSS__MATRIX_INLINE"


def test_config_hash_ignores_key_order(tmp_path):
    a = _write_config(tmp_path, "a.env")
    b = tmp_path / "b.env"
    b.write_text("".join(reversed(a.read_text().splitlines(keepends=True))))
    assert load_run_config(a).config_hash == load_run_config(b).config_hash
    c = _write_config(tmp_path, "c.env", TRAIN__EPOCHS="4")
    assert load_run_config(c).config_hash != load_run_config(a).config_hash


@pytest.mark.parametrize(
    "overrides, field",
    [
        ({"TRAIN__EPOCHS": "-1"}, "TRAIN__EPOCHS"),
        ({"ATTACK__METHOD": "fgsm"}, "ATTACK__METHOD"),
        ({"ATTACK__RADIUS": "0.1"}, "ATTACK__RADIUS"),
        ({"LOSS__MATRIX": "absent.csv", "LOSS__VARIANT": "v1"}, "LOSS__MATRIX"),
        ({"SEARCH__WEIGHTS": "absent.csv"}, "SEARCH__WEIGHTS"),
        ({"DATA__SOURCE": "csv"}, "DATA__PATH"),
        ({"EPOCHS": "3"}, "EPOCHS"),
    ],
)
def test_config_errors_name_the_field(tmp_path, overrides, field):
    with pytest.raises(ConfigError) as excinfo:
        load_run_config(_write_config(tmp_path, **overrides))
    assert excinfo.value.field == field
