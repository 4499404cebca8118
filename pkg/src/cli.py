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

"""
Command line interface: train, attack, measure robustness and search the attack sensitive matrix.

A run configuration is a dotenv file whose keys are `SECTION__KEY`, for example:

    DATA__SOURCE=blobs
    DATA__N_CLASSES=3
    LOSS__VARIANT=combined_v2
    LOSS__MATRIX=matrix.csv
    TRAIN__EPOCHS=20
    ATTACK__EPSILON=0.1
    SEARCH__XI=0.9
    OUTPUT__DIR=out
"""

try:
    from icecream import ic
except ImportError:  # Graceful fallback if IceCream isn't installed.
    ic = lambda *a: None if not a else (a[0] if len(a) == 1 else a)  # noqa

import json
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Annotated, Any, ClassVar, Literal, Optional

import typer
from dotenv import dotenv_values, load_dotenv
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
)

from attacks import AttackBudget, AttackConfig, CWConfig, craft_pairset, save_results_csv
from dataio import Dataset, SplitSpec, gen_blobs, load_csv, load_idx, split
from losses import (
    M_CAP,
    AttackSensitiveMatrix,
    LossSpec,
    LossVariant,
    load_matrix_csv,
    save_matrix_csv,
)
from nncore import Model, load_model, save_model
from robustness import (
    DEFAULT_PER_PAIR_CAP,
    WeightMatrix,
    critical_class_weights,
    legitimate_accuracy,
    designated_weights,
    robustness_matrix,
    robustness_summary,
)
from search import SearchConfig, SearchTrace, search_lower_bound, search_weighted
from training import TrainConfig, TrainingDivergenceError, fit
from utils import (
    APP_TITLE_FULL,
    APP_TITLE_SHORT,
    APP_VERSION,
    COMMA_STRING,
    EMPTY_STRING,
    SECTION_SEPARATOR,
    ExitCodes,
    canonical_json,
    check_list_subset,
    configure_debug_output,
    default_threads,
    sha256_bytes,
    sha256_file,
)

MATRIX_ROW_SEPARATOR = ";"


class ConfigError(ValueError):
    """A problem with one field of the run configuration."""

    def __init__(self, field: str, message: str | None = None):
        self.field = field
        super().__init__(message or f"Invalid configuration field {field}.")


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(COMMA_STRING) if item.strip()]
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class DataSection(_Section):
    source: Literal["blobs", "csv", "idx"] = "blobs"
    n_classes: int | None = Field(default=None, ge=2)
    per_class: int = Field(default=100, ge=1)
    feature_dim: int = Field(default=8, ge=1)
    spread: float = Field(default=0.1, ge=0.0)
    seed: int = 0
    path: Path | None = None
    images: Path | None = None
    labels: Path | None = None
    downsample: int | None = Field(default=None, ge=1)
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    split_seed: int = 0

    @field_validator("split", mode="before")
    @classmethod
    def _split_fractions(cls, value):
        return _split_list(value)


class ModelSection(_Section):
    hidden_widths: list[int] = Field(default_factory=lambda: [32])
    seed: int = 0

    @field_validator("hidden_widths", mode="before")
    @classmethod
    def _split_widths(cls, value):
        return _split_list(value)


class LossSection(_Section):
    variant: LossVariant = "cross"
    lam: float = Field(default=1.0, ge=0.0, alias="lambda")
    matrix: Path | None = None
    matrix_inline: str | None = None
    m_cap: float = Field(default=M_CAP, ge=1.0)


class TrainSection(_Section):
    epochs: int = Field(default=50, ge=0)
    batch_size: int = Field(default=32, ge=1)
    lr: float = Field(default=0.1, gt=0.0)
    shuffle_seed: int = 0
    augmentation: Literal["none", "pgd", "ensemble"] = "none"
    augment_methods: list[Literal["ifgsm", "pgd", "cw"]] = Field(
        default_factory=lambda: ["pgd"]
    )
    augment_ratio: float = Field(default=0.5, ge=0.0, le=1.0)
    refresh_every: int = Field(default=5, ge=1)
    augment_seed: int = 0

    @field_validator("augment_methods", mode="before")
    @classmethod
    def _split_methods(cls, value):
        return _split_list(value)


class AttackSection(_Section):
    method: Literal["ifgsm", "pgd", "cw"] = "pgd"
    epsilon: float = Field(default=0.05, ge=0.0)
    alpha: float | None = None
    steps: int = Field(default=20, ge=0)
    random_start: bool = True
    cw_c: float = Field(default=1.0, gt=0.0)
    cw_kappa: float = Field(default=0.0, ge=0.0)
    cw_steps: int = Field(default=200, gt=0)
    cw_step_size: float = Field(default=0.01, gt=0.0)
    cw_binary_search_steps: int = Field(default=0, ge=0)
    seed: int = 0
    threads: int | None = Field(default=None, ge=1)
    per_pair_cap: int = Field(default=DEFAULT_PER_PAIR_CAP, ge=1)
    only_clean_correct: bool = False

    def attack_config(self, method: str | None = None) -> AttackConfig:
        return AttackConfig(
            method=method or self.method,
            budget=AttackBudget(
                epsilon=self.epsilon,
                alpha=self.alpha,
                steps=self.steps,
                random_start=self.random_start,
            ),
            cw=CWConfig(
                c=self.cw_c,
                kappa=self.cw_kappa,
                steps=self.cw_steps,
                step_size=self.cw_step_size,
                binary_search_steps=self.cw_binary_search_steps,
            ),
            seed=self.seed,
            threads=self.threads or default_threads(),
        )


class SearchSection(_Section):
    xi: float = Field(default=0.9, ge=0.0)
    delta: float = Field(default=5.0, gt=0.0)
    batch_t: int = Field(default=3, ge=1)
    m_cap: float = Field(default=M_CAP, ge=1.0)
    max_outer_iters: int = Field(default=40, ge=1)
    loss_variant: Literal["v1", "v2"] = "v2"
    lam: float = Field(default=1.0, ge=0.0, alias="lambda")
    per_pair_cap: int = Field(default=DEFAULT_PER_PAIR_CAP, ge=1)
    # A CSV path, or one of the presets 'uniform', 'designated' and 'critical'.
    weights: str | None = None
    weights_seed: int = 0
    critical_class: int = Field(default=0, ge=0)
    critical_mass: float = Field(default=0.8, gt=0.0, le=1.0)


class OutputSection(_Section):
    directory: Path = Field(default=Path("out"), alias="dir")


class RunConfig(BaseModel):
    """
    Everything a command needs, read from one dotenv file.

    Fields:
        data (DataSection): Where the samples come from and how they are split.
        model (ModelSection): Hidden widths and the initialisation seed.
        loss (LossSection): Loss variant, its weight and the attack sensitive matrix.
        train (TrainSection): Training settings.
        attack (AttackSection): Attack settings, used for attacks, robustness and augmentation.
        search (SearchSection): Matrix search settings and the weight matrix.
        output (OutputSection): The output directory.
    """

    SECTIONS: ClassVar[list[str]] = ["data", "model", "loss", "train", "attack", "search", "output"]
    WEIGHT_PRESETS: ClassVar[list[str]] = ["uniform", "designated", "critical"]

    data: DataSection = Field(default_factory=DataSection)
    model: ModelSection = Field(default_factory=ModelSection)
    loss: LossSection = Field(default_factory=LossSection)
    train: TrainSection = Field(default_factory=TrainSection)
    attack: AttackSection = Field(default_factory=AttackSection)
    search: SearchSection = Field(default_factory=SearchSection)
    output: OutputSection = Field(default_factory=OutputSection)

    config_hash: str = EMPTY_STRING

    def _check_file(self, field: str, path: Path | None, base: Path) -> Path | None:
        if path is None:
            return None
        resolved = path if path.is_absolute() else base / path
        if not resolved.is_file():
            raise ConfigError(field, f"{field}: file {resolved} does not exist.")
        return resolved

    def resolve_files(self, base: Path):
        """Resolve relative paths against the configuration's directory and check they exist."""
        data = self.data
        if data.source == "csv":
            if data.path is None:
                raise ConfigError("DATA__PATH", "DATA__PATH is required for CSV data.")
            if data.n_classes is None:
                raise ConfigError("DATA__N_CLASSES", "DATA__N_CLASSES is required for CSV data.")
        if data.source == "idx" and (data.images is None or data.labels is None):
            raise ConfigError(
                "DATA__IMAGES", "DATA__IMAGES and DATA__LABELS are required for IDX data."
            )
        data.path = self._check_file("DATA__PATH", data.path, base)
        data.images = self._check_file("DATA__IMAGES", data.images, base)
        data.labels = self._check_file("DATA__LABELS", data.labels, base)

        loss = self.loss
        if loss.variant != "cross" and loss.matrix is None and loss.matrix_inline is None:
            raise ConfigError(
                "LOSS__MATRIX",
                f"LOSS__MATRIX (or LOSS__MATRIX_INLINE) is required for loss variant"
                f" '{loss.variant}'.",
            )
        loss.matrix = self._check_file("LOSS__MATRIX", loss.matrix, base)

        weights = self.search.weights
        if weights is not None and weights not in RunConfig.WEIGHT_PRESETS:
            self.search.weights = str(self._check_file("SEARCH__WEIGHTS", Path(weights), base))

        if not self.output.directory.is_absolute():
            self.output.directory = base / self.output.directory

    def attack_sensitive_matrix(self, n_classes: int) -> AttackSensitiveMatrix | None:
        """The configured matrix, checked against the number of classes."""
        loss = self.loss
        if loss.matrix is not None:
            matrix = load_matrix_csv(loss.matrix, m_cap=loss.m_cap)
            field = "LOSS__MATRIX"
        elif loss.matrix_inline is not None:
            rows = [
                _split_list(row)
                for row in loss.matrix_inline.split(MATRIX_ROW_SEPARATOR)
                if row.strip()
            ]
            try:
                matrix = AttackSensitiveMatrix(
                    [[float(v) for v in row] for row in rows], m_cap=loss.m_cap
                )
            except ValueError as e:
                raise ConfigError("LOSS__MATRIX_INLINE", f"LOSS__MATRIX_INLINE: {e}") from e
            field = "LOSS__MATRIX_INLINE"
        else:
            return None
        if matrix.n != n_classes:
            raise ConfigError(
                field, f"{field} has {matrix.n} classes, the data {n_classes}."
            )
        return matrix

    def loss_spec(self, n_classes: int) -> LossSpec:
        return LossSpec(
            variant=self.loss.variant,
            lam=self.loss.lam,
            matrix=self.attack_sensitive_matrix(n_classes),
        )

    def train_config(self) -> TrainConfig:
        train = self.train
        return TrainConfig(
            epochs=train.epochs,
            batch_size=train.batch_size,
            lr=train.lr,
            init_seed=self.model.seed,
            shuffle_seed=train.shuffle_seed,
            hidden_widths=self.model.hidden_widths,
            augmentation=train.augmentation,
            augment_attacks=[
                self.attack.attack_config(method) for method in train.augment_methods
            ],
            augment_ratio=train.augment_ratio,
            refresh_every=train.refresh_every,
            augment_seed=train.augment_seed,
        )

    def search_config(self) -> SearchConfig:
        search = self.search
        return SearchConfig(
            xi=search.xi,
            delta=search.delta,
            batch_t=search.batch_t,
            m_cap=search.m_cap,
            max_outer_iters=search.max_outer_iters,
            trainer=self.train_config(),
            inner_attack=self.attack.attack_config(),
            loss_variant=search.loss_variant,
            lam=search.lam,
            per_pair_cap=search.per_pair_cap,
        )

    def weight_matrix(self, n_classes: int) -> WeightMatrix | None:
        search = self.search
        if search.weights is None:
            return None
        if search.weights == "uniform":
            return WeightMatrix.uniform(n_classes)
        if search.weights == "designated":
            return designated_weights(n_classes, seed=search.weights_seed)
        if search.weights == "critical":
            return critical_class_weights(
                n_classes, search.critical_class, search.critical_mass
            )
        weights = WeightMatrix.from_csv(search.weights)
        if weights.n != n_classes:
            raise ConfigError(
                "SEARCH__WEIGHTS",
                f"SEARCH__WEIGHTS has {weights.n} classes, the data {n_classes}.",
            )
        return weights

    def seeds(self) -> dict[str, int]:
        return {
            "data": self.data.seed,
            "split": self.data.split_seed,
            "init": self.model.seed,
            "shuffle": self.train.shuffle_seed,
            "augment": self.train.augment_seed,
            "attack": self.attack.seed,
            "weights": self.search.weights_seed,
        }


def load_run_config(path: str | Path, out: Path | None = None) -> RunConfig:
    """
    Read and validate a run configuration.

    Args:
        path (str | Path): The dotenv file.
        out (Path | None): Overrides the output directory.

    Returns:
        RunConfig: The validated configuration with resolved file paths.

    Raises:
        ConfigError: If a field is unknown, invalid or refers to a missing file.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError("--config", f"Configuration file {path} does not exist.")
    sections: dict[str, dict[str, str]] = {}
    for name, value in dotenv_values(path).items():
        if SECTION_SEPARATOR not in name:
            raise ConfigError(name, f"Key {name} is not of the form SECTION__KEY.")
        if value is None or value.strip() == EMPTY_STRING:
            continue
        section, key = name.split(SECTION_SEPARATOR, 1)
        sections.setdefault(section.lower(), {})[key.lower()] = value.strip()

    unknown = check_list_subset(list(sections), RunConfig.SECTIONS)
    if unknown:
        raise ConfigError(
            unknown[0].upper(),
            f"Unknown configuration section(s): {', '.join(s.upper() for s in unknown)}.",
        )
    try:
        config = RunConfig(**sections)
    except ValidationError as e:
        error = e.errors()[0]
        field = SECTION_SEPARATOR.join(str(part) for part in error["loc"][:2]).upper()
        raise ConfigError(field, f"{field}: {error['msg']}") from e

    config.config_hash = canonical_hash(sections)
    if out is not None:
        config.output.directory = out
    config.resolve_files(path.resolve().parent)
    ic(config)
    return config


def canonical_hash(sections: dict) -> str:
    return sha256_bytes(canonical_json(sections).encode("utf-8"))


class OutputFile(BaseModel):
    path: str
    sha256: str


class RunManifest(BaseModel):
    """
    Provenance of a command's outputs.

    Fields:
        tool (str): The tool name.
        version (str): The tool version.
        command (str): The command that ran.
        config_hash (str): SHA-256 of the canonical configuration.
        started_at (str): UTC start time.
        finished_at (str): UTC end time.
        seeds (dict[str, int]): Every named seed of the configuration.
        outputs (list[OutputFile]): Output files, relative to the output directory, with hashes.
        flags (dict[str, Any]): Findings such as an infeasible accuracy constraint.
    """

    tool: str = APP_TITLE_SHORT
    version: str = APP_VERSION
    command: str
    config_hash: str
    started_at: str
    finished_at: str
    seeds: dict[str, int]
    outputs: list[OutputFile]
    flags: dict[str, Any] = Field(default_factory=dict)

    @classmethod
    def build(
        cls,
        command: str,
        config: RunConfig,
        started_at: str,
        paths: list[Path],
        flags: dict[str, Any] | None = None,
    ) -> "RunManifest":
        out_dir = config.output.directory
        return cls(
            command=command,
            config_hash=config.config_hash,
            started_at=started_at,
            finished_at=_now(),
            seeds=config.seeds(),
            outputs=[
                OutputFile(path=path.relative_to(out_dir).as_posix(), sha256=sha256_file(path))
                for path in sorted(paths)
            ],
            flags=flags or {},
        )

    def save(self, path: Path):
        with open(path, "w") as f:
            f.write(self.model_dump_json(indent=2))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_json(path: Path, payload: Any) -> Path:
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
    return path


def load_dataset(config: RunConfig) -> Dataset:
    data = config.data
    if data.source == "blobs":
        return gen_blobs(
            data.n_classes or 3, data.per_class, data.feature_dim, data.spread, data.seed
        )
    if data.source == "csv":
        return load_csv(data.path, data.n_classes)
    return load_idx(data.images, data.labels, data.downsample, data.n_classes)


def load_splits(config: RunConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Train, validation and test sets."""
    dataset = load_dataset(config)
    return split(
        dataset, SplitSpec(fractions=config.data.split, seed=config.data.split_seed)
    )


def _load_model(model_path: Path | None, n_classes: int) -> Model:
    if model_path is None or not model_path.is_file():
        raise ConfigError("--model", f"Model file {model_path} does not exist.")
    model = load_model(model_path)
    if model.n_classes != n_classes:
        raise ConfigError(
            "--model", f"The model has {model.n_classes} classes, the data {n_classes}."
        )
    return model


@contextmanager
def _exit_codes():
    """Turn validation errors into exit code 2 and divergence into exit code 3."""
    try:
        yield
    except TrainingDivergenceError as e:
        typer.echo(f"Error: {e}", err=True)
        raise typer.Exit(code=ExitCodes.DIVERGENCE)
    except ValueError as e:
        typer.echo(f"Error: {e}", err=True)
        raise typer.Exit(code=ExitCodes.VALIDATION)


app = typer.Typer(
    name=APP_TITLE_SHORT,
    help=APP_TITLE_FULL,
    add_completion=False,
    no_args_is_help=True,
)

ConfigOption = Annotated[Path, typer.Option("--config", help="The run configuration file.")]
OutOption = Annotated[
    Optional[Path], typer.Option("--out", help="Overrides OUTPUT__DIR of the configuration.")
]
ModelOption = Annotated[Optional[Path], typer.Option("--model", help="A model JSON file.")]


@app.callback()
def main():
    """Load environment variables before any command runs."""
    ic(load_dotenv())
    configure_debug_output()


@app.command("train")
def cmd_train(config: ConfigOption, out: OutOption = None):
    """Train a model; writes model.json, metrics.json and manifest.json."""
    with _exit_codes():
        started_at = _now()
        run_config = load_run_config(config, out)
        train_set, val_set, test_set = load_splits(run_config)
        loss_spec = run_config.loss_spec(train_set.n_classes)
        trained = fit(train_set, loss_spec, run_config.train_config(), val_set)

        out_dir = run_config.output.directory
        out_dir.mkdir(parents=True, exist_ok=True)
        model_path = out_dir / "model.json"
        save_model(trained.model, model_path)
        metrics = trained.metrics()
        metrics["test_accuracy"] = legitimate_accuracy(trained.model, test_set)
        metrics_path = _write_json(out_dir / "metrics.json", metrics)
        RunManifest.build("train", run_config, started_at, [model_path, metrics_path]).save(
            out_dir / "manifest.json"
        )
        typer.echo(
            f"Validation accuracy {trained.clean_val_accuracy:.4f}, test accuracy"
            f" {metrics['test_accuracy']:.4f}; outputs in {out_dir}"
        )


@app.command("attack")
def cmd_attack(
    config: ConfigOption,
    source: Annotated[int, typer.Option("--source", help="The true class.")],
    target: Annotated[int, typer.Option("--target", help="The class to reach.")],
    model: ModelOption = None,
    out: OutOption = None,
):
    """Attack every test sample of one class towards another; writes one CSV row per sample."""
    with _exit_codes():
        started_at = _now()
        run_config = load_run_config(config, out)
        _, _, test_set = load_splits(run_config)
        n = test_set.n_classes
        for field, value in (("--source", source), ("--target", target)):
            if not 0 <= value < n:
                raise ConfigError(field, f"{field} {value} is not a class in [0, {n}).")
        attacked = _load_model(model, n)
        samples = test_set.of_class(source).samples
        results = craft_pairset(
            attacked, samples, source, target, run_config.attack.attack_config()
        )

        out_dir = run_config.output.directory
        out_dir.mkdir(parents=True, exist_ok=True)
        results_path = out_dir / f"attack_{source}_{target}.csv"
        save_results_csv(results, source, results_path)
        RunManifest.build("attack", run_config, started_at, [results_path]).save(
            out_dir / "manifest.json"
        )
        successes = sum(r.success for r in results)
        typer.echo(f"{successes} of {len(results)} attacks reached class {target}.")


@app.command("robustness")
def cmd_robustness(config: ConfigOption, model: ModelOption = None, out: OutOption = None):
    """Measure the robustness matrix on the validation and test sets."""
    with _exit_codes():
        started_at = _now()
        run_config = load_run_config(config, out)
        _, val_set, test_set = load_splits(run_config)
        n = test_set.n_classes
        evaluated = _load_model(model, n)
        weights = run_config.weight_matrix(n)
        attack = run_config.attack

        out_dir = run_config.output.directory
        out_dir.mkdir(parents=True, exist_ok=True)
        paths, summary = [], {}
        for name, eval_set in (("val", val_set), ("test", test_set)):
            R = robustness_matrix(
                evaluated,
                eval_set,
                attack.attack_config(),
                attack.per_pair_cap,
                attack.only_clean_correct,
            )
            csv_path = out_dir / f"robustness_{name}.csv"
            json_path = out_dir / f"robustness_{name}.json"
            R.save_csv(csv_path)
            R.save_json(json_path)
            paths.extend([csv_path, json_path])
            summary[name] = robustness_summary(R, weights)
            summary[name]["clean_accuracy"] = legitimate_accuracy(evaluated, eval_set)
        paths.append(_write_json(out_dir / "robustness_summary.json", summary))
        RunManifest.build("robustness", run_config, started_at, paths).save(
            out_dir / "manifest.json"
        )
        for name in ("val", "test"):
            typer.echo(f"[{name}] {summary[name]}")


@app.command("search")
def cmd_search(
    config: ConfigOption,
    objective: Annotated[
        str, typer.Option("--objective", help="'weighted' or 'lower'.")
    ] = "weighted",
    resume: Annotated[
        Optional[Path], typer.Option("--resume", help="A trace to continue from.")
    ] = None,
    out: OutOption = None,
):
    """Search the attack sensitive matrix; writes the matrix, trace, model and manifest."""
    with _exit_codes():
        started_at = _now()
        if objective not in ("weighted", "lower"):
            raise ConfigError(
                "--objective", f"--objective must be 'weighted' or 'lower', got '{objective}'."
            )
        run_config = load_run_config(config, out)
        train_set, val_set, _ = load_splits(run_config)
        n = train_set.n_classes
        weights = run_config.weight_matrix(n)
        if objective == "weighted" and weights is None:
            raise ConfigError(
                "SEARCH__WEIGHTS", "SEARCH__WEIGHTS is required for the weighted search."
            )
        search_config = run_config.search_config()

        out_dir = run_config.output.directory
        out_dir.mkdir(parents=True, exist_ok=True)
        trace_path = out_dir / "trace.jsonl"
        if resume is not None:
            if not resume.is_file():
                raise ConfigError("--resume", f"Trace file {resume} does not exist.")
            trace = SearchTrace.load_jsonl(resume, attach=False)
            if resume.resolve() != trace_path.resolve():
                trace.save_jsonl(trace_path)
            trace.path = trace_path
        else:
            trace_path.write_text(EMPTY_STRING)
            trace = SearchTrace(path=trace_path)

        if objective == "weighted":
            matrix, trace = search_weighted(
                train_set, val_set, weights, search_config, resume=trace
            )
        else:
            matrix, trace = search_lower_bound(
                train_set, val_set, search_config, resume=trace
            )

        matrix_path = out_dir / "matrix.csv"
        save_matrix_csv(matrix, matrix_path)
        model_path = out_dir / "model.json"
        save_model(trace.final_model, model_path)
        result = {
            "objective": objective,
            "constraint_infeasible": trace.infeasible,
            "records": len(trace),
            "final_accuracy": trace.last.accuracy,
            "xi": search_config.xi,
        }
        result_path = _write_json(out_dir / "search.json", result)
        RunManifest.build(
            "search",
            run_config,
            started_at,
            [matrix_path, trace_path, model_path, result_path],
            flags={"constraint_infeasible": trace.infeasible},
        ).save(out_dir / "manifest.json")
        if trace.infeasible:
            typer.echo("constraint-infeasible: the initial matrix already fails the threshold.")
        typer.echo(f"Final matrix after {len(trace)} records written to {matrix_path}")


if __name__ == "__main__":
    app()
