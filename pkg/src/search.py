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
Greedy search of the attack sensitive matrix, either for the weighted average robustness or for
the lower bound robustness, under a legitimate accuracy constraint.

The loops themselves live in `workflows.weighted_search` and `workflows.lower_bound_search`; this
module holds their configuration, their trace and the hooks that train and evaluate a model for a
given matrix.
"""

try:
    from icecream import ic
except ImportError:  # Graceful fallback if IceCream isn't installed.
    ic = lambda *a: None if not a else (a[0] if len(a) == 1 else a)  # noqa

from pathlib import Path
from typing import Any, Literal, Protocol

from pydantic import BaseModel, ConfigDict, Field, model_validator

from attacks import AttackConfig
from dataio import Dataset
from losses import M_CAP, AttackSensitiveMatrix, LossSpec
from robustness import (
    DEFAULT_PER_PAIR_CAP,
    RobustnessMatrix,
    WeightMatrix,
    legitimate_accuracy,
    robustness_matrix,
)
from training import TrainConfig, fit

SearchAction = Literal[
    "increment", "revert", "reject", "cap", "budget", "infeasible", "done"
]
TERMINAL_ACTIONS = ("infeasible", "done")


class SearchConfig(BaseModel):
    """
    Settings of a matrix search.

    Fields:
        xi (float): Validation accuracy must stay strictly above this threshold.
        delta (float): Step added to an entry.
        batch_t (int): Entries raised per iteration when searching the lower bound.
        m_cap (float): Upper bound of every entry.
        max_outer_iters (int): Checks per pair (weighted) or in total (lower bound).
        trainer (TrainConfig): How each candidate matrix is trained.
        inner_attack (AttackConfig): Attack ranking the cells when searching the lower bound.
        loss_variant (str): Sensitive loss combined with cross entropy, 'v1' or 'v2'.
        lam (float): Weight of the sensitive loss.
        per_pair_cap (int): Samples attacked per cell when measuring robustness.
    """

    xi: float = Field(default=0.9, ge=0.0)
    delta: float = Field(default=5.0, gt=0.0)
    batch_t: int = Field(default=3, ge=1)
    m_cap: float = Field(default=M_CAP, ge=1.0)
    max_outer_iters: int = Field(default=40, ge=1)
    trainer: TrainConfig = Field(default_factory=TrainConfig)
    inner_attack: AttackConfig = Field(default_factory=AttackConfig)
    loss_variant: Literal["v1", "v2"] = "v2"
    lam: float = Field(default=1.0, ge=0.0, alias="lambda")
    per_pair_cap: int = Field(default=DEFAULT_PER_PAIR_CAP, ge=1)

    model_config = ConfigDict(populate_by_name=True)

    @model_validator(mode="after")
    def _check_delta(self) -> "SearchConfig":
        if self.delta > self.m_cap:
            raise ValueError(f"delta {self.delta} exceeds m_cap {self.m_cap}.")
        return self

    def loss_spec(self, matrix: AttackSensitiveMatrix) -> LossSpec:
        return LossSpec(variant=f"combined_{self.loss_variant}", lam=self.lam, matrix=matrix)

    def initial_matrix(self, n: int) -> AttackSensitiveMatrix:
        """All ones off the diagonal."""
        return AttackSensitiveMatrix.uniform(n, 1.0, m_cap=self.m_cap)


class SearchRecord(BaseModel):
    """
    One constraint check of a search.

    Fields:
        iteration (int): Position of the check in the whole search.
        objective (str): 'weighted' or 'lower'.
        pair_index (int | None): Position of the pair in the weight ordering (weighted search).
        cells (list[list[int]]): Entries the action changed.
        matrix (list[list[float]]): The matrix after the action.
        accuracy (float | None): Validation accuracy of the checked matrix.
        checked_matrix (list[list[float]] | None): The matrix `accuracy` was measured on; differs
            from `matrix` on raises and reverts. None in traces written before it was recorded.
        action (str): What the search did after the check.
        robustness (dict | None): Robustness summary used to pick the cells, when measured.
        infeasible (bool): Whether the very first matrix already violated the constraint.
    """

    iteration: int
    objective: Literal["weighted", "lower"]
    pair_index: int | None = None
    cells: list[list[int]] = Field(default_factory=list)
    matrix: list[list[float]]
    accuracy: float | None = None
    checked_matrix: list[list[float]] | None = None
    action: SearchAction
    robustness: dict | None = None
    infeasible: bool = False


class SearchTrace:
    """
    Append-only record of a search, optionally mirrored to a JSON-lines file as it grows.
    """

    def __init__(self, records: list[SearchRecord] | None = None, path: str | Path | None = None):
        self.records: list[SearchRecord] = list(records or [])
        self.path = Path(path) if path is not None else None
        # The model trained on the returned matrix, set when the search finishes.
        self.final_model: Any = None

    def append(self, record: SearchRecord):
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(record.model_dump_json(by_alias=True) + "\n")

    @property
    def last(self) -> SearchRecord | None:
        return self.records[-1] if self.records else None

    @property
    def infeasible(self) -> bool:
        return any(record.infeasible for record in self.records)

    @property
    def finished(self) -> bool:
        return self.last is not None and self.last.action in TERMINAL_ACTIONS

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def load_jsonl(cls, path: str | Path, attach: bool = True) -> "SearchTrace":
        """
        Read a trace written as JSON lines.

        Args:
            path (str | Path): The trace file.
            attach (bool): Keep appending new records to the same file.

        Returns:
            SearchTrace: The trace so far.
        """
        records = []
        with open(path) as f:
            for line in f:
                if line.strip():
                    records.append(SearchRecord.model_validate_json(line))
        return cls(records, path if attach else None)

    def save_jsonl(self, path: str | Path):
        with open(path, "w") as f:
            for record in self.records:
                f.write(record.model_dump_json(by_alias=True) + "\n")


class SearchHooks(Protocol):
    """Training and evaluation of a candidate matrix, as seen by the search loops."""

    def fit(self, matrix: AttackSensitiveMatrix) -> Any: ...

    def accuracy(self, model: Any) -> float: ...

    def robustness(self, model: Any) -> RobustnessMatrix: ...


class TrainingHooks:
    """
    Retrains from scratch with the fixed seeds of the training configuration, so the accuracy is
    a deterministic function of the matrix.
    """

    def __init__(self, train_set: Dataset, val_set: Dataset, cfg: SearchConfig):
        if len(train_set) == 0 or len(val_set) == 0:
            raise ValueError("Search needs nonempty training and validation sets.")
        self.train_set = train_set
        self.val_set = val_set
        self.cfg = cfg

    def fit(self, matrix: AttackSensitiveMatrix):
        return fit(self.train_set, self.cfg.loss_spec(matrix), self.cfg.trainer).model

    def accuracy(self, model) -> float:
        return legitimate_accuracy(model, self.val_set)

    def robustness(self, model) -> RobustnessMatrix:
        return robustness_matrix(
            model, self.val_set, self.cfg.inner_attack, self.cfg.per_pair_cap
        )


def search_weighted(
    train_set: Dataset | None,
    val_set: Dataset | None,
    W: WeightMatrix,
    cfg: SearchConfig,
    hooks: SearchHooks | None = None,
    resume: SearchTrace | None = None,
) -> tuple[AttackSensitiveMatrix, SearchTrace]:
    """
    Raise the entries of the attack sensitive matrix one pair at a time, most important pair
    first, for as long as the validation accuracy stays above the threshold.

    Args:
        train_set (Dataset | None): Training samples; may be None when `hooks` are given.
        val_set (Dataset | None): Validation samples; may be None when `hooks` are given.
        W (WeightMatrix): Importance of every pair.
        cfg (SearchConfig): Search settings.
        hooks (SearchHooks | None): Training and evaluation; defaults to `TrainingHooks`.
        resume (SearchTrace | None): A trace to continue from.

    Returns:
        tuple[AttackSensitiveMatrix, SearchTrace]: The final matrix and the trace, whose
        `final_model` is the model trained on that matrix.
    """
    # The workflows import this module's types.
    from engine import SearchEngine

    hooks = hooks or TrainingHooks(train_set, val_set, cfg)
    return SearchEngine().run_search(
        "weighted", hooks=hooks, config=cfg, n_classes=W.n, weights=W, resume=resume
    )


def search_lower_bound(
    train_set: Dataset | None,
    val_set: Dataset | None,
    cfg: SearchConfig,
    hooks: SearchHooks | None = None,
    resume: SearchTrace | None = None,
    n_classes: int | None = None,
) -> tuple[AttackSensitiveMatrix, SearchTrace]:
    """
    Repeatedly raise the `batch_t` entries whose cells have the lowest robustness, for as long as
    the validation accuracy stays above the threshold.

    Args:
        train_set (Dataset | None): Training samples; may be None when `hooks` are given.
        val_set (Dataset | None): Validation samples; may be None when `hooks` are given.
        cfg (SearchConfig): Search settings.
        hooks (SearchHooks | None): Training and evaluation; defaults to `TrainingHooks`.
        resume (SearchTrace | None): A trace to continue from.
        n_classes (int | None): The number of classes; taken from `train_set` when omitted.

    Returns:
        tuple[AttackSensitiveMatrix, SearchTrace]: The final matrix and the trace.
    """
    from engine import SearchEngine

    if n_classes is None:
        if train_set is None:
            raise ValueError("n_classes is required when no training set is given.")
        n_classes = train_set.n_classes
    hooks = hooks or TrainingHooks(train_set, val_set, cfg)
    return SearchEngine().run_search(
        "lower", hooks=hooks, config=cfg, n_classes=n_classes, resume=resume
    )
