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

"""Per-pair robustness, weighted average robustness, lower bound robustness and legitimate accuracy."""

try:
    from icecream import ic
except ImportError:  # Graceful fallback if IceCream isn't installed.
    ic = lambda *a: None if not a else (a[0] if len(a) == 1 else a)  # noqa

import json
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from attacks import AdversarialResult, AttackConfig, craft_pairset, sample_seed
from dataio import Dataset
from nncore import Model, predict_batch
from utils import DIAGONAL_STRING, FLOAT_ROUND_TRIP_DIGITS, NOT_AVAILABLE_STRING

DEFAULT_PER_PAIR_CAP = 25
DESIGNATED_WEIGHTS = (0.4, 0.2, 0.08, 0.06, 0.04, 0.02)
WEIGHT_SUM_TOLERANCE = 1e-9

# (model, x, source, target, sample_index) -> AdversarialResult
Crafter = Callable[[Model, np.ndarray, int, int, int], AdversarialResult]


class EmptyCellError(ValueError):
    """Raised when a computation needs a robustness cell for which no example was crafted."""

    def __init__(self, cell: tuple[int, int], message: str | None = None):
        self.cell = cell
        super().__init__(message or f"Robustness cell {cell} is empty.")


def off_diagonal_cells(n: int) -> list[tuple[int, int]]:
    """Every (i, j) with i != j, row-major."""
    return [(i, j) for i in range(n) for j in range(n) if i != j]


class RobustnessMatrix:
    """
    Fraction of targeted adversarial examples from class i towards class j still classified as i.

    Cells for which nothing was crafted are empty (NaN), never 0. The diagonal does not apply and
    is also NaN.
    """

    def __init__(self, num_correct: np.ndarray, num_crafted: np.ndarray):
        num_correct = np.array(num_correct, dtype=np.int64)
        num_crafted = np.array(num_crafted, dtype=np.int64)
        if num_correct.shape != num_crafted.shape or num_correct.ndim != 2:
            raise ValueError("Count matrices must be square and of equal shape.")
        if np.any(num_correct < 0) or np.any(num_correct > num_crafted):
            raise ValueError("Correct counts must lie within [0, crafted].")
        np.fill_diagonal(num_correct, 0)
        np.fill_diagonal(num_crafted, 0)
        self.num_correct = num_correct
        self.num_crafted = num_crafted
        with np.errstate(invalid="ignore", divide="ignore"):
            values = np.where(
                num_crafted > 0, num_correct / np.maximum(num_crafted, 1), np.nan
            )
        self.values = values

    @classmethod
    def from_values(cls, values: np.ndarray | list, crafted: int = 1_000_000) -> "RobustnessMatrix":
        """
        A matrix with prescribed cell values; NaN marks empty cells.

        Values are stored as counts over `crafted` examples, so they must be representable at that
        resolution.
        """
        values = np.array(values, dtype=np.float64)
        num_crafted = np.where(np.isnan(values), 0, crafted)
        num_correct = np.where(np.isnan(values), 0, np.rint(np.nan_to_num(values) * crafted))
        return cls(num_correct.astype(np.int64), num_crafted.astype(np.int64))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def is_empty(self, cell: tuple[int, int]) -> bool:
        return bool(self.num_crafted[cell] == 0)

    def filled_cells(self) -> list[tuple[int, int]]:
        """Non-empty off-diagonal cells, row-major."""
        return [cell for cell in off_diagonal_cells(self.n) if not self.is_empty(cell)]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "values": [
                [None if np.isnan(v) else float(v) for v in row] for row in self.values
            ],
            "num_correct": self.num_correct.tolist(),
            "num_crafted": self.num_crafted.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "RobustnessMatrix":
        return cls(np.array(payload["num_correct"]), np.array(payload["num_crafted"]))

    def to_frame(self) -> pd.DataFrame:
        """Cell values as strings: the diagonal marked, empty cells as NA."""
        rows = []
        for i in range(self.n):
            row = []
            for j in range(self.n):
                if i == j:
                    row.append(DIAGONAL_STRING)
                elif self.is_empty((i, j)):
                    row.append(NOT_AVAILABLE_STRING)
                else:
                    row.append(repr(float(self.values[i, j])))
            rows.append(row)
        return pd.DataFrame(rows)

    def save_csv(self, path: str | Path):
        self.to_frame().to_csv(path, header=False, index=False)

    def save_json(self, path: str | Path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)


def read_robustness_csv(path: str | Path) -> np.ndarray:
    """Cell values of a robustness CSV, with NaN for empty and diagonal cells."""
    frame = pd.read_csv(path, header=None, dtype=str, keep_default_na=False)
    values = np.full(frame.shape, np.nan)
    for (i, j), text in np.ndenumerate(frame.to_numpy()):
        if text not in (DIAGONAL_STRING, NOT_AVAILABLE_STRING):
            values[i, j] = float(text)
    return values


class WeightMatrix:
    """Importance of every pair in the weighted average: nonnegative, zero diagonal, summing to 1."""

    def __init__(self, entries: np.ndarray | list):
        entries = np.array(entries, dtype=np.float64)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise ValueError(f"Weight matrix must be square, got shape {entries.shape}.")
        if not np.all(np.isfinite(entries)) or np.any(entries < 0.0):
            raise ValueError("Weights must be finite and nonnegative.")
        if np.any(np.diag(entries) != 0.0):
            raise ValueError("Weight matrix must have zeros on its diagonal.")
        if abs(float(np.sum(entries)) - 1.0) > WEIGHT_SUM_TOLERANCE:
            raise ValueError(f"Weights must sum to 1, got {float(np.sum(entries))}.")
        entries.setflags(write=False)
        self.entries = entries

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @classmethod
    def uniform(cls, n: int) -> "WeightMatrix":
        entries = np.full((n, n), 1.0 / (n * (n - 1)))
        np.fill_diagonal(entries, 0.0)
        return cls(entries)

    @classmethod
    def from_csv(cls, path: str | Path) -> "WeightMatrix":
        try:
            frame = pd.read_csv(
            path, header=None, dtype=np.float64, float_precision="round_trip"
        )
        except (ValueError, pd.errors.ParserError) as e:
            raise ValueError(f"Malformed weight matrix file {path}: {e}") from e
        return cls(frame.to_numpy())

    def save_csv(self, path: str | Path):
        pd.DataFrame(self.entries).to_csv(
            path, header=False, index=False, float_format=f"%.{FLOAT_ROUND_TRIP_DIGITS}g"
        )

    def support(self) -> list[tuple[int, int]]:
        """Cells with positive weight, row-major."""
        return [cell for cell in off_diagonal_cells(self.n) if self.entries[cell] > 0.0]


def designated_weights(
    n: int,
    weights: Sequence[float] = DESIGNATED_WEIGHTS,
    seed: int = 0,
    cells: Sequence[tuple[int, int]] | None = None,
) -> WeightMatrix:
    """
    Designated weights on a few cells and the remaining mass spread uniformly over the others.

    Args:
        n (int): The number of classes.
        weights (Sequence[float]): The designated weights, summing to at most 1.
        seed (int): Seed choosing the designated cells when `cells` is not given.
        cells (Sequence[tuple[int, int]] | None): Explicit cells for the designated weights.

    Returns:
        WeightMatrix: The weights. When the designated weights cover every off-diagonal cell they
        are rescaled to sum to 1.
    """
    all_cells = off_diagonal_cells(n)
    if len(weights) > len(all_cells):
        raise ValueError(
            f"{len(weights)} designated weights do not fit in {len(all_cells)} cells."
        )
    if sum(weights) > 1.0 + WEIGHT_SUM_TOLERANCE:
        raise ValueError("Designated weights must sum to at most 1.")
    if cells is None:
        order = np.random.default_rng(seed).permutation(len(all_cells))
        cells = [all_cells[k] for k in order[: len(weights)]]
    if len(cells) != len(weights) or len(set(cells)) != len(cells):
        raise ValueError("Designated cells must be distinct and match the weights.")

    entries = np.zeros((n, n))
    for cell, weight in zip(cells, weights):
        if cell[0] == cell[1]:
            raise ValueError(f"Cell {cell} lies on the diagonal.")
        entries[cell] = weight
    others = [cell for cell in all_cells if cell not in set(cells)]
    if others:
        share = (1.0 - sum(weights)) / len(others)
        for cell in others:
            entries[cell] = share
    else:
        entries /= np.sum(entries)
    return WeightMatrix(entries)


def critical_class_weights(n: int, critical: int, mass: float = 0.8) -> WeightMatrix:
    """
    Weight `mass` spread uniformly over row `critical`, the rest uniformly over the other rows.

    Args:
        n (int): The number of classes.
        critical (int): The class whose misclassification matters most.
        mass (float): The total weight of its row.

    Returns:
        WeightMatrix: The weights.
    """
    if not 0 <= critical < n:
        raise ValueError(f"Critical class {critical} outside [0, {n}).")
    if not 0.0 < mass <= 1.0:
        raise ValueError(f"Critical mass must lie in (0, 1], got {mass}.")
    entries = np.full((n, n), (1.0 - mass) / ((n - 1) * (n - 1)))
    entries[critical, :] = mass / (n - 1)
    np.fill_diagonal(entries, 0.0)
    return WeightMatrix(entries)


def _attack_crafter(attack: AttackConfig, n: int) -> Callable:
    def craft(model: Model, samples, source: int, target: int):
        cell_attack = attack.model_copy(
            update={"seed": sample_seed(attack.seed, source * n + target)}
        )
        return craft_pairset(model, samples, source, target, cell_attack)

    return craft


def robustness_matrix(
    model: Model,
    eval_set: Dataset,
    attack: AttackConfig | Crafter,
    per_pair_cap: int = DEFAULT_PER_PAIR_CAP,
    only_clean_correct: bool = False,
) -> RobustnessMatrix:
    """
    Craft targeted examples for every ordered pair of classes and count how many keep their class.

    Args:
        model (Model): The evaluated model, read only.
        eval_set (Dataset): Samples to attack.
        attack (AttackConfig | Crafter): The attack, or a crafting function called per sample.
        per_pair_cap (int): At most this many class-i samples are attacked for each target.
        only_clean_correct (bool): Attack only samples the model already classifies correctly.

    Returns:
        RobustnessMatrix: Counts and values; classes without samples leave their row empty.
    """
    if len(eval_set) == 0:
        raise ValueError("Cannot evaluate robustness on an empty set.")
    if per_pair_cap < 1:
        raise ValueError(f"per_pair_cap must be at least 1, got {per_pair_cap}.")
    n = eval_set.n_classes
    if n != model.n_classes:
        raise ValueError(f"Dataset has {n} classes, the model {model.n_classes}.")

    if isinstance(attack, AttackConfig):
        craft = _attack_crafter(attack, n)
    else:

        def craft(model, samples, source, target):
            return [
                attack(model, x, source, target, index)
                for index, (x, _) in enumerate(samples)
            ]

    num_correct = np.zeros((n, n), dtype=np.int64)
    num_crafted = np.zeros((n, n), dtype=np.int64)
    for source in range(n):
        members = eval_set.of_class(source)
        if only_clean_correct and len(members) > 0:
            members = members.subset(
                np.flatnonzero(predict_batch(model, members.inputs) == source)
            )
        samples = members.samples[:per_pair_cap]
        if not samples:
            continue
        for target in range(n):
            if target == source:
                continue
            results = craft(model, samples, source, target)
            num_crafted[source, target] = len(results)
            num_correct[source, target] = sum(r.predicted == source for r in results)
    ic(num_correct, num_crafted)
    return RobustnessMatrix(num_correct, num_crafted)


def weighted_average(R: RobustnessMatrix, W: WeightMatrix) -> float:
    """
    Weighted average robustness: the sum of R[i, j] * W[i, j] over i != j.

    Raises:
        EmptyCellError: If a cell with positive weight is empty.
    """
    if R.n != W.n:
        raise ValueError(f"Robustness matrix has {R.n} classes, weights {W.n}.")
    total = 0.0
    for cell in W.support():
        if R.is_empty(cell):
            raise EmptyCellError(cell, f"Cell {cell} carries weight but is empty.")
        total += float(R.values[cell]) * float(W.entries[cell])
    return total


def lower_bound(R: RobustnessMatrix) -> tuple[float, list[tuple[int, int]]]:
    """
    The smallest non-empty cell and every cell attaining it, row-major.

    Raises:
        ValueError: If every cell is empty.
    """
    cells = R.filled_cells()
    if not cells:
        raise ValueError("Every robustness cell is empty.")
    value = min(float(R.values[cell]) for cell in cells)
    return value, [cell for cell in cells if float(R.values[cell]) == value]


def legitimate_accuracy(model: Model, eval_set: Dataset) -> float:
    """Fraction of unperturbed samples classified as their label."""
    if len(eval_set) == 0:
        raise ValueError("Cannot measure accuracy on an empty set.")
    return float(np.mean(predict_batch(model, eval_set.inputs) == eval_set.labels))


def robustness_summary(R: RobustnessMatrix, W: WeightMatrix | None = None) -> dict:
    """Lower bound with its cells, plus the weighted average when weights are given."""
    value, cells = lower_bound(R)
    summary = {"min_r": value, "argmin_cells": [list(cell) for cell in cells]}
    if W is not None:
        summary["weighted_average"] = weighted_average(R, W)
    return summary
