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

"""Cross entropy, the two attack sensitive losses, their combination and the gradients w.r.t. probabilities."""

try:
    from icecream import ic
except ImportError:  # Graceful fallback if IceCream isn't installed.
    ic = lambda *a: None if not a else (a[0] if len(a) == 1 else a)  # noqa

from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from utils import FLOAT_ROUND_TRIP_DIGITS

M_CAP = 100.0
PROBABILITY_FLOOR = 1e-12

LossVariant = Literal["cross", "v1", "v2", "combined_v1", "combined_v2"]


class AttackSensitiveMatrix:
    """
    Per-pair attack costs. Entry (t, i) is the cost of a targeted attack moving class t to class i.

    The diagonal is always zero and every off-diagonal entry lies in [0, m_cap].
    """

    def __init__(self, entries: np.ndarray | list, m_cap: float = M_CAP):
        """
        Initialise and validate the matrix.

        Args:
            entries (np.ndarray | list): A square matrix of costs.
            m_cap (float): The upper bound on any entry.

        Raises:
            ValueError: If the matrix is not square, has a nonzero diagonal, or an entry outside [0, m_cap].
        """
        values = np.array(entries, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValueError(
                f"Attack sensitive matrix must be square, got shape {values.shape}."
            )
        if values.shape[0] < 2:
            raise ValueError("Attack sensitive matrix needs at least 2 classes.")
        if not np.all(np.isfinite(values)):
            raise ValueError("Attack sensitive matrix entries must be finite.")
        if np.any(np.diag(values) != 0.0):
            raise ValueError("Attack sensitive matrix must have zeros on its diagonal.")
        if np.any(values < 0.0):
            bad = tuple(int(k) for k in np.argwhere(values < 0.0)[0])
            raise ValueError(f"Attack sensitive matrix entry {bad} is negative.")
        if np.any(values > m_cap):
            bad = tuple(int(k) for k in np.argwhere(values > m_cap)[0])
            raise ValueError(
                f"Attack sensitive matrix entry {bad} exceeds the cap of {m_cap}."
            )
        values.setflags(write=False)
        self._entries = values
        self.m_cap = float(m_cap)

    @classmethod
    def uniform(
        cls, n: int, value: float = 1.0, m_cap: float = M_CAP
    ) -> "AttackSensitiveMatrix":
        """The matrix with `value` everywhere off the diagonal."""
        entries = np.full((n, n), float(value))
        np.fill_diagonal(entries, 0.0)
        return cls(entries, m_cap=m_cap)

    @property
    def n(self) -> int:
        return self._entries.shape[0]

    @property
    def entries(self) -> np.ndarray:
        """Read-only view of the matrix."""
        return self._entries

    def to_array(self) -> np.ndarray:
        """A writable copy of the matrix."""
        return self._entries.copy()

    def with_entry(self, cell: tuple[int, int], value: float) -> "AttackSensitiveMatrix":
        """A copy with one entry replaced."""
        entries = self.to_array()
        entries[cell] = value
        return AttackSensitiveMatrix(entries, m_cap=self.m_cap)

    def add(self, cells: list[tuple[int, int]], delta: float) -> "AttackSensitiveMatrix":
        """A copy with `delta` added to each listed cell."""
        entries = self.to_array()
        for cell in cells:
            entries[cell] += delta
        return AttackSensitiveMatrix(entries, m_cap=self.m_cap)

    def scaled(self, k: float) -> "AttackSensitiveMatrix":
        """A copy with every entry multiplied by k. The cap scales with the entries."""
        return AttackSensitiveMatrix(self._entries * k, m_cap=self.m_cap * max(k, 1.0))

    def to_list(self) -> list[list[float]]:
        return self._entries.tolist()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AttackSensitiveMatrix):
            return NotImplemented
        return np.array_equal(self._entries, other._entries)

    def __hash__(self) -> int:
        return hash(self._entries.tobytes())

    def __repr__(self) -> str:
        return f"AttackSensitiveMatrix(n={self.n}, entries={self.to_list()})"


def load_matrix_csv(path: str | Path, m_cap: float = M_CAP) -> AttackSensitiveMatrix:
    """
    Load an attack sensitive matrix from a headerless CSV file.

    Args:
        path (str | Path): The CSV file, n rows of n decimal literals.
        m_cap (float): The upper bound on any entry.

    Returns:
        AttackSensitiveMatrix: The validated matrix.

    Raises:
        ValueError: If the file is malformed, an entry is negative or the diagonal is nonzero.
    """
    try:
        frame = pd.read_csv(
            path, header=None, dtype=np.float64, float_precision="round_trip"
        )
    except (ValueError, pd.errors.ParserError) as e:
        raise ValueError(f"Malformed attack sensitive matrix file {path}: {e}") from e
    return AttackSensitiveMatrix(frame.to_numpy(), m_cap=m_cap)


def save_matrix_csv(matrix: AttackSensitiveMatrix, path: str | Path):
    """Write the matrix as a headerless CSV with exactly round-tripping decimals."""
    pd.DataFrame(matrix.entries).to_csv(
        path,
        header=False,
        index=False,
        float_format=f"%.{FLOAT_ROUND_TRIP_DIGITS}g",
    )


class LossSpec(BaseModel):
    """
    The training loss: cross entropy, one of the sensitive losses, or cross entropy plus
    `lambda` times a sensitive loss.
    """

    model_config = ConfigDict(
        arbitrary_types_allowed=True, frozen=True, populate_by_name=True
    )

    variant: LossVariant = "cross"
    lam: float = Field(default=1.0, ge=0.0, alias="lambda")
    matrix: AttackSensitiveMatrix | None = None

    @model_validator(mode="after")
    def _check_matrix(self) -> "LossSpec":
        if self.variant != "cross" and self.matrix is None:
            raise ValueError(
                f"Loss variant '{self.variant}' requires an attack sensitive matrix."
            )
        return self

    @property
    def sensitive_kind(self) -> Literal["v1", "v2"] | None:
        """Which sensitive loss the variant uses, if any."""
        if self.variant in ("v1", "combined_v1"):
            return "v1"
        if self.variant in ("v2", "combined_v2"):
            return "v2"
        return None

    def with_matrix(self, matrix: AttackSensitiveMatrix) -> "LossSpec":
        return self.model_copy(update={"matrix": matrix})


def _as_array(M: AttackSensitiveMatrix | np.ndarray) -> np.ndarray:
    return M.entries if isinstance(M, AttackSensitiveMatrix) else np.asarray(M)


def _check_batch(
    labels: np.ndarray, probs: np.ndarray, M: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    n = probs.shape[1]
    if labels.shape[0] != probs.shape[0]:
        raise ValueError(
            f"Got {labels.shape[0]} labels for {probs.shape[0]} probability vectors."
        )
    if np.any(labels < 0) or np.any(labels >= n):
        raise ValueError(f"Label out of range for {n} classes: {labels.tolist()}.")
    if M is not None and M.shape != (n, n):
        raise ValueError(
            f"Attack sensitive matrix shape {M.shape} does not match {n} classes."
        )
    return labels, probs


def _cost_rows(M: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Row t of M for each label t, with the (t, t) entry forced to zero."""
    rows = np.array(M[labels], dtype=np.float64)
    rows[np.arange(labels.shape[0]), labels] = 0.0
    return rows


def batch_cross_entropy(labels: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Per-sample cross entropy, with probabilities floored before the log."""
    labels, probs = _check_batch(labels, probs)
    p_true = np.clip(probs[np.arange(labels.shape[0]), labels], PROBABILITY_FLOOR, 1.0)
    return -np.log(p_true)


def batch_sensitive_v1(
    labels: np.ndarray, probs: np.ndarray, M: AttackSensitiveMatrix | np.ndarray
) -> np.ndarray:
    """Per-sample error magnitude of the wrong classes, weighted by row t of M."""
    M = _as_array(M)
    labels, probs = _check_batch(labels, probs, M)
    return np.sum(probs * _cost_rows(M, labels), axis=1)


def batch_sensitive_v2(
    labels: np.ndarray, probs: np.ndarray, M: AttackSensitiveMatrix | np.ndarray
) -> np.ndarray:
    """Per-sample gap between each wrong-class probability and the true-class probability, weighted by M."""
    M = _as_array(M)
    labels, probs = _check_batch(labels, probs, M)
    p_true = probs[np.arange(labels.shape[0]), labels]
    return np.sum((probs - p_true[:, None]) * _cost_rows(M, labels), axis=1)


def batch_loss(labels: np.ndarray, probs: np.ndarray, loss_spec: LossSpec) -> np.ndarray:
    """
    Per-sample value of the configured loss.

    Args:
        labels (np.ndarray): The true labels, one per row of `probs`.
        probs (np.ndarray): Predicted probabilities, one row per sample.
        loss_spec (LossSpec): The loss to evaluate.

    Returns:
        np.ndarray: One loss value per sample.
    """
    kind = loss_spec.sensitive_kind
    if kind is None:
        return batch_cross_entropy(labels, probs)
    sensitive = (
        batch_sensitive_v1(labels, probs, loss_spec.matrix)
        if kind == "v1"
        else batch_sensitive_v2(labels, probs, loss_spec.matrix)
    )
    if loss_spec.variant in ("v1", "v2"):
        return sensitive
    return batch_cross_entropy(labels, probs) + loss_spec.lam * sensitive


def batch_loss_grad_probs(
    labels: np.ndarray, probs: np.ndarray, loss_spec: LossSpec
) -> np.ndarray:
    """
    Per-sample gradient of the configured loss w.r.t. the probability vector.

    Args:
        labels (np.ndarray): The true labels.
        probs (np.ndarray): Predicted probabilities, one row per sample.
        loss_spec (LossSpec): The loss to differentiate.

    Returns:
        np.ndarray: Gradients with the same shape as `probs`.
    """
    labels, probs = _check_batch(
        labels,
        probs,
        None if loss_spec.matrix is None else _as_array(loss_spec.matrix),
    )
    rows_idx = np.arange(labels.shape[0])

    cross_grad = np.zeros_like(probs)
    cross_grad[rows_idx, labels] = -1.0 / np.clip(
        probs[rows_idx, labels], PROBABILITY_FLOOR, 1.0
    )
    kind = loss_spec.sensitive_kind
    if kind is None:
        return cross_grad

    sensitive_grad = _cost_rows(_as_array(loss_spec.matrix), labels)
    if kind == "v2":
        sensitive_grad[rows_idx, labels] = -np.sum(sensitive_grad, axis=1)
    if loss_spec.variant in ("v1", "v2"):
        return sensitive_grad
    return cross_grad + loss_spec.lam * sensitive_grad


def cross_entropy(true_label: int, probs: np.ndarray) -> float:
    """
    Cross entropy of one sample with a one-hot target.

    Args:
        true_label (int): The true class t.
        probs (np.ndarray): The predicted probabilities.

    Returns:
        float: -log of the (floored) probability of class t.
    """
    return float(batch_cross_entropy([true_label], [probs])[0])


def sensitive_v1(
    true_label: int, probs: np.ndarray, M: AttackSensitiveMatrix | np.ndarray
) -> float:
    """First attack sensitive loss of one sample; never negative when M is not."""
    return float(batch_sensitive_v1([true_label], [probs], M)[0])


def sensitive_v2(
    true_label: int, probs: np.ndarray, M: AttackSensitiveMatrix | np.ndarray
) -> float:
    """Second attack sensitive loss of one sample. Unbounded below."""
    return float(batch_sensitive_v2([true_label], [probs], M)[0])


def combined(true_label: int, probs: np.ndarray, loss_spec: LossSpec) -> float:
    """The configured loss of one sample."""
    return float(batch_loss([true_label], [probs], loss_spec)[0])


def loss_grad_probs(true_label: int, probs: np.ndarray, loss_spec: LossSpec) -> np.ndarray:
    """Gradient of the configured loss of one sample w.r.t. its probability vector."""
    return batch_loss_grad_probs([true_label], [probs], loss_spec)[0]
