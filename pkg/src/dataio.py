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

"""Datasets: synthetic Gaussian blobs, CSV feature files, IDX image files and stratified splits."""

try:
    from icecream import ic
except ImportError:  # Graceful fallback if IceCream isn't installed.
    ic = lambda *a: None if not a else (a[0] if len(a) == 1 else a)  # noqa

import struct
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel, field_validator

from utils import EMPTY_STRING, FLOAT_ROUND_TRIP_DIGITS

IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803
PIXEL_SCALE = 255.0


class DataFormatError(ValueError):
    """Raised when a data file cannot be parsed or violates the dataset invariants."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


class Dataset:
    """
    Labelled samples with features in [0, 1].

    Fields:
        inputs (np.ndarray): A (samples, feature_dim) float64 array.
        labels (np.ndarray): One integer label per sample.
        n_classes (int): The number of classes.
    """

    def __init__(self, inputs: np.ndarray, labels: np.ndarray, n_classes: int):
        inputs = np.asarray(inputs, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if inputs.ndim != 2:
            raise ValueError(f"Inputs must be 2-D, got shape {inputs.shape}.")
        if labels.shape != (inputs.shape[0],):
            raise ValueError(
                f"Got {labels.shape[0]} labels for {inputs.shape[0]} samples."
            )
        if n_classes < 2:
            raise ValueError(f"A dataset needs at least 2 classes, got {n_classes}.")
        if not np.all(np.isfinite(inputs)) or np.any(inputs < 0.0) or np.any(inputs > 1.0):
            raise ValueError("Dataset features must lie in [0, 1].")
        if np.any(labels < 0) or np.any(labels >= n_classes):
            raise ValueError(f"Dataset labels must lie in [0, {n_classes}).")
        inputs.setflags(write=False)
        labels.setflags(write=False)
        self.inputs = inputs
        self.labels = labels
        self.n_classes = n_classes

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def samples(self) -> list[tuple[np.ndarray, int]]:
        return [(self.inputs[k], int(self.labels[k])) for k in range(len(self))]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[indices], self.labels[indices], self.n_classes)

    def of_class(self, label: int) -> "Dataset":
        return self.subset(np.flatnonzero(self.labels == label))

    def class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.n_classes).tolist()

    def concat(self, other: "Dataset") -> "Dataset":
        if other.n_classes != self.n_classes or (
            len(other) > 0 and other.feature_dim != self.feature_dim
        ):
            raise ValueError("Cannot concatenate datasets of different shapes.")
        return Dataset(
            np.concatenate([self.inputs, other.inputs]),
            np.concatenate([self.labels, other.labels]),
            self.n_classes,
        )


class SplitSpec(BaseModel):
    """
    Fractions of a train/validation/test split.

    Fields:
        fractions (tuple[float, float, float]): Positive, summing to 1.
        seed (int): Seed of the per-class shuffle.
    """

    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    @field_validator("fractions")
    @classmethod
    def _check_fractions(cls, value: tuple[float, float, float]):
        if any(f <= 0.0 for f in value):
            raise ValueError(f"Split fractions must be positive, got {value}.")
        if abs(sum(value) - 1.0) > 1e-9:
            raise ValueError(f"Split fractions must sum to 1, got {value}.")
        return value


def gen_blobs(
    n_classes: int, per_class: int, feature_dim: int, spread: float, seed: int
) -> Dataset:
    """
    Gaussian blobs around class centres drawn uniformly from [0.2, 0.8]^d, clipped to [0, 1].

    Args:
        n_classes (int): The number of classes.
        per_class (int): Samples per class.
        feature_dim (int): Feature width.
        spread (float): Standard deviation of the noise.
        seed (int): Seed of centres and noise.

    Returns:
        Dataset: Samples ordered by class.
    """
    if n_classes < 2 or per_class < 1 or feature_dim < 1:
        raise ValueError("Blob parameters must be positive, with at least 2 classes.")
    if spread < 0:
        raise ValueError(f"Spread must not be negative, got {spread}.")
    rng = np.random.default_rng(seed)
    centres = rng.uniform(0.2, 0.8, size=(n_classes, feature_dim))
    noise = rng.normal(0.0, 1.0, size=(n_classes, per_class, feature_dim))
    inputs = np.clip(centres[:, None, :] + spread * noise, 0.0, 1.0)
    labels = np.repeat(np.arange(n_classes), per_class)
    return Dataset(inputs.reshape(-1, feature_dim), labels, n_classes)


def load_csv(path: str | Path, n_classes: int) -> Dataset:
    """
    Load a headerless CSV file whose rows are features followed by the label.

    Args:
        path (str | Path): The CSV file.
        n_classes (int): The number of classes.

    Returns:
        Dataset: The parsed samples.

    Raises:
        DataFormatError: On a malformed row or an out-of-range value, naming its line.
    """
    try:
        frame = pd.read_csv(
            path, header=None, dtype=str, keep_default_na=False, skip_blank_lines=False
        )
    except pd.errors.ParserError as e:
        raise DataFormatError(f"Malformed CSV file {path}: {e}") from e
    except pd.errors.EmptyDataError as e:
        raise DataFormatError(f"CSV file {path} is empty.") from e
    if frame.shape[1] < 2:
        raise DataFormatError("Rows need at least one feature and a label.", line=1)

    inputs, labels = [], []
    # Blank lines are kept while parsing so that row positions are file lines.
    for row_index, row in enumerate(frame.itertuples(index=False)):
        if all(not isinstance(v, str) or v.strip() == EMPTY_STRING for v in row):
            continue
        line = row_index + 1
        try:
            values = [float(v) for v in row[:-1]]
            label_value = float(row[-1])
        except ValueError as e:
            raise DataFormatError(f"Non-numeric value: {e}", line=line) from e
        if not label_value.is_integer() or not 0 <= label_value < n_classes:
            raise DataFormatError(
                f"Label {row[-1]} outside [0, {n_classes}).", line=line
            )
        for value in values:
            if not np.isfinite(value) or not 0.0 <= value <= 1.0:
                raise DataFormatError(f"Feature {value} outside [0, 1].", line=line)
        inputs.append(values)
        labels.append(int(label_value))
    if not inputs:
        raise DataFormatError(f"CSV file {path} has no samples.")
    return Dataset(
        np.array(inputs, dtype=np.float64), np.array(labels, dtype=np.int64), n_classes
    )


def save_csv(dataset: Dataset, path: str | Path):
    """Write the dataset in the format read by `load_csv`, with exactly round-tripping decimals."""
    frame = pd.DataFrame(dataset.inputs)
    frame[dataset.feature_dim] = dataset.labels
    frame.to_csv(
        path, header=False, index=False, float_format=f"%.{FLOAT_ROUND_TRIP_DIGITS}g"
    )


def _read_be32(f) -> int:
    data = f.read(4)
    if len(data) != 4:
        raise DataFormatError("Truncated IDX header.")
    result, *_ = struct.unpack(">I", data)
    return result


def _read_idx_images(path: str | Path) -> np.ndarray:
    # i32 magic | i32 count | i32 rows | i32 columns | u8[] pixels, row-major
    with open(path, "rb") as f:
        magic = _read_be32(f)
        if magic != IDX_IMAGES_MAGIC:
            raise DataFormatError(f"Magic number mismatch in image file ({magic:#010x}).")
        count, rows, columns = _read_be32(f), _read_be32(f), _read_be32(f)
        payload = f.read()
    if len(payload) != count * rows * columns:
        raise DataFormatError(
            f"Image file holds {len(payload)} pixel bytes, header promises {count * rows * columns}."
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, columns)


def _read_idx_labels(path: str | Path) -> np.ndarray:
    # i32 magic | i32 count | u8[] labels
    with open(path, "rb") as f:
        magic = _read_be32(f)
        if magic != IDX_LABELS_MAGIC:
            raise DataFormatError(f"Magic number mismatch in label file ({magic:#010x}).")
        count = _read_be32(f)
        payload = f.read()
    if len(payload) != count:
        raise DataFormatError(
            f"Label file holds {len(payload)} labels, header promises {count}."
        )
    return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


def downsample(images: np.ndarray, side: int) -> np.ndarray:
    """
    Area-average square images down to `side` x `side`.

    Args:
        images (np.ndarray): A (count, rows, columns) array.
        side (int): The target side length; must divide both image dimensions.

    Returns:
        np.ndarray: A (count, side, side) array of block means.
    """
    count, rows, columns = images.shape
    if side < 1 or rows % side or columns % side:
        raise ValueError(f"Cannot downsample {rows}x{columns} images to {side}x{side}.")
    block_rows, block_columns = rows // side, columns // side
    return images.reshape(count, side, block_rows, side, block_columns).mean(axis=(2, 4))


def load_idx(
    images_path: str | Path,
    labels_path: str | Path,
    downsample_to: int | None = None,
    n_classes: int | None = None,
) -> Dataset:
    """
    Load an IDX image file and its IDX label file.

    Args:
        images_path (str | Path): Images, magic 0x00000803.
        labels_path (str | Path): Labels, magic 0x00000801.
        downsample_to (int | None): Optional side length for area-average downsampling.
        n_classes (int | None): The number of classes; defaults to max label + 1 (at least 2).

    Returns:
        Dataset: Pixels scaled by 1/255 and flattened row-major.
    """
    images = _read_idx_images(images_path).astype(np.float64) / PIXEL_SCALE
    labels = _read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels."
        )
    if downsample_to is not None:
        images = downsample(images, downsample_to)
    if n_classes is None:
        n_classes = max(2, int(labels.max()) + 1 if labels.size else 2)
    return Dataset(images.reshape(images.shape[0], -1), labels, n_classes)


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """
    Stratified, seeded split into train, validation and test parts.

    Every class is shuffled on its own and cut according to the fractions, with at least one
    sample of each class in every part.

    Args:
        dataset (Dataset): The samples to split.
        spec (SplitSpec): Fractions and seed.

    Returns:
        tuple[Dataset, Dataset, Dataset]: Disjoint parts whose union is the input.
    """
    rng = np.random.default_rng(spec.seed)
    parts: list[list[int]] = [[], [], []]
    train_fraction, val_fraction, _ = spec.fractions
    for label in range(dataset.n_classes):
        members = np.flatnonzero(dataset.labels == label)
        if members.size == 0:
            continue
        if members.size < 3:
            raise ValueError(
                f"Class {label} has {members.size} samples; cannot stratify 3 ways."
            )
        members = members[rng.permutation(members.size)]
        n_train = int(round(train_fraction * members.size))
        n_val = int(round(val_fraction * members.size))
        n_train = min(max(n_train, 1), members.size - 2)
        n_val = min(max(n_val, 1), members.size - n_train - 1)
        parts[0].extend(members[:n_train].tolist())
        parts[1].extend(members[n_train : n_train + n_val].tolist())
        parts[2].extend(members[n_train + n_val :].tolist())
    return tuple(dataset.subset(sorted(part)) for part in parts)  # type: ignore[return-value]
