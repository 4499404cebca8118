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

"""Mini-batch SGD training, with optional PGD or ensemble adversarial augmentation."""

try:
    from icecream import ic
except ImportError:  # Graceful fallback if IceCream isn't installed.
    ic = lambda *a: None if not a else (a[0] if len(a) == 1 else a)  # noqa

import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator
from tqdm import tqdm

from attacks import AttackConfig, craft_pairset, run_attack, sample_seed
from dataio import Dataset
from losses import AttackSensitiveMatrix, LossSpec, batch_loss
from nncore import (
    LayerSpec,
    Model,
    build_model,
    forward_batch,
    loss_and_grad_params,
    mlp_spec,
    save_model,
    sgd_step,
)
from robustness import legitimate_accuracy
from utils import (
    APP_TITLE_SHORT,
    canonical_json,
    get_terminal_size,
    sha256_bytes,
    show_progress,
)


class TrainingDivergenceError(RuntimeError):
    """Raised when the training loss or its gradient stops being finite."""

    def __init__(self, epoch: int, batch: int):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"Training diverged at epoch {epoch}, batch {batch}.")


class TrainConfig(BaseModel):
    """
    Settings of one training run.

    Fields:
        epochs (int): Passes over the training set.
        batch_size (int): Samples per SGD step.
        lr (float): SGD learning rate (no momentum).
        init_seed (int): Seed of the parameter initialisation.
        shuffle_seed (int): Seed of the per-epoch shuffles.
        hidden_widths (list[int]): Hidden layer widths, used when `layers` is not given.
        layers (list[LayerSpec] | None): Explicit layer specification.
        augmentation (str): 'none', 'pgd' or 'ensemble'.
        augment_attacks (list[AttackConfig]): Attacks crafting the augmented examples.
        augment_ratio (float): Fraction of the training set attacked per augmentation round.
        refresh_every (int): Epochs between regenerations of the augmented examples.
        augment_seed (int): Base seed of the augmentation subsamples and attacks.
    """

    epochs: int = Field(default=50, ge=0)
    batch_size: int = Field(default=32, ge=1)
    lr: float = Field(default=0.1, gt=0.0)
    init_seed: int = 0
    shuffle_seed: int = 0
    hidden_widths: list[int] = Field(default_factory=lambda: [32])
    layers: list[LayerSpec] | None = None
    augmentation: Literal["none", "pgd", "ensemble"] = "none"
    augment_attacks: list[AttackConfig] = Field(
        default_factory=lambda: [AttackConfig(method="pgd")]
    )
    augment_ratio: float = Field(default=0.5, ge=0.0, le=1.0)
    refresh_every: int = Field(default=5, ge=1)
    augment_seed: int = 0

    @model_validator(mode="after")
    def _check_attacks(self) -> "TrainConfig":
        if self.augmentation != "none" and not self.augment_attacks:
            raise ValueError("Adversarial augmentation needs at least one attack.")
        return self

    def layer_spec(self, feature_dim: int, n_classes: int) -> list[LayerSpec]:
        if self.layers is not None:
            return self.layers
        return mlp_spec([feature_dim, *self.hidden_widths, n_classes])


class TrainedModel:
    """
    A trained model and its metrics.

    Fields:
        model (Model): The trained model.
        final_train_loss (float): Mean loss over the training set after the last epoch.
        clean_val_accuracy (float): Accuracy on the validation set (training set when none is given).
        loss_curve (list[float]): Mean batch loss per epoch.
        config_json (str): Canonical JSON of the training and loss configuration.
        fingerprint (str): SHA-256 of `config_json`.
    """

    def __init__(
        self,
        model: Model,
        final_train_loss: float,
        clean_val_accuracy: float,
        loss_curve: list[float],
        config_json: str,
    ):
        self.model = model
        self.final_train_loss = final_train_loss
        self.clean_val_accuracy = clean_val_accuracy
        self.loss_curve = loss_curve
        self.config_json = config_json
        self.fingerprint = sha256_bytes(config_json.encode("utf-8"))

    def metrics(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "config": json.loads(self.config_json),
            "final_train_loss": self.final_train_loss,
            "clean_val_accuracy": self.clean_val_accuracy,
            "loss_curve": self.loss_curve,
        }


def describe_loss(loss_spec: LossSpec) -> dict:
    return {
        "variant": loss_spec.variant,
        "lambda": loss_spec.lam,
        "matrix": None if loss_spec.matrix is None else loss_spec.matrix.to_list(),
    }


def config_json(loss_spec: LossSpec, cfg: TrainConfig) -> str:
    """Canonical JSON identifying a training run."""
    return canonical_json(
        {"loss": describe_loss(loss_spec), "train": cfg.model_dump(mode="json")}
    )


def evaluate_loss(model: Model, dataset: Dataset, loss_spec: LossSpec) -> float:
    """Mean loss over a dataset."""
    if len(dataset) == 0:
        raise ValueError("Cannot evaluate the loss of an empty set.")
    probs = forward_batch(model, dataset.inputs).probs
    return float(np.mean(batch_loss(dataset.labels, probs, loss_spec)))


def _progress_bar(total: int, desc: str) -> tqdm:
    terminal_columns, _ = get_terminal_size()
    return tqdm(
        total=total,
        leave=False,
        unit="epoch",
        ncols=int(terminal_columns / 2),
        desc=f"{APP_TITLE_SHORT} {desc}",
        colour="yellow",
        disable=not show_progress(),
    )


def _run_epoch(
    model: Model,
    dataset: Dataset,
    loss_spec: LossSpec,
    cfg: TrainConfig,
    rng: np.random.Generator,
    epoch: int,
) -> float:
    order = rng.permutation(len(dataset))
    batch_losses = []
    for batch_index, start in enumerate(range(0, len(order), cfg.batch_size)):
        indices = order[start : start + cfg.batch_size]
        loss, grads = loss_and_grad_params(
            model, dataset.inputs[indices], dataset.labels[indices], loss_spec
        )
        if not np.isfinite(loss) or not all(
            np.all(np.isfinite(g)) for g in grads.weights + grads.biases
        ):
            raise TrainingDivergenceError(epoch, batch_index)
        sgd_step(model, grads, cfg.lr)
        batch_losses.append(loss)
    return float(np.mean(batch_losses))


def _check_training_inputs(train_set: Dataset, loss_spec: LossSpec):
    if len(train_set) == 0:
        raise ValueError("Cannot train on an empty set.")
    if loss_spec.matrix is not None and loss_spec.matrix.n != train_set.n_classes:
        raise ValueError(
            f"Attack sensitive matrix has {loss_spec.matrix.n} classes, the data {train_set.n_classes}."
        )


def _finish(
    model: Model,
    train_set: Dataset,
    val_set: Dataset | None,
    loss_spec: LossSpec,
    cfg: TrainConfig,
    loss_curve: list[float],
) -> TrainedModel:
    final_loss = evaluate_loss(model, train_set, loss_spec)
    if not np.isfinite(final_loss):
        raise TrainingDivergenceError(cfg.epochs, 0)
    accuracy = legitimate_accuracy(model, val_set if val_set is not None else train_set)
    return TrainedModel(model, final_loss, accuracy, loss_curve, config_json(loss_spec, cfg))


def train(
    train_set: Dataset,
    loss_spec: LossSpec,
    cfg: TrainConfig,
    val_set: Dataset | None = None,
) -> TrainedModel:
    """
    Plain mini-batch SGD on the configured loss.

    Args:
        train_set (Dataset): The training samples.
        loss_spec (LossSpec): The loss to minimise.
        cfg (TrainConfig): Epochs, batch size, learning rate and seeds.
        val_set (Dataset | None): Samples for the reported clean accuracy.

    Returns:
        TrainedModel: The model with its metrics.

    Raises:
        TrainingDivergenceError: If a batch loss or gradient becomes non-finite.
    """
    _check_training_inputs(train_set, loss_spec)
    model = build_model(
        cfg.layer_spec(train_set.feature_dim, train_set.n_classes),
        train_set.n_classes,
        cfg.init_seed,
    )
    rng = np.random.default_rng(cfg.shuffle_seed)
    loss_curve = []
    with _progress_bar(cfg.epochs, "training") as progress_bar:
        for epoch in range(cfg.epochs):
            loss_curve.append(_run_epoch(model, train_set, loss_spec, cfg, rng, epoch))
            progress_bar.update(1)
    return _finish(model, train_set, val_set, loss_spec, cfg, loss_curve)


def augmentation_plan(
    train_set: Dataset, ratio: float, n_attacks: int, seed: int
) -> list[tuple[int, int, int]]:
    """
    Which samples to attack, with which attack and towards which class.

    A ratio-sized subsample is drawn with the seed. The k-th picked sample is attacked by attack
    k mod n_attacks, towards (label + 1 + k mod (n - 1)) mod n, so targets cycle over the wrong
    classes.

    Returns:
        list[tuple[int, int, int]]: (sample index, attack index, target) per picked sample.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"Augmentation ratio must lie in [0, 1], got {ratio}.")
    if n_attacks < 1:
        raise ValueError("At least one attack is needed.")
    n = train_set.n_classes
    count = int(round(ratio * len(train_set)))
    picks = np.random.default_rng(seed).choice(len(train_set), size=count, replace=False)
    return [
        (
            int(index),
            k % n_attacks,
            (int(train_set.labels[index]) + 1 + k % (n - 1)) % n,
        )
        for k, index in enumerate(picks)
    ]


def augment_ensemble(
    model_snapshot: Model,
    train_set: Dataset,
    attack_configs: Sequence[AttackConfig],
    ratio: float,
    seed: int,
) -> Dataset:
    """
    The training set plus adversarial examples from several attack families, labelled with their
    source class.

    Args:
        model_snapshot (Model): The model attacked; read only.
        train_set (Dataset): The clean training samples.
        attack_configs (Sequence[AttackConfig]): Attack families, used round-robin.
        ratio (float): Fraction of the training set to attack.
        seed (int): Seed of the subsample and of the attacks.

    Returns:
        Dataset: `train_set` followed by the adversarial examples.
    """
    plan = augmentation_plan(train_set, ratio, len(attack_configs), seed)
    if not plan:
        return train_set

    def craft(position: int) -> np.ndarray:
        index, attack_index, target = plan[position]
        return run_attack(
            model_snapshot,
            train_set.inputs[index],
            target,
            attack_configs[attack_index],
            sample_seed(seed, position),
        ).x_adv

    threads = max(attack.threads for attack in attack_configs)
    if threads == 1:
        adversarial = [craft(position) for position in range(len(plan))]
    else:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            adversarial = list(executor.map(craft, range(len(plan))))
    labels = [train_set.labels[index] for index, _, _ in plan]
    return train_set.concat(Dataset(np.stack(adversarial), labels, train_set.n_classes))


def augment_pgd(
    model_snapshot: Model,
    train_set: Dataset,
    attack: AttackConfig,
    ratio: float,
    seed: int,
) -> Dataset:
    """The training set plus PGD adversarial examples labelled with their source class."""
    return augment_ensemble(model_snapshot, train_set, [attack], ratio, seed)


def adversarial_train(
    train_set: Dataset,
    loss_spec: LossSpec,
    cfg: TrainConfig,
    val_set: Dataset | None = None,
) -> TrainedModel:
    """
    SGD on the training set augmented with adversarial examples, regenerated against the current
    model every `refresh_every` epochs.

    Args:
        train_set (Dataset): The clean training samples.
        loss_spec (LossSpec): The loss to minimise.
        cfg (TrainConfig): Training and augmentation settings; augmentation must not be 'none'.
        val_set (Dataset | None): Samples for the reported clean accuracy.

    Returns:
        TrainedModel: The model with its metrics.
    """
    if cfg.augmentation == "none":
        raise ValueError("Adversarial training needs augmentation 'pgd' or 'ensemble'.")
    _check_training_inputs(train_set, loss_spec)
    model = build_model(
        cfg.layer_spec(train_set.feature_dim, train_set.n_classes),
        train_set.n_classes,
        cfg.init_seed,
    )
    attacks = cfg.augment_attacks if cfg.augmentation == "ensemble" else cfg.augment_attacks[:1]
    rng = np.random.default_rng(cfg.shuffle_seed)
    loss_curve = []
    augmented = train_set
    with _progress_bar(cfg.epochs, "adversarial training") as progress_bar:
        for epoch in range(cfg.epochs):
            if epoch % cfg.refresh_every == 0:
                augmented = augment_ensemble(
                    model.copy(),
                    train_set,
                    attacks,
                    cfg.augment_ratio,
                    sample_seed(cfg.augment_seed, epoch),
                )
                ic(epoch, len(augmented))
            loss_curve.append(_run_epoch(model, augmented, loss_spec, cfg, rng, epoch))
            progress_bar.update(1)
    return _finish(model, train_set, val_set, loss_spec, cfg, loss_curve)


def fit(
    train_set: Dataset,
    loss_spec: LossSpec,
    cfg: TrainConfig,
    val_set: Dataset | None = None,
) -> TrainedModel:
    """Train with or without augmentation, as the configuration says."""
    if cfg.augmentation == "none":
        return train(train_set, loss_spec, cfg, val_set)
    return adversarial_train(train_set, loss_spec, cfg, val_set)


def save_trained(trained: TrainedModel, model_path: str | Path, metrics_path: str | Path):
    """Write the model JSON and its metrics sidecar."""
    save_model(trained.model, model_path)
    with open(metrics_path, "w") as f:
        json.dump(trained.metrics(), f, sort_keys=True)


def sensitivity_sweep(
    train_set: Dataset,
    val_set: Dataset,
    cell: tuple[int, int],
    values: Sequence[float],
    loss_spec: LossSpec,
    cfg: TrainConfig,
    attack: AttackConfig,
    per_pair_cap: int = 100,
) -> list[dict]:
    """
    Retrain with one attack sensitive entry set to each value (all others 1) and measure the
    robustness of that cell and the clean accuracy.

    Args:
        train_set (Dataset): The training samples.
        val_set (Dataset): Samples for robustness and accuracy.
        cell (tuple[int, int]): The (source, target) entry swept.
        values (Sequence[float]): Values of the entry.
        loss_spec (LossSpec): The loss; its matrix is replaced per value.
        cfg (TrainConfig): Training settings.
        attack (AttackConfig): The attack measuring robustness of the cell.
        per_pair_cap (int): At most this many source samples are attacked.

    Returns:
        list[dict]: One record per value with keys 'value', 'robustness' and 'accuracy'.
    """
    source, target = cell
    samples = val_set.of_class(source).samples[:per_pair_cap]
    if not samples:
        raise ValueError(f"No validation samples of class {source}.")
    records = []
    for value in values:
        matrix = AttackSensitiveMatrix.uniform(train_set.n_classes).with_entry(cell, value)
        trained = fit(train_set, loss_spec.with_matrix(matrix), cfg, val_set)
        results = craft_pairset(trained.model, samples, source, target, attack)
        records.append(
            {
                "value": float(value),
                "robustness": sum(r.predicted == source for r in results) / len(results),
                "accuracy": trained.clean_val_accuracy,
            }
        )
        ic(records[-1])
    return records
