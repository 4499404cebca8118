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

"""Targeted adversarial examples: iterative FGSM, PGD with random start, and C&W L2."""

try:
    from icecream import ic
except ImportError:  # Graceful fallback if IceCream isn't installed.
    ic = lambda *a: None if not a else (a[0] if len(a) == 1 else a)  # noqa

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from losses import LossSpec
from nncore import Model, forward, logits_grad_input, loss_grad_input, predict

TARGETED_CROSS_ENTROPY = LossSpec(variant="cross")
# Keeps arctanh finite when mapping box-constrained inputs to tanh space.
TANH_BOX_MARGIN = 1e-6

AttackMethod = Literal["ifgsm", "pgd", "cw"]


class AttackBudget(BaseModel):
    """
    Perturbation budget of the L-infinity attacks.

    Fields:
        epsilon (float): Radius of the L-infinity ball, in input units.
        alpha (float | None): Step size; defaults to epsilon / 10.
        steps (int): Number of iterations.
        random_start (bool): Whether PGD starts from a random point of the ball.
    """

    epsilon: float = Field(default=0.05, ge=0.0)
    alpha: float | None = None
    steps: int = Field(default=20, ge=0)
    random_start: bool = True

    @model_validator(mode="after")
    def _check_alpha(self) -> "AttackBudget":
        if self.alpha is None:
            self.alpha = self.epsilon / 10.0
        if self.alpha < 0.0:
            raise ValueError("alpha must not be negative.")
        # A zero radius admits a zero step.
        if self.steps > 0 and self.epsilon > 0.0 and self.alpha == 0.0:
            raise ValueError("alpha must be positive when steps > 0.")
        return self


class CWConfig(BaseModel):
    """
    Settings of the C&W L2 attack.

    Fields:
        c (float): Trade-off between distance and misclassification.
        kappa (float): Confidence margin.
        steps (int): Gradient descent iterations.
        step_size (float): Gradient descent step size in tanh space.
        binary_search_steps (int): When positive, search c over this many rounds.
    """

    c: float = Field(default=1.0, gt=0.0)
    kappa: float = Field(default=0.0, ge=0.0)
    steps: int = Field(default=200, gt=0)
    step_size: float = Field(default=0.01, gt=0.0)
    binary_search_steps: int = Field(default=0, ge=0)


class AttackConfig(BaseModel):
    """
    One attack family with its settings.

    Fields:
        method (str): 'ifgsm', 'pgd' or 'cw'.
        budget (AttackBudget): Used by ifgsm and pgd.
        cw (CWConfig): Used by cw.
        seed (int): Base seed of PGD random starts.
        threads (int): Worker threads when crafting many examples.
    """

    method: AttackMethod = "pgd"
    budget: AttackBudget = Field(default_factory=AttackBudget)
    cw: CWConfig = Field(default_factory=CWConfig)
    seed: int = 0
    threads: int = Field(default=1, ge=1)


class AdversarialResult(BaseModel):
    """
    Outcome of one targeted attack.

    Fields:
        x_adv (np.ndarray): The adversarial input, inside [0, 1].
        predicted (int): The model's class for `x_adv`.
        success (bool): Whether `predicted` is the target.
        linf_norm (float): L-infinity size of the perturbation.
        l2_norm (float): L2 size of the perturbation.
        steps_used (int): Iterations performed to reach `x_adv`.
        target (int): The attacked class.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    x_adv: np.ndarray
    predicted: int
    success: bool
    linf_norm: float
    l2_norm: float
    steps_used: int
    target: int


def _check_attack_inputs(model: Model, x: np.ndarray, target: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.input_dim:
        raise ValueError(f"Expected an input of width {model.input_dim}, got shape {x.shape}.")
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError("Attack inputs must lie in [0, 1].")
    if not 0 <= target < model.n_classes:
        raise ValueError(f"Target {target} outside [0, {model.n_classes}).")
    return x


def _result(model: Model, x: np.ndarray, x_adv: np.ndarray, target: int, steps: int) -> AdversarialResult:
    predicted = predict(model, x_adv)
    perturbation = x_adv - x
    return AdversarialResult(
        x_adv=x_adv,
        predicted=predicted,
        success=predicted == target,
        linf_norm=float(np.max(np.abs(perturbation))) if perturbation.size else 0.0,
        l2_norm=float(np.linalg.norm(perturbation)),
        steps_used=steps,
        target=target,
    )


def _project(x_adv: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Project onto the L-infinity ball around x, then onto the [0, 1] box."""
    return np.clip(np.clip(x_adv, x - epsilon, x + epsilon), 0.0, 1.0)


def _iterate_sign_descent(
    model: Model, x: np.ndarray, x_start: np.ndarray, target: int, budget: AttackBudget
) -> AdversarialResult:
    x_adv = x_start
    for _ in range(budget.steps):
        grad = loss_grad_input(model, x_adv, target, TARGETED_CROSS_ENTROPY)
        x_adv = _project(x_adv - budget.alpha * np.sign(grad), x, budget.epsilon)
    return _result(model, x, x_adv, target, budget.steps)


def ifgsm_targeted(
    model: Model, x: np.ndarray, target: int, budget: AttackBudget
) -> AdversarialResult:
    """
    Iterative FGSM towards a target class.

    Each step descends the cross entropy towards `target` by `alpha` times the gradient sign, then
    projects onto the epsilon-ball and the [0, 1] box.

    Args:
        model (Model): The attacked model.
        x (np.ndarray): The clean input, inside [0, 1].
        target (int): The class the attack aims for.
        budget (AttackBudget): Radius, step size and iterations.

    Returns:
        AdversarialResult: The final iterate.
    """
    x = _check_attack_inputs(model, x, target)
    return _iterate_sign_descent(model, x, x.copy(), target, budget)


def pgd_targeted(
    model: Model, x: np.ndarray, target: int, budget: AttackBudget, rng_seed: int
) -> AdversarialResult:
    """
    PGD towards a target class: iterative FGSM from a uniformly random point of the epsilon-ball.

    Args:
        model (Model): The attacked model.
        x (np.ndarray): The clean input, inside [0, 1].
        target (int): The class the attack aims for.
        budget (AttackBudget): Radius, step size, iterations and the random start switch.
        rng_seed (int): Seed of the random start.

    Returns:
        AdversarialResult: The final iterate.
    """
    x = _check_attack_inputs(model, x, target)
    x_start = x.copy()
    # Without iterations there is nothing to start from but x.
    if budget.random_start and budget.epsilon > 0.0 and budget.steps > 0:
        rng = np.random.default_rng(rng_seed)
        x_start = np.clip(
            x + rng.uniform(-budget.epsilon, budget.epsilon, size=x.shape), 0.0, 1.0
        )
    return _iterate_sign_descent(model, x, x_start, target, budget)


def _cw_margin(logits: np.ndarray, target: int) -> tuple[float, int]:
    others = logits.copy()
    others[target] = -np.inf
    runner_up = int(np.argmax(others))
    return float(logits[runner_up] - logits[target]), runner_up


def _cw_fixed_c(
    model: Model, x: np.ndarray, target: int, cfg: CWConfig, c: float
) -> AdversarialResult:
    w = np.arctanh(2.0 * np.clip(x, TANH_BOX_MARGIN, 1.0 - TANH_BOX_MARGIN) - 1.0)
    best: AdversarialResult | None = None
    last: AdversarialResult | None = None
    for step in range(cfg.steps + 1):
        x_adv = (np.tanh(w) + 1.0) / 2.0
        last = _result(model, x, x_adv, target, step)
        if last.success and (best is None or last.l2_norm < best.l2_norm):
            best = last
        if step == cfg.steps:
            break

        grad_x = 2.0 * (x_adv - x)
        margin, runner_up = _cw_margin(forward(model, x_adv).logits, target)
        if margin > -cfg.kappa:
            grad_logits = np.zeros(model.n_classes)
            grad_logits[runner_up] = c
            grad_logits[target] = -c
            grad_x = grad_x + logits_grad_input(model, x_adv, grad_logits)
        w = w - cfg.step_size * grad_x * (1.0 - np.tanh(w) ** 2) / 2.0
    return best if best is not None else last


def cw_l2_targeted(
    model: Model, x: np.ndarray, target: int, cfg: CWConfig
) -> AdversarialResult:
    """
    C&W L2 attack towards a target class.

    Optimises w with x_adv = (tanh(w) + 1) / 2, minimising the squared L2 distance plus
    c * max(max_{i != target} z_i - z_target, -kappa) by gradient descent.

    Args:
        model (Model): The attacked model.
        x (np.ndarray): The clean input, inside [0, 1].
        target (int): The class the attack aims for.
        cfg (CWConfig): Attack settings.

    Returns:
        AdversarialResult: The successful iterate with the smallest L2 perturbation, else the final
        iterate with `success` false.
    """
    x = _check_attack_inputs(model, x, target)
    if cfg.binary_search_steps == 0:
        return _cw_fixed_c(model, x, target, cfg, cfg.c)

    lower, upper, c = 0.0, np.inf, cfg.c
    best: AdversarialResult | None = None
    last: AdversarialResult | None = None
    for _ in range(cfg.binary_search_steps):
        last = _cw_fixed_c(model, x, target, cfg, c)
        if last.success:
            if best is None or last.l2_norm < best.l2_norm:
                best = last
            upper = c
            c = (lower + upper) / 2.0
        else:
            lower = c
            c = c * 10.0 if np.isinf(upper) else (lower + upper) / 2.0
    return best if best is not None else last


def run_attack(
    model: Model, x: np.ndarray, target: int, attack: AttackConfig, seed: int
) -> AdversarialResult:
    """
    Run the configured attack family on one input.

    Args:
        model (Model): The attacked model.
        x (np.ndarray): The clean input.
        target (int): The class the attack aims for.
        attack (AttackConfig): The attack family and settings.
        seed (int): Seed of any random start.

    Returns:
        AdversarialResult: The attack outcome.
    """
    if attack.method == "ifgsm":
        return ifgsm_targeted(model, x, target, attack.budget)
    if attack.method == "pgd":
        return pgd_targeted(model, x, target, attack.budget, seed)
    return cw_l2_targeted(model, x, target, attack.cw)


def sample_seed(base_seed: int, sample_index: int) -> int:
    """Seed of one sample's random start, derived from the base seed and the sample position."""
    return int(
        np.random.SeedSequence([base_seed, sample_index]).generate_state(1)[0]
    )


def craft_pairset(
    model: Model,
    samples: list[tuple[np.ndarray, int]],
    source: int,
    target: int,
    attack: AttackConfig,
) -> list[AdversarialResult]:
    """
    Craft one targeted adversarial example from every sample of the source class.

    Args:
        model (Model): The attacked model, read only.
        samples (list[tuple[np.ndarray, int]]): Inputs, all labelled `source`.
        source (int): The true class.
        target (int): The class the attack aims for.
        attack (AttackConfig): The attack family, settings, base seed and thread count.

    Returns:
        list[AdversarialResult]: One result per sample, in input order.
    """
    if source == target:
        raise ValueError(f"Source and target must differ, both are {source}.")
    for index, (_, label) in enumerate(samples):
        if label != source:
            raise ValueError(
                f"Sample {index} is labelled {label}, expected source class {source}."
            )

    def craft(index: int) -> AdversarialResult:
        return run_attack(
            model, samples[index][0], target, attack, sample_seed(attack.seed, index)
        )

    if attack.threads == 1 or len(samples) < 2:
        return [craft(index) for index in range(len(samples))]
    with ThreadPoolExecutor(max_workers=attack.threads) as executor:
        return list(executor.map(craft, range(len(samples))))


def results_to_frame(results: list[AdversarialResult], source: int) -> pd.DataFrame:
    """Tabulate attack outcomes, one row per sample."""
    return pd.DataFrame(
        {
            "sample_index": list(range(len(results))),
            "source": [source] * len(results),
            "target": [r.target for r in results],
            "success": [r.success for r in results],
            "linf": [r.linf_norm for r in results],
            "l2": [r.l2_norm for r in results],
            "steps_used": [r.steps_used for r in results],
        }
    )


def save_results_csv(results: list[AdversarialResult], source: int, path: str | Path):
    results_to_frame(results, source).to_csv(path, index=False, float_format="%.17g")
