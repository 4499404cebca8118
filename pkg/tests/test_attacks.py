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

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from attacks import (
    AttackBudget,
    AttackConfig,
    CWConfig,
    craft_pairset,
    cw_l2_targeted,
    ifgsm_targeted,
    pgd_targeted,
    results_to_frame,
    run_attack,
    save_results_csv,
)
from nncore import build_model, mlp_spec, predict


def _linear_boundary_model():
    # z0 = 0, z1 = 4 x0 - 2: class 1 exactly when x0 > 0.5.
    model = build_model(mlp_spec([2, 2]), 2, seed=0)
    model.weights[0] = np.array([[0.0, 0.0], [4.0, 0.0]])
    model.biases[0] = np.array([0.0, -2.0])
    return model


def test_ball_and_box_hold_for_random_runs():
    rng = np.random.default_rng(0)
    models = [
        build_model(mlp_spec([6, 8, 4]), 4, seed=k) for k in range(5)
    ]
    for run in range(500):
        model = models[run % len(models)]
        x = rng.uniform(0.0, 1.0, size=6)
        # Some inputs sit on the box faces.
        x[rng.random(6) < 0.2] = rng.choice([0.0, 1.0])
        budget = AttackBudget(
            epsilon=float(rng.uniform(0.0, 0.3)),
            alpha=float(rng.uniform(0.001, 0.1)),
            steps=int(rng.integers(0, 12)),
            random_start=bool(rng.integers(2)),
        )
        target = int(rng.integers(4))
        if run % 2:
            result = ifgsm_targeted(model, x, target, budget)
        else:
            result = pgd_targeted(model, x, target, budget, rng_seed=run)
        assert np.all(result.x_adv >= 0.0) and np.all(result.x_adv <= 1.0)
        assert np.max(np.abs(result.x_adv - x)) <= budget.epsilon + 1e-9
        assert result.linf_norm <= budget.epsilon + 1e-9
        assert result.success == (result.predicted == target)
        assert result.predicted == predict(model, result.x_adv)


@pytest.mark.parametrize("random_start", [True, False])
def test_zero_steps_and_zero_epsilon_return_the_input(random_start):
    model = build_model(mlp_spec([5, 6, 3]), 3, seed=1)
    x = np.random.default_rng(1).uniform(0.0, 1.0, size=5)
    clean = predict(model, x)
    for budget in (
        AttackBudget(epsilon=0.1, steps=0, random_start=random_start),
        AttackBudget(epsilon=0.0, steps=10, random_start=random_start),
    ):
        for result in (
            ifgsm_targeted(model, x, 2, budget),
            pgd_targeted(model, x, 2, budget, rng_seed=3),
        ):
            assert_array_equal(result.x_adv, x)
            assert result.linf_norm == 0.0 and result.l2_norm == 0.0
            assert result.success == (clean == 2)


def test_pgd_without_random_start_is_ifgsm():
    model = build_model(mlp_spec([4, 5, 3]), 3, seed=2)
    x = np.full(4, 0.5)
    budget = AttackBudget(epsilon=0.1, alpha=0.02, steps=8, random_start=False)
    assert_array_equal(
        pgd_targeted(model, x, 1, budget, rng_seed=9).x_adv,
        ifgsm_targeted(model, x, 1, budget).x_adv,
    )


def test_pgd_random_start_is_seeded():
    model = build_model(mlp_spec([4, 5, 3]), 3, seed=2)
    x = np.full(4, 0.5)
    budget = AttackBudget(epsilon=0.1, alpha=0.01, steps=3)
    first = pgd_targeted(model, x, 1, budget, rng_seed=5)
    assert_array_equal(first.x_adv, pgd_targeted(model, x, 1, budget, rng_seed=5).x_adv)
    assert not np.array_equal(first.x_adv, pgd_targeted(model, x, 1, budget, rng_seed=6).x_adv)


def test_ifgsm_reaches_a_nearby_target():
    model = _linear_boundary_model()
    x = np.array([0.45, 0.5])
    result = ifgsm_targeted(model, x, 1, AttackBudget(epsilon=0.1, alpha=0.02, steps=10))
    assert result.success
    assert result.x_adv[0] == pytest.approx(0.55)
    assert result.steps_used == 10


def test_cw_perturbation_is_at_least_the_boundary_distance():
    model = _linear_boundary_model()
    x = np.array([0.3, 0.5])
    assert predict(model, x) == 0
    result = cw_l2_targeted(model, x, 1, CWConfig(c=1.0, steps=300, step_size=0.01))
    assert result.success
    assert result.l2_norm >= 0.2 - 1e-3
    assert result.l2_norm < 0.25
    assert np.all(result.x_adv >= 0.0) and np.all(result.x_adv <= 1.0)


def test_cw_binary_search_keeps_the_smallest_success():
    model = _linear_boundary_model()
    x = np.array([0.3, 0.5])
    fixed = cw_l2_targeted(model, x, 1, CWConfig(c=1.0, steps=300))
    searched = cw_l2_targeted(
        model, x, 1, CWConfig(c=1.0, steps=300, binary_search_steps=4)
    )
    assert searched.success
    assert searched.l2_norm >= 0.2 - 1e-3
    assert searched.l2_norm <= fixed.l2_norm


def test_cw_reports_failure_when_out_of_reach():
    model = _linear_boundary_model()
    result = cw_l2_targeted(model, np.array([0.0, 0.5]), 1, CWConfig(c=0.01, steps=5))
    assert not result.success
    assert result.steps_used == 5


def test_attack_input_validation():
    model = build_model(mlp_spec([3, 2]), 2, seed=0)
    budget = AttackBudget()
    with pytest.raises(ValueError):
        ifgsm_targeted(model, np.array([0.2, 1.5, 0.0]), 1, budget)
    with pytest.raises(ValueError):
        ifgsm_targeted(model, np.zeros(4), 1, budget)
    with pytest.raises(ValueError):
        pgd_targeted(model, np.zeros(3), 2, budget, rng_seed=0)
    with pytest.raises(ValueError):
        AttackBudget(epsilon=-0.1)
    with pytest.raises(ValueError):
        AttackBudget(epsilon=0.1, alpha=0.0, steps=5)
    assert AttackBudget(epsilon=0.2).alpha == pytest.approx(0.02)


def test_run_attack_dispatches_on_the_method():
    model = _linear_boundary_model()
    x = np.array([0.45, 0.5])
    budget = AttackBudget(epsilon=0.1, alpha=0.02, steps=10, random_start=False)
    for method in ("ifgsm", "pgd"):
        result = run_attack(model, x, 1, AttackConfig(method=method, budget=budget), seed=0)
        assert result.linf_norm <= 0.1 + 1e-9
    cw = run_attack(model, x, 1, AttackConfig(method="cw", cw=CWConfig(steps=50)), seed=0)
    assert cw.steps_used <= 50


def test_threaded_crafting_keeps_sample_order():
    model = build_model(mlp_spec([4, 6, 3]), 3, seed=4)
    rng = np.random.default_rng(4)
    samples = [(rng.uniform(0.0, 1.0, size=4), 0) for _ in range(12)]
    attack = AttackConfig(method="pgd", budget=AttackBudget(epsilon=0.1, steps=5), seed=7)
    serial = craft_pairset(model, samples, 0, 2, attack)
    threaded = craft_pairset(model, samples, 0, 2, attack.model_copy(update={"threads": 4}))
    assert len(serial) == len(threaded) == 12
    for a, b in zip(serial, threaded):
        assert_array_equal(a.x_adv, b.x_adv)


def test_craft_pairset_checks_the_labels():
    model = build_model(mlp_spec([4, 3]), 3, seed=4)
    with pytest.raises(ValueError):
        craft_pairset(model, [(np.zeros(4), 0)], 1, 1, AttackConfig())
    with pytest.raises(ValueError):
        craft_pairset(model, [(np.zeros(4), 2)], 0, 1, AttackConfig())


def test_results_csv(tmp_path):
    model = _linear_boundary_model()
    samples = [(np.array([0.45, 0.5]), 0), (np.array([0.1, 0.5]), 0)]
    attack = AttackConfig(
        method="ifgsm", budget=AttackBudget(epsilon=0.1, alpha=0.02, steps=10)
    )
    results = craft_pairset(model, samples, 0, 1, attack)
    frame = results_to_frame(results, source=0)
    assert frame["success"].tolist() == [True, False]
    assert frame["sample_index"].tolist() == [0, 1]
    path = tmp_path / "attack.csv"
    save_results_csv(results, 0, path)
    assert path.read_text().splitlines()[0] == "sample_index,source,target,success,linf,l2,steps_used"
