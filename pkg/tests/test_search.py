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

from engine import SearchEngine
from losses import AttackSensitiveMatrix
from robustness import RobustnessMatrix, WeightMatrix
from search import (
    SearchConfig,
    SearchTrace,
    TrainingHooks,
    search_lower_bound,
    search_weighted,
)
from workflows.lower_bound_search import LowerBoundSearchWorkflow
from workflows.weighted_search import WeightedSearchWorkflow

# Robustness of the initial all-ones matrix.
BASE_ROBUSTNESS = [
    [np.nan, 0.10, 0.30],
    [0.20, np.nan, 0.50],
    [0.40, 0.15, np.nan],
]

# Row-major order would be (0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1).
WEIGHTS = WeightMatrix(
    [
        [0.0, 0.3, 0.1],
        [0.1, 0.0, 0.25],
        [0.2, 0.05, 0.0],
    ]
)


class StubHooks:
    """
    The 'model' is the matrix itself. Accuracy drops by 0.01 per unit raised above the all-ones
    matrix, and each unit raises the cell's robustness by 0.02.
    """

    def __init__(self, accuracy=None):
        self.fits = 0
        self._accuracy = accuracy

    def fit(self, matrix):
        self.fits += 1
        return matrix

    def accuracy(self, model):
        if self._accuracy is not None:
            return self._accuracy
        return 1.0 - (model.entries.sum() - model.n * (model.n - 1)) / 100.0

    def robustness(self, model):
        return RobustnessMatrix.from_values(
            np.array(BASE_ROBUSTNESS) + 0.02 * (model.entries - 1.0)
        )


def _actions(trace):
    return [record.action for record in trace.records]


def _dumps(trace):
    return [record.model_dump() for record in trace.records]


def test_weighted_search_follows_the_weight_order():
    cfg = SearchConfig(xi=0.9, delta=4.0)
    M, trace = search_weighted(None, None, WEIGHTS, cfg, hooks=StubHooks())

    expected = np.ones((3, 3))
    np.fill_diagonal(expected, 0.0)
    expected[0, 1] = 9.0
    assert_array_equal(M.entries, expected)

    assert _actions(trace) == ["increment"] * 3 + ["revert"] + ["increment", "revert"] * 5 + ["done"]
    assert [r.iteration for r in trace.records] == list(range(15))
    visited = [r.cells[0] for r in trace.records if r.action == "revert"]
    assert visited == [[0, 1], [1, 2], [2, 0], [0, 2], [1, 0], [2, 1]]
    assert [r.accuracy for r in trace.records[:4]] == pytest.approx([1.0, 0.96, 0.92, 0.88])
    assert trace.records[3].matrix == expected.tolist()
    assert trace.records[-1].accuracy == pytest.approx(0.92)
    assert not trace.infeasible
    assert trace.final_model == M


def test_weighted_search_climbs_to_the_cap():
    cfg = SearchConfig(xi=0.0, delta=1.0, m_cap=3.0)
    M, trace = search_weighted(
        None, None, WeightMatrix.uniform(2), cfg, hooks=StubHooks(accuracy=0.5)
    )
    assert_array_equal(M.entries, [[0.0, 3.0], [3.0, 0.0]])
    assert _actions(trace) == ["increment", "increment", "cap"] * 2 + ["done"]
    assert [r.pair_index for r in trace.records[:-1]] == [0, 0, 0, 1, 1, 1]


def test_weighted_search_budget_per_pair():
    cfg = SearchConfig(xi=0.0, delta=2.0, max_outer_iters=1)
    M, trace = search_weighted(
        None, None, WeightMatrix.uniform(2), cfg, hooks=StubHooks(accuracy=0.5)
    )
    assert_array_equal(M.entries, [[0.0, 3.0], [3.0, 0.0]])
    assert _actions(trace) == ["increment", "budget"] * 2 + ["done"]


def test_weighted_search_reports_an_infeasible_constraint():
    cfg = SearchConfig(xi=1.01)
    hooks = StubHooks()
    M, trace = search_weighted(None, None, WEIGHTS, cfg, hooks=hooks)
    assert M == cfg.initial_matrix(3)
    assert _actions(trace) == ["infeasible"]
    assert trace.infeasible and trace.finished
    assert trace.records[0].accuracy == 1.0
    assert hooks.fits == 1


def test_weighted_search_needs_matching_weights():
    with pytest.raises(ValueError):
        SearchEngine().run_search(
            "weighted",
            hooks=StubHooks(),
            config=SearchConfig(),
            n_classes=3,
            weights=WeightMatrix.uniform(4),
        )
    with pytest.raises(ValueError):
        SearchEngine().run_search("weighted", hooks=StubHooks(), config=SearchConfig(), n_classes=3)


def test_lower_bound_search_raises_the_weakest_cells():
    cfg = SearchConfig(xi=0.85, delta=5.0, batch_t=2)
    M, trace = search_lower_bound(None, None, cfg, hooks=StubHooks(), n_classes=3)

    assert _actions(trace) == ["increment", "increment", "revert", "done"]
    assert trace.records[0].cells == [[0, 1], [2, 1]]
    # (0, 1) and (1, 0) tie at 0.2; row-major order decides.
    assert trace.records[1].cells == [[0, 1], [1, 0]]
    assert trace.records[2].cells == [[0, 1], [1, 0]]
    assert trace.records[0].robustness == {"min_r": pytest.approx(0.1), "argmin_cells": [[0, 1]]}
    assert [r.accuracy for r in trace.records] == pytest.approx([1.0, 0.9, 0.8, 0.9])

    expected = np.ones((3, 3))
    np.fill_diagonal(expected, 0.0)
    expected[0, 1] = expected[2, 1] = 6.0
    assert_array_equal(M.entries, expected)
    assert trace.records[2].matrix == expected.tolist()


def test_lower_bound_search_matches_a_sort_oracle():
    hooks = StubHooks()
    cfg = SearchConfig(xi=0.5, delta=1.0, batch_t=4)
    _, trace = search_lower_bound(None, None, cfg, hooks=hooks, n_classes=3)
    for record, previous in zip(trace.records, [None] + trace.records[:-1]):
        if record.action != "increment":
            continue
        matrix = (
            AttackSensitiveMatrix.uniform(3)
            if previous is None
            else AttackSensitiveMatrix(previous.matrix)
        )
        values = hooks.robustness(matrix).values
        cells = [(i, j) for i in range(3) for j in range(3) if i != j]
        oracle = sorted(cells, key=lambda cell: (round(values[cell], 9), cell))[:4]
        assert record.cells == [list(cell) for cell in oracle]


def test_lower_bound_with_every_cell_per_batch_moves_uniformly():
    cfg = SearchConfig(xi=0.5, delta=5.0, batch_t=6)
    M, trace = search_lower_bound(None, None, cfg, hooks=StubHooks(), n_classes=3)
    assert _actions(trace) == ["increment", "increment", "revert", "done"]
    assert M == AttackSensitiveMatrix.uniform(3, 6.0)
    assert all(len(r.cells) == 6 for r in trace.records[:3])


def test_lower_bound_search_stops_at_the_cap():
    cfg = SearchConfig(xi=0.0, delta=5.0, batch_t=6, m_cap=6.0)
    M, trace = search_lower_bound(
        None, None, cfg, hooks=StubHooks(accuracy=0.5), n_classes=3
    )
    assert _actions(trace) == ["increment", "cap", "done"]
    assert M == AttackSensitiveMatrix.uniform(3, 6.0, m_cap=6.0)
    assert trace.records[1].robustness["min_r"] == pytest.approx(0.2)


class ScriptedRobustnessHooks(StubHooks):
    """Stub hooks whose robustness matrices are handed out in order, whatever the model."""

    def __init__(self, values, accuracy=0.5):
        super().__init__(accuracy=accuracy)
        self._values = list(values)

    def robustness(self, model):
        return RobustnessMatrix.from_values(self._values.pop(0))


def test_lower_bound_search_stops_when_the_weakest_cell_is_capped():
    cfg = SearchConfig(xi=0.0, delta=1.0, batch_t=1, m_cap=2.0)
    M, trace = search_lower_bound(
        None, None, cfg, hooks=StubHooks(accuracy=0.5), n_classes=3
    )
    # (0, 1) stays the weakest after its raise; (2, 1) does not take its place.
    assert _actions(trace) == ["increment", "cap", "done"]
    assert trace.records[0].cells == [[0, 1]]
    assert M.entries[0, 1] == 2.0 and M.entries[2, 1] == 1.0


def test_lower_bound_search_skips_capped_cells_of_a_batch():
    later = [
        [np.nan, 0.10, 0.90],
        [0.20, np.nan, 0.90],
        [0.90, 0.90, np.nan],
    ]
    hooks = ScriptedRobustnessHooks([BASE_ROBUSTNESS, later, later])
    cfg = SearchConfig(xi=0.0, delta=1.0, batch_t=2, m_cap=2.0)
    M, trace = search_lower_bound(None, None, cfg, hooks=hooks, n_classes=3)
    assert _actions(trace) == ["increment", "increment", "cap", "done"]
    assert trace.records[0].cells == [[0, 1], [2, 1]]
    # (0, 1) is capped, so only (1, 0) of the two weakest cells is raised.
    assert trace.records[1].cells == [[1, 0]]
    expected = np.ones((3, 3))
    np.fill_diagonal(expected, 0.0)
    expected[0, 1] = expected[2, 1] = expected[1, 0] = 2.0
    assert_array_equal(M.entries, expected)


def test_records_name_the_matrix_their_accuracy_belongs_to():
    cfg = SearchConfig(xi=0.85, delta=5.0, batch_t=2)
    _, weighted = search_weighted(None, None, WEIGHTS, SearchConfig(xi=0.9, delta=4.0), hooks=StubHooks())
    _, lower = search_lower_bound(None, None, cfg, hooks=StubHooks(), n_classes=3)
    hooks = StubHooks()
    for trace in (weighted, lower):
        assert {"increment", "revert"} <= set(_actions(trace))
        previous = cfg.initial_matrix(3).to_list()
        for record in trace.records:
            checked = AttackSensitiveMatrix(record.checked_matrix)
            assert record.accuracy == pytest.approx(hooks.accuracy(checked))
            if record.action == "increment":
                # The accuracy is that of the matrix before the raise.
                assert record.checked_matrix == previous
                assert record.checked_matrix != record.matrix
            elif record.action == "revert":
                assert record.checked_matrix != record.matrix
            else:
                assert record.checked_matrix == record.matrix
            previous = record.matrix


def test_lower_bound_search_budget():
    cfg = SearchConfig(xi=0.0, delta=1.0, batch_t=1, max_outer_iters=2)
    _, trace = search_lower_bound(
        None, None, cfg, hooks=StubHooks(accuracy=0.5), n_classes=3
    )
    assert _actions(trace) == ["increment", "increment", "budget", "done"]


def test_lower_bound_search_reports_an_infeasible_constraint():
    M, trace = search_lower_bound(
        None, None, SearchConfig(xi=1.01), hooks=StubHooks(), n_classes=3
    )
    assert _actions(trace) == ["infeasible"]
    assert trace.infeasible
    assert M == SearchConfig().initial_matrix(3)


def test_lower_bound_needs_the_class_count():
    with pytest.raises(ValueError):
        search_lower_bound(None, None, SearchConfig(), hooks=StubHooks())


@pytest.mark.parametrize("cut", range(16))
def test_resumed_weighted_search_matches_an_uninterrupted_one(cut):
    cfg = SearchConfig(xi=0.9, delta=4.0)
    M, full = search_weighted(None, None, WEIGHTS, cfg, hooks=StubHooks())
    resumed_M, resumed = search_weighted(
        None,
        None,
        WEIGHTS,
        cfg,
        hooks=StubHooks(),
        resume=SearchTrace(full.records[:cut]),
    )
    assert resumed_M == M
    assert _dumps(resumed) == _dumps(full)


@pytest.mark.parametrize("cut", range(5))
def test_resumed_lower_bound_search_matches_an_uninterrupted_one(cut):
    cfg = SearchConfig(xi=0.85, delta=5.0, batch_t=2)
    M, full = search_lower_bound(None, None, cfg, hooks=StubHooks(), n_classes=3)
    resumed_M, resumed = search_lower_bound(
        None,
        None,
        cfg,
        hooks=StubHooks(),
        resume=SearchTrace(full.records[:cut]),
        n_classes=3,
    )
    assert resumed_M == M
    assert _dumps(resumed) == _dumps(full)


def test_resume_rejects_a_trace_of_the_other_objective():
    _, weighted = search_weighted(None, None, WEIGHTS, SearchConfig(xi=0.9, delta=4.0), hooks=StubHooks())
    with pytest.raises(ValueError):
        search_lower_bound(
            None, None, SearchConfig(), hooks=StubHooks(), resume=SearchTrace(weighted.records[:2]), n_classes=3
        )


def test_trace_is_mirrored_to_json_lines(tmp_path):
    path = tmp_path / "trace.jsonl"
    trace = SearchTrace(path=path)
    search_lower_bound(
        None, None, SearchConfig(xi=0.85, delta=5.0, batch_t=2), hooks=StubHooks(), resume=trace, n_classes=3
    )
    assert len(path.read_text().splitlines()) == len(trace)
    loaded = SearchTrace.load_jsonl(path, attach=False)
    assert _dumps(loaded) == _dumps(trace)
    assert loaded.path is None

    copy = tmp_path / "copy.jsonl"
    loaded.save_jsonl(copy)
    assert copy.read_text() == path.read_text()


def test_evaluations_are_memoised():
    hooks = StubHooks()
    search_weighted(None, None, WEIGHTS, SearchConfig(xi=0.9, delta=4.0), hooks=hooks)
    # Every revert lands on a matrix that was already trained on.
    distinct = 1 + 3 + 5
    assert hooks.fits == distinct


def test_search_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(xi=-0.1)
    with pytest.raises(ValueError):
        SearchConfig(delta=0.0)
    with pytest.raises(ValueError):
        SearchConfig(delta=50.0, m_cap=10.0)
    with pytest.raises(ValueError):
        SearchConfig(batch_t=0)
    assert SearchConfig(**{"lambda": 0.5}).lam == 0.5
    assert SearchConfig(loss_variant="v1").loss_spec(AttackSensitiveMatrix.uniform(2)).variant == "combined_v1"


def test_training_hooks_need_data():
    from dataio import Dataset

    empty = Dataset(np.zeros((0, 2)), np.zeros(0), 2)
    with pytest.raises(ValueError):
        TrainingHooks(empty, empty, SearchConfig())


def test_engine_maps_objectives_to_workflows():
    engine = SearchEngine()
    assert engine.get_workflow_for_objective("weighted") is WeightedSearchWorkflow
    assert engine.get_workflow_for_objective("lower") is LowerBoundSearchWorkflow
    with pytest.raises(ValueError):
        engine.get_workflow_for_objective("median")
