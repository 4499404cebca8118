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

"""Stuff common to the matrix search workflows."""

try:
    from icecream import ic
except ImportError:  # Graceful fallback if IceCream isn't installed.
    ic = lambda *a: None if not a else (a[0] if len(a) == 1 else a)  # noqa

import asyncio
from typing import Any

from llama_index.core.workflow import (
    Context,
    Event,
    Workflow,
)

from losses import AttackSensitiveMatrix
from search import SearchConfig, SearchHooks, SearchRecord, SearchTrace


# Generic Events
class WorkflowStatusEvent(Event):
    """
    Event to update the status of the workflow.

    Fields:
        msg (str): The message to display.
        total_steps (int): Optional total number of steps, defaults to zero.
        finished_steps (int): Optional number of steps finished, defaults to zero.
    """

    msg: str
    total_steps: int = 0
    finished_steps: int = 0


class SearchCheckEvent(Event):
    """Event to train on the current matrix and check the accuracy constraint."""

    pass


class SearchAcceptEvent(Event):
    """
    Event raised when the current matrix satisfies the accuracy constraint.

    Fields:
        accuracy (float): The validation accuracy.
    """

    accuracy: float


class SearchRejectEvent(Event):
    """
    Event raised when the current matrix violates the accuracy constraint.

    Fields:
        accuracy (float): The validation accuracy.
    """

    accuracy: float


class SearchNextPairEvent(Event):
    """Event to move the weighted search on to the next pair."""

    pass


class MatrixSearchWorkflow(Workflow):
    """
    Shared state and helpers of the matrix search workflows. Subclasses define the steps.

    The current matrix lives in the context under `KEY_MATRIX`. Evaluations are memoised per
    matrix value, since retraining is deterministic in the matrix.
    """

    KEY_MATRIX = "matrix"
    KEY_MODEL = "model"

    OBJECTIVE: str = "weighted"

    def __init__(
        self,
        *args: Any,
        hooks: SearchHooks | None = None,
        config: SearchConfig | None = None,
        n_classes: int = 2,
        resume: SearchTrace | None = None,
        **kwargs: Any,
    ) -> None:
        """
        Initialize the search workflow.

        Args:
            hooks (SearchHooks): Training and evaluation of candidate matrices.
            config (SearchConfig): The search settings.
            n_classes (int): The number of classes.
            resume (SearchTrace): A trace to continue; new records are appended to it.
        """
        # Searches retrain many models; no overall timeout unless asked for.
        kwargs.setdefault("timeout", None)
        super().__init__(*args, **kwargs)

        if hooks is None:
            raise ValueError("Search hooks are required for this workflow.")

        self.hooks = hooks
        self.config = config or SearchConfig()
        self.n_classes = n_classes
        self.trace = resume if resume is not None else SearchTrace()

        self._evaluations: dict[bytes, tuple[Any, float]] = {}
        self._total_steps: int = 0
        self._finished_steps: int = 0

    async def evaluate(self, ctx: Context, matrix: AttackSensitiveMatrix) -> float:
        """Train on the matrix (or reuse an earlier result) and return the validation accuracy."""
        key = matrix.entries.tobytes()
        if key not in self._evaluations:
            model = await asyncio.to_thread(self.hooks.fit, matrix)
            accuracy = float(await asyncio.to_thread(self.hooks.accuracy, model))
            self._evaluations[key] = (model, accuracy)
        else:
            ic("cached evaluation", matrix.to_list())
        model, accuracy = self._evaluations[key]
        await ctx.set(MatrixSearchWorkflow.KEY_MODEL, model)
        return accuracy

    async def final_model(self, matrix: AttackSensitiveMatrix) -> tuple[Any, float]:
        """The model trained on the matrix and its accuracy, training it if needed."""
        key = matrix.entries.tobytes()
        if key not in self._evaluations:
            model = await asyncio.to_thread(self.hooks.fit, matrix)
            accuracy = float(await asyncio.to_thread(self.hooks.accuracy, model))
            self._evaluations[key] = (model, accuracy)
        return self._evaluations[key]

    def record(
        self,
        ctx: Context,
        matrix: AttackSensitiveMatrix,
        action: str,
        accuracy: float | None,
        cells: list[tuple[int, int]] | None = None,
        pair_index: int | None = None,
        robustness: dict | None = None,
        infeasible: bool = False,
        checked: AttackSensitiveMatrix | None = None,
    ):
        """
        Append a record to the trace and report it on the event stream. `checked` is the matrix
        the accuracy belongs to, when it is not `matrix`.
        """
        record = SearchRecord(
            iteration=len(self.trace),
            objective=self.OBJECTIVE,
            pair_index=pair_index,
            cells=[list(cell) for cell in cells or []],
            matrix=matrix.to_list(),
            accuracy=accuracy,
            checked_matrix=(checked if checked is not None else matrix).to_list(),
            action=action,
            robustness=robustness,
            infeasible=infeasible,
        )
        self.trace.append(record)
        self._total_steps += 1
        self._finished_steps += 1
        ctx.write_event_to_stream(
            WorkflowStatusEvent(
                msg=(
                    f"[{self.__class__.__name__}] iteration {record.iteration}: {action}"
                    f" {record.cells} (accuracy {accuracy})"
                ),
                total_steps=self._total_steps,
                finished_steps=self._finished_steps,
            )
        )

    async def finish(
        self, ctx: Context, matrix: AttackSensitiveMatrix, close: bool = True
    ) -> dict:
        """
        Attach the model trained on the final matrix to the trace and build the result.

        Args:
            ctx (Context): The workflow context.
            matrix (AttackSensitiveMatrix): The matrix the search returns.
            close (bool): Append a 'done' record; infeasible and already finished traces are
                left as they are.

        Returns:
            dict: The final matrix and the trace.
        """
        model, accuracy = await self.final_model(matrix)
        if close:
            self.record(ctx, matrix, "done", accuracy)
        self.trace.final_model = model
        return {"matrix": matrix, "trace": self.trace}

    def matrix_from_record(self, record: SearchRecord) -> AttackSensitiveMatrix:
        return AttackSensitiveMatrix(record.matrix, m_cap=self.config.m_cap)

    def matrix_before(self, position: int) -> AttackSensitiveMatrix:
        """The matrix the record at `position` of the trace started from."""
        if position == 0:
            return self.config.initial_matrix(self.n_classes)
        return self.matrix_from_record(self.trace.records[position - 1])

    def check_resume(self):
        if self.trace.records and self.trace.records[0].objective != self.OBJECTIVE:
            raise ValueError(
                f"Cannot resume a '{self.trace.records[0].objective}' trace as a"
                f" '{self.OBJECTIVE}' search."
            )
        for record in self.trace.records:
            if len(record.matrix) != self.n_classes:
                raise ValueError(
                    f"Trace record {record.iteration} has a {len(record.matrix)}-class matrix,"
                    f" expected {self.n_classes}."
                )
