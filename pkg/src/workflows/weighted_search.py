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

"""Greedy search of the attack sensitive matrix for the weighted average robustness."""

try:
    from icecream import ic
except ImportError:  # Graceful fallback if IceCream isn't installed.
    ic = lambda *a: None if not a else (a[0] if len(a) == 1 else a)  # noqa

from typing import Any

from llama_index.core.workflow import (
    step,
    Context,
    StartEvent,
    StopEvent,
)

from robustness import WeightMatrix, off_diagonal_cells
from workflows.common import (
    MatrixSearchWorkflow,
    SearchAcceptEvent,
    SearchCheckEvent,
    SearchNextPairEvent,
    SearchRejectEvent,
    WorkflowStatusEvent,
)


class WeightedSearchWorkflow(MatrixSearchWorkflow):
    """
    ## Weighted average search

    Visits the class pairs from the largest weight to the smallest (equal weights in row-major
    order). For each pair, the model is retrained on the current matrix; while the validation
    accuracy stays above the threshold the pair's entry is raised by `delta`. The first raise that
    breaks the constraint is undone and the search moves on to the next pair.

    A pair is also left when its entry would exceed `m_cap` or after `max_outer_iters` raises.
    If the very first matrix already breaks the constraint, the search stops with the infeasible
    flag set.
    """

    OBJECTIVE = "weighted"

    KEY_PAIR_INDEX = "pair_index"
    KEY_PAIR_RAISES = "pair_raises"
    KEY_ACCEPTED_MATRIX = "accepted_matrix"
    KEY_ANY_ACCEPTED = "any_accepted"

    def __init__(self, *args: Any, weights: WeightMatrix | None = None, **kwargs: Any) -> None:
        """
        Initialize the weighted search workflow.

        Args:
            weights (WeightMatrix): The importance of every pair.
        """
        super().__init__(*args, **kwargs)
        if weights is None:
            raise ValueError("A weight matrix is required for the weighted search.")
        if weights.n != self.n_classes:
            raise ValueError(
                f"Weight matrix has {weights.n} classes, expected {self.n_classes}."
            )
        self.weights = weights
        # sorted() is stable, so equal weights keep the row-major order.
        self.pairs = sorted(
            off_diagonal_cells(self.n_classes), key=lambda cell: -weights.entries[cell]
        )

    async def _restore(self, ctx: Context):
        """Rebuild the loop state from the trace to continue an interrupted search."""
        last = self.trace.last
        matrix = self.matrix_from_record(last)
        await ctx.set(WeightedSearchWorkflow.KEY_ANY_ACCEPTED, True)
        if last.action == "increment":
            raises = [
                position
                for position, record in enumerate(self.trace.records)
                if record.pair_index == last.pair_index and record.action == "increment"
            ]
            await ctx.set(WeightedSearchWorkflow.KEY_PAIR_INDEX, last.pair_index)
            await ctx.set(WeightedSearchWorkflow.KEY_PAIR_RAISES, len(raises))
            await ctx.set(
                WeightedSearchWorkflow.KEY_ACCEPTED_MATRIX, self.matrix_before(raises[-1])
            )
        else:
            await ctx.set(WeightedSearchWorkflow.KEY_PAIR_INDEX, last.pair_index + 1)
            await ctx.set(WeightedSearchWorkflow.KEY_PAIR_RAISES, 0)
            await ctx.set(WeightedSearchWorkflow.KEY_ACCEPTED_MATRIX, matrix)
        await ctx.set(MatrixSearchWorkflow.KEY_MATRIX, matrix)

    @step
    async def start(self, ctx: Context, ev: StartEvent) -> SearchCheckEvent | StopEvent:
        """Set up or restore the search state."""
        self.check_resume()
        self._total_steps += 1
        ctx.write_event_to_stream(
            WorkflowStatusEvent(
                msg=(
                    f"Weighted search over {len(self.pairs)} pairs, threshold {self.config.xi}"
                    + (f", resuming after {len(self.trace)} records" if len(self.trace) else "")
                ),
                total_steps=self._total_steps,
                finished_steps=self._finished_steps,
            )
        )
        self._finished_steps += 1

        if self.trace.finished:
            matrix = self.matrix_from_record(self.trace.last)
            return StopEvent(result=await self.finish(ctx, matrix, close=False))

        if self.trace.last is None:
            matrix = self.config.initial_matrix(self.n_classes)
            await ctx.set(MatrixSearchWorkflow.KEY_MATRIX, matrix)
            await ctx.set(WeightedSearchWorkflow.KEY_ACCEPTED_MATRIX, matrix)
            await ctx.set(WeightedSearchWorkflow.KEY_PAIR_INDEX, 0)
            await ctx.set(WeightedSearchWorkflow.KEY_PAIR_RAISES, 0)
            await ctx.set(WeightedSearchWorkflow.KEY_ANY_ACCEPTED, False)
        else:
            await self._restore(ctx)

        if await ctx.get(WeightedSearchWorkflow.KEY_PAIR_INDEX) >= len(self.pairs):
            matrix = await ctx.get(MatrixSearchWorkflow.KEY_MATRIX)
            return StopEvent(result=await self.finish(ctx, matrix))
        return SearchCheckEvent()

    @step
    async def check(
        self, ctx: Context, ev: SearchCheckEvent
    ) -> SearchAcceptEvent | SearchRejectEvent:
        """Retrain on the current matrix and compare the validation accuracy to the threshold."""
        matrix = await ctx.get(MatrixSearchWorkflow.KEY_MATRIX)
        accuracy = await self.evaluate(ctx, matrix)
        ic(accuracy, self.config.xi)
        if accuracy > self.config.xi:
            return SearchAcceptEvent(accuracy=accuracy)
        return SearchRejectEvent(accuracy=accuracy)

    @step
    async def accept(
        self, ctx: Context, ev: SearchAcceptEvent
    ) -> SearchCheckEvent | SearchNextPairEvent:
        """Raise the current pair's entry, unless it is capped or out of budget."""
        matrix = await ctx.get(MatrixSearchWorkflow.KEY_MATRIX)
        pair_index = await ctx.get(WeightedSearchWorkflow.KEY_PAIR_INDEX)
        raises = await ctx.get(WeightedSearchWorkflow.KEY_PAIR_RAISES)
        cell = self.pairs[pair_index]
        await ctx.set(WeightedSearchWorkflow.KEY_ANY_ACCEPTED, True)

        if matrix.entries[cell] + self.config.delta > self.config.m_cap:
            self.record(ctx, matrix, "cap", ev.accuracy, [cell], pair_index)
            return SearchNextPairEvent()
        if raises >= self.config.max_outer_iters:
            self.record(ctx, matrix, "budget", ev.accuracy, [cell], pair_index)
            return SearchNextPairEvent()

        await ctx.set(WeightedSearchWorkflow.KEY_ACCEPTED_MATRIX, matrix)
        raised = matrix.add([cell], self.config.delta)
        await ctx.set(MatrixSearchWorkflow.KEY_MATRIX, raised)
        await ctx.set(WeightedSearchWorkflow.KEY_PAIR_RAISES, raises + 1)
        self.record(ctx, raised, "increment", ev.accuracy, [cell], pair_index, checked=matrix)
        return SearchCheckEvent()

    @step
    async def reject(
        self, ctx: Context, ev: SearchRejectEvent
    ) -> SearchNextPairEvent | StopEvent:
        """Undo the pair's last raise, or stop if no matrix ever met the constraint."""
        matrix = await ctx.get(MatrixSearchWorkflow.KEY_MATRIX)
        pair_index = await ctx.get(WeightedSearchWorkflow.KEY_PAIR_INDEX)
        raises = await ctx.get(WeightedSearchWorkflow.KEY_PAIR_RAISES)
        cell = self.pairs[pair_index]

        if raises > 0:
            accepted = await ctx.get(WeightedSearchWorkflow.KEY_ACCEPTED_MATRIX)
            await ctx.set(MatrixSearchWorkflow.KEY_MATRIX, accepted)
            self.record(
                ctx, accepted, "revert", ev.accuracy, [cell], pair_index, checked=matrix
            )
            return SearchNextPairEvent()
        if not await ctx.get(WeightedSearchWorkflow.KEY_ANY_ACCEPTED):
            self.record(
                ctx, matrix, "infeasible", ev.accuracy, [], pair_index, infeasible=True
            )
            return StopEvent(result=await self.finish(ctx, matrix, close=False))
        self.record(ctx, matrix, "reject", ev.accuracy, [cell], pair_index)
        return SearchNextPairEvent()

    @step
    async def next_pair(
        self, ctx: Context, ev: SearchNextPairEvent
    ) -> SearchCheckEvent | StopEvent:
        """Move on to the next pair, or finish after the last one."""
        pair_index = await ctx.get(WeightedSearchWorkflow.KEY_PAIR_INDEX) + 1
        await ctx.set(WeightedSearchWorkflow.KEY_PAIR_INDEX, pair_index)
        await ctx.set(WeightedSearchWorkflow.KEY_PAIR_RAISES, 0)
        if pair_index >= len(self.pairs):
            matrix = await ctx.get(MatrixSearchWorkflow.KEY_MATRIX)
            return StopEvent(result=await self.finish(ctx, matrix))
        return SearchCheckEvent()
