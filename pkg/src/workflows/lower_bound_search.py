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

"""Greedy search of the attack sensitive matrix for the lower bound robustness."""

try:
    from icecream import ic
except ImportError:  # Graceful fallback if IceCream isn't installed.
    ic = lambda *a: None if not a else (a[0] if len(a) == 1 else a)  # noqa

import asyncio

from llama_index.core.workflow import (
    step,
    Context,
    StartEvent,
    StopEvent,
)

from losses import AttackSensitiveMatrix
from robustness import RobustnessMatrix, off_diagonal_cells, robustness_summary
from workflows.common import (
    MatrixSearchWorkflow,
    SearchAcceptEvent,
    SearchCheckEvent,
    SearchRejectEvent,
    WorkflowStatusEvent,
)


class LowerBoundSearchWorkflow(MatrixSearchWorkflow):
    """
    ## Lower bound search

    While the validation accuracy stays above the threshold, measures the robustness matrix of the
    current model and raises the entries of the `batch_t` least robust cells by `delta` (equal
    values in row-major order). The first batch that breaks the constraint is undone and the
    search ends.

    The search also ends after `max_outer_iters` batches, or when every one of the `batch_t` least
    robust cells has reached `m_cap`. Capped cells among them are left as they are while the
    others are raised.
    """

    OBJECTIVE = "lower"

    KEY_RAISES = "raises"
    KEY_LAST_CELLS = "last_cells"
    KEY_ACCEPTED_MATRIX = "accepted_matrix"

    # Actions after which the lower bound search has nothing left to do.
    _STOPPING_ACTIONS = ("revert", "cap", "budget")

    def select_cells(
        self, R: RobustnessMatrix, matrix: AttackSensitiveMatrix
    ) -> list[tuple[int, int]]:
        """
        The cells to raise: the `batch_t` least robust measured cells, less those whose entry
        cannot take another `delta` without exceeding `m_cap`. Empty once every targeted cell is
        capped; capped cells are not replaced by the next weakest ones.
        """
        measured = [cell for cell in off_diagonal_cells(self.n_classes) if not R.is_empty(cell)]
        # Stable sort: ties stay row-major.
        measured.sort(key=lambda cell: float(R.values[cell]))
        return [
            cell
            for cell in measured[: self.config.batch_t]
            if matrix.entries[cell] + self.config.delta <= self.config.m_cap
        ]

    @step
    async def start(self, ctx: Context, ev: StartEvent) -> SearchCheckEvent | StopEvent:
        """Set up or restore the search state."""
        self.check_resume()
        self._total_steps += 1
        ctx.write_event_to_stream(
            WorkflowStatusEvent(
                msg=(
                    f"Lower bound search, batches of {self.config.batch_t}, threshold"
                    f" {self.config.xi}"
                    + (f", resuming after {len(self.trace)} records" if len(self.trace) else "")
                ),
                total_steps=self._total_steps,
                finished_steps=self._finished_steps,
            )
        )
        self._finished_steps += 1

        last = self.trace.last
        if self.trace.finished:
            return StopEvent(
                result=await self.finish(ctx, self.matrix_from_record(last), close=False)
            )
        if last is not None and last.action in LowerBoundSearchWorkflow._STOPPING_ACTIONS:
            return StopEvent(result=await self.finish(ctx, self.matrix_from_record(last)))

        if last is None:
            matrix = self.config.initial_matrix(self.n_classes)
            await ctx.set(LowerBoundSearchWorkflow.KEY_RAISES, 0)
            await ctx.set(LowerBoundSearchWorkflow.KEY_LAST_CELLS, [])
            await ctx.set(LowerBoundSearchWorkflow.KEY_ACCEPTED_MATRIX, matrix)
        else:
            # Only raises are left unfinished.
            matrix = self.matrix_from_record(last)
            await ctx.set(LowerBoundSearchWorkflow.KEY_RAISES, len(self.trace))
            await ctx.set(
                LowerBoundSearchWorkflow.KEY_LAST_CELLS,
                [tuple(cell) for cell in last.cells],
            )
            await ctx.set(
                LowerBoundSearchWorkflow.KEY_ACCEPTED_MATRIX,
                self.matrix_before(len(self.trace) - 1),
            )
        await ctx.set(MatrixSearchWorkflow.KEY_MATRIX, matrix)
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
    ) -> SearchCheckEvent | StopEvent:
        """Raise the least robust cells of the current model."""
        matrix = await ctx.get(MatrixSearchWorkflow.KEY_MATRIX)
        raises = await ctx.get(LowerBoundSearchWorkflow.KEY_RAISES)

        if raises >= self.config.max_outer_iters:
            self.record(ctx, matrix, "budget", ev.accuracy)
            return StopEvent(result=await self.finish(ctx, matrix))

        model = await ctx.get(MatrixSearchWorkflow.KEY_MODEL)
        R = await asyncio.to_thread(self.hooks.robustness, model)
        if R.n != self.n_classes:
            raise ValueError(
                f"Robustness matrix has {R.n} classes, expected {self.n_classes}."
            )
        summary = robustness_summary(R) if R.filled_cells() else None
        cells = self.select_cells(R, matrix)
        if not cells:
            self.record(ctx, matrix, "cap", ev.accuracy, robustness=summary)
            return StopEvent(result=await self.finish(ctx, matrix))

        await ctx.set(LowerBoundSearchWorkflow.KEY_ACCEPTED_MATRIX, matrix)
        raised = matrix.add(cells, self.config.delta)
        await ctx.set(MatrixSearchWorkflow.KEY_MATRIX, raised)
        await ctx.set(LowerBoundSearchWorkflow.KEY_RAISES, raises + 1)
        await ctx.set(LowerBoundSearchWorkflow.KEY_LAST_CELLS, cells)
        self.record(
            ctx, raised, "increment", ev.accuracy, cells, robustness=summary, checked=matrix
        )
        return SearchCheckEvent()

    @step
    async def reject(self, ctx: Context, ev: SearchRejectEvent) -> StopEvent:
        """Undo the last batch and finish, or stop if the first matrix already fails."""
        matrix = await ctx.get(MatrixSearchWorkflow.KEY_MATRIX)
        cells = await ctx.get(LowerBoundSearchWorkflow.KEY_LAST_CELLS)

        if not cells:
            self.record(ctx, matrix, "infeasible", ev.accuracy, infeasible=True)
            return StopEvent(result=await self.finish(ctx, matrix, close=False))

        accepted = await ctx.get(LowerBoundSearchWorkflow.KEY_ACCEPTED_MATRIX)
        await ctx.set(MatrixSearchWorkflow.KEY_MATRIX, accepted)
        self.record(ctx, accepted, "revert", ev.accuracy, cells, checked=matrix)
        return StopEvent(result=await self.finish(ctx, accepted))
