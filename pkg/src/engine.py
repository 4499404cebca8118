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

"""Runs the matrix search workflows and follows their progress."""

try:
    from icecream import ic
except ImportError:  # Graceful fallback if IceCream isn't installed.
    ic = lambda *a: None if not a else (a[0] if len(a) == 1 else a)  # noqa

import asyncio
from typing import Any

from tqdm import tqdm

from llama_index.core.workflow import StopEvent, Workflow

from losses import AttackSensitiveMatrix
from search import SearchTrace
from utils import APP_TITLE_SHORT, get_terminal_size, show_progress
from workflows.common import WorkflowStatusEvent
from workflows.lower_bound_search import LowerBoundSearchWorkflow
from workflows.weighted_search import WeightedSearchWorkflow


def _original_exception(exc: BaseException) -> BaseException:
    """The first exception in the cause chain that was not raised by the workflow runtime."""
    seen = set()
    while (
        type(exc).__module__.startswith("llama_index")
        and id(exc) not in seen
        and (exc.__cause__ or exc.__context__) is not None
    ):
        seen.add(id(exc))
        exc = exc.__cause__ or exc.__context__
    return exc


class SearchEngine:
    """Runs a matrix search workflow to completion."""

    # Seconds to wait for the last progress events once a workflow has returned.
    STREAM_DRAIN_TIMEOUT = 1.0

    def __init__(self):
        self.objectives = {
            WeightedSearchWorkflow.OBJECTIVE: WeightedSearchWorkflow,
            LowerBoundSearchWorkflow.OBJECTIVE: LowerBoundSearchWorkflow,
        }

    def get_workflow_for_objective(self, objective: str):
        """
        Get the workflow searching for the given objective.

        Args:
            objective (str): Either 'weighted' or 'lower'.

        Raises:
            ValueError: If the objective is unknown.
        """
        if objective not in self.objectives:
            raise ValueError(
                f"Objective '{objective}' is not supported, expected one of"
                f" {sorted(self.objectives)}."
            )
        return self.objectives[objective]

    async def _follow(self, handler: Any, progress_bar: tqdm):
        """Report the status events of a running workflow."""
        stream = (
            handler.stream_events()
            if hasattr(handler, "stream_events")
            else self.workflow.stream_events()
        )
        async for ev in stream:
            if isinstance(ev, StopEvent):
                break
            if not isinstance(ev, WorkflowStatusEvent):
                continue
            ic(ev.msg)
            if not progress_bar.disable:
                tqdm.write(str(ev.msg))
            progress_bar.reset(total=ev.total_steps)
            progress_bar.update(ev.finished_steps)
            progress_bar.refresh()

    async def run(self, objective: str, **workflow_init_kwargs: Any) -> dict:
        """
        Run the search workflow for the given objective.

        Args:
            objective (str): Either 'weighted' or 'lower'.
            **workflow_init_kwargs: Passed to the workflow, e.g. hooks, config, n_classes,
                weights and resume.

        Returns:
            dict: The workflow result, holding the final matrix and the trace.
        """
        chosen_workflow = self.get_workflow_for_objective(objective)
        self.workflow: Workflow = chosen_workflow(**workflow_init_kwargs)

        terminal_columns, _ = get_terminal_size()
        progress_bar = tqdm(
            total=0,
            leave=False,
            unit="step",
            ncols=int(terminal_columns / 2),
            desc=APP_TITLE_SHORT,
            colour="yellow",
            disable=not show_progress(),
        )
        handler = self.workflow.run()
        follower = asyncio.create_task(self._follow(handler, progress_bar))
        try:
            result = await handler
        finally:
            try:
                await asyncio.wait_for(follower, timeout=SearchEngine.STREAM_DRAIN_TIMEOUT)
            except (asyncio.TimeoutError, asyncio.CancelledError):
                pass
            except Exception as e:
                ic("progress stream failed", e)
            progress_bar.close()
        return result

    def run_search(
        self, objective: str, **workflow_init_kwargs: Any
    ) -> tuple[AttackSensitiveMatrix, SearchTrace]:
        """
        Run a search to completion.

        Args:
            objective (str): Either 'weighted' or 'lower'.
            **workflow_init_kwargs: Passed to the workflow.

        Returns:
            tuple[AttackSensitiveMatrix, SearchTrace]: The final matrix and the trace.

        Raises:
            Exception: Whatever a search step raised, unwrapped from the workflow runtime.
        """
        try:
            result = asyncio.run(self.run(objective, **workflow_init_kwargs))
        except Exception as e:
            raise _original_exception(e)
        return result["matrix"], result["trace"]
