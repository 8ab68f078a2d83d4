"""Domain exceptions raised across the package."""

from __future__ import annotations


class MissingArtifactError(FileNotFoundError):
    """An upstream stage artifact (checkpoint, manifest) does not exist yet."""


class RunLockedError(RuntimeError):
    """Another run already holds the output directory lock."""


class DivergenceError(RuntimeError):
    """A training loss became non-finite.

    Carries the ids of the batch being processed and the loss values at the
    time of failure so the offending samples can be inspected.
    """

    def __init__(self, stage: str, step: int, batch_ids: list[str], losses: dict[str, float]):
        self.stage = stage
        self.step = step
        self.batch_ids = list(batch_ids)
        self.losses = dict(losses)
        bad = ", ".join(f"{k}={v}" for k, v in self.losses.items())
        super().__init__(f"Non-finite loss in {stage} at step {step} ({bad}); batch ids: {', '.join(self.batch_ids)}")
