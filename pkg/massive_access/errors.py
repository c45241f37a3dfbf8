"""Exception hierarchy shared by the simulator, learners and harness."""

from typing import Optional


class MassiveAccessError(Exception):
    """Base class for every error raised by this package."""


class ScenarioError(MassiveAccessError, ValueError):
    """Scenario geometry cannot be generated."""


class QosDomainError(MassiveAccessError, ValueError):
    """Argument outside the domain of the lower Lambert-W branch."""


class InfeasibleQosError(QosDomainError):
    """No finite rate meets this arrival rate, deadline and violation target."""


class DimensionError(MassiveAccessError, ValueError):
    """Array shape or network architecture mismatch."""


class ReplayError(MassiveAccessError, ValueError):
    """Replay memory holds fewer experiences than requested."""


class CombinatorialError(MassiveAccessError, ValueError):
    """Exhaustive joint-action search requested for a group that is too large."""


class DivergenceError(MassiveAccessError, RuntimeError):
    """Network parameters became non-finite during training."""

    def __init__(
        self, agent_id: int, episode: int, loss: Optional[float] = None
    ) -> None:
        self.agent_id = agent_id
        self.episode = episode
        self.loss = loss
        super().__init__(
            f"agent {agent_id} diverged in episode {episode} (last loss: {loss})"
        )


class MissingApproachError(MassiveAccessError, LookupError):
    """Figure inputs are missing for one or more approaches."""

    def __init__(self, figure_id: int, missing: list) -> None:
        self.figure_id = figure_id
        self.missing = list(missing)
        super().__init__(
            f"figure {figure_id} needs results for: {', '.join(self.missing)}"
        )


class ExperimentIOError(MassiveAccessError):
    """Reading or writing an experiment file failed."""

    def __init__(self, path: object, reason: object) -> None:
        self.path = path
        super().__init__(f"{path}: {reason}")
