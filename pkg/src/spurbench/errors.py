"""Exception types raised across the toolkit."""


class SpurBenchError(Exception):
    """Base class for all toolkit errors."""


class AudioError(SpurBenchError, ValueError):
    pass


class CatalogError(SpurBenchError, ValueError):
    pass


class EpisodeError(SpurBenchError, RuntimeError):
    pass


class PoolExhausted(EpisodeError):
    pass


class InfeasibleEpisode(EpisodeError):
    pass


class EmbeddingError(SpurBenchError, ValueError):
    pass


class HeadError(SpurBenchError, RuntimeError):
    pass


class SinkhornError(HeadError):
    """Sinkhorn scaling did not reach the marginal tolerance within budget."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class GeometryError(SpurBenchError, ValueError):
    pass


class EvalError(SpurBenchError, RuntimeError):
    pass
