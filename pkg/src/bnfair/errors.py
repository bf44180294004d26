"""Exceptions shared by the pipeline and the command line."""


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, seed, cause):
        super().__init__(f"stage {stage!r} failed (seed {seed}): {cause}")
        self.stage, self.seed = stage, seed
