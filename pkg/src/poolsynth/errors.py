"""Exception hierarchy shared across the package."""


class PoolSynthError(Exception):
    """Base class for all package errors."""


class DatasetMissingError(PoolSynthError, FileNotFoundError):
    def __init__(self, path, hint=""):
        self.path = str(path)
        msg = f"dataset files not found: {self.path}"
        if hint:
            msg += f" ({hint})"
        super().__init__(msg)


class CorruptRecordError(PoolSynthError, ValueError):
    def __init__(self, index, reason):
        self.index = index
        super().__init__(f"corrupt record at index {index}: {reason}")


class EmptyClassError(PoolSynthError, ValueError):
    pass


class InsufficientSamplesError(PoolSynthError, ValueError):
    def __init__(self, deficient):
        self.deficient = dict(deficient)
        detail = ", ".join(f"class {k}: {v}" for k, v in sorted(self.deficient.items()))
        super().__init__(f"not enough samples per class ({detail})")


class UnknownArchitectureError(PoolSynthError, KeyError):
    def __init__(self, arch_id, registered):
        self.arch_id = arch_id
        super().__init__(f"unknown architecture {arch_id!r}; registered: {', '.join(sorted(registered))}")

    def __str__(self):
        return self.args[0]


class ShapeMismatchError(PoolSynthError, ValueError):
    def __init__(self, expected, given, what="input"):
        self.expected = tuple(expected)
        self.given = tuple(given)
        super().__init__(f"{what} shape mismatch: expected {self.expected}, given {self.given}")


class CheckpointError(PoolSynthError):
    pass


class VersionMismatchError(CheckpointError):
    def __init__(self, found, expected, path=""):
        self.found = found
        self.expected = expected
        super().__init__(f"format version mismatch in {path or 'file'}: file has v{found}, reader expects v{expected}")


class ChecksumError(CheckpointError):
    def __init__(self, path, stored, actual):
        self.stored = stored
        self.actual = actual
        super().__init__(f"checksum failure for {path}: manifest says {stored[:12]}..., content hashes to {actual[:12]}...")


class PoolError(PoolSynthError, ValueError):
    pass


class InfeasiblePruneError(PoolError):
    pass


class UntrainedBaseWarning(UserWarning):
    pass


class NonFiniteActivationError(PoolSynthError, FloatingPointError):
    def __init__(self, layer_id):
        self.layer_id = layer_id
        super().__init__(f"non-finite activation statistics at layer {layer_id!r}")


class DivergenceError(PoolSynthError, RuntimeError):
    pass


class SizeCapError(PoolSynthError, ValueError):
    pass


class DegenerateConfigError(PoolSynthError, ValueError):
    pass


class ConfigError(PoolSynthError, ValueError):
    """Config file failed schema validation; ``field`` is a dotted path."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)
