"""Exception types shared across the engine."""


class FreeCustomError(Exception):
    """Base class for all engine errors."""


class ShapeError(FreeCustomError, ValueError):
    pass


class InputError(FreeCustomError, ValueError):
    pass


class ConsistencyError(FreeCustomError, ValueError):
    pass


class ConfigError(FreeCustomError, ValueError):
    pass


class SpecError(FreeCustomError, ValueError):
    """Invalid synthetic scene description."""


class CacheMissError(FreeCustomError, LookupError):
    def __init__(self, block: int, layer: int, step: int, ref_index: int | None = None):
        self.block = block
        self.layer = layer
        self.step = step
        self.ref_index = ref_index
        where = f"block={block}, layer={layer}, step={step}"
        if ref_index is not None:
            where = f"ref={ref_index}, " + where
        super().__init__(f"KV cache miss at ({where})")
