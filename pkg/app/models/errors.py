"""Error kinds raised by the simulator services."""


class AdapnetError(Exception):
    """Base class for every simulator error"""


class InvalidArgumentError(AdapnetError, ValueError):
    pass


class UnknownNodeError(AdapnetError, LookupError):
    pass


class RepairExhaustedError(AdapnetError, RuntimeError):
    """No replacement node was found before the relocation walker ran out of TTL"""

    def __init__(self, failed: int, message: str):
        super().__init__(message)
        self.failed = failed


class RingBrokenError(AdapnetError, RuntimeError):
    """A node departure was detected while a ring was being built"""

    def __init__(self, node: int, radius: int):
        super().__init__(f"Node {node} departed while building ring {radius}")
        self.node = node
        self.radius = radius


class ReturnStrandedError(AdapnetError, RuntimeError):
    pass


class ResourceLimitError(AdapnetError, RuntimeError):
    pass


class ConfigError(AdapnetError, ValueError):
    pass


class PromotionImpossibleError(AdapnetError, RuntimeError):
    pass
