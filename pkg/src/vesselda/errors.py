"""Exception types shared across the package."""


class VesselDAError(Exception):
    pass


class ShapeError(VesselDAError, ValueError):
    pass


class ConfigError(VesselDAError, ValueError):
    pass


class DegenerateInput(VesselDAError, ValueError):
    pass


class InvalidLabel(VesselDAError, ValueError):
    pass


class TrainingDiverged(VesselDAError, RuntimeError):
    pass


class NotReady(VesselDAError, RuntimeError):
    pass


class EmptyReport(VesselDAError, ValueError):
    pass
