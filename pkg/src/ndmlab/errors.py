"""Exception hierarchy shared across the package."""


class NDMError(Exception):
    """Base class for all package errors."""


class ContractError(NDMError, ValueError):
    """A caller broke a documented precondition (shapes, ranges, config)."""


class DomainError(ContractError):
    """A time or index argument lies outside the supported domain."""


class NumericalError(NDMError, ArithmeticError):
    """A computation produced non-finite or otherwise unusable numbers."""


class NonFiniteError(NumericalError):
    def __init__(self, message, layer=None):
        super().__init__(message if layer is None else f"{message} (layer {layer})")
        self.layer = layer


class SingularityError(NumericalError):
    """Division by a vanishing schedule quantity (alpha, sigma, posterior variance)."""


class InversionError(NumericalError):
    """Newton + bisection failed to invert a monotone map."""


class StiffIntegrationError(NumericalError):
    def __init__(self, message, t=None, h=None, n_steps=None, n_rejected=None):
        diag = f"t={t}, h={h}, steps={n_steps}, rejected={n_rejected}"
        super().__init__(f"{message} [{diag}]")
        self.t = t
        self.h = h
        self.n_steps = n_steps
        self.n_rejected = n_rejected
