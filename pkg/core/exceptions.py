"""Error hierarchy shared by every app.

SpecError and its subclasses are input problems (exit code 1); NumericalError
and its subclasses are solver or simulation failures (exit code 2).
"""


class MFGError(Exception):
    code = "mfg_error"
    exit_code = 2

    def __init__(self, message, detail=None):
        super().__init__(message)
        self.message = message
        self.detail = detail or {}

    def to_dict(self):
        return {"code": self.code, "message": self.message, "detail": self.detail}


class SpecError(MFGError):
    code = "invalid_spec"
    exit_code = 1


class DegeneratePolicyError(SpecError):
    code = "entropy_undefined"


class NumericalError(MFGError):
    code = "numerical_failure"
    exit_code = 2


class ODEBlowUpError(NumericalError):
    code = "ode_blow_up"

    def __init__(self, t, detail=None):
        super().__init__(f"ODE blow-up at t={t:.6g}", detail={"t": float(t), **(detail or {})})
        self.t = float(t)


class RiccatiNotStabilizedError(NumericalError):
    code = "riccati_not_stabilized"


class ConsistencyDivergedError(NumericalError):
    code = "consistency_diverged"


class SteadyStateUndefinedError(NumericalError):
    code = "steady_state_undefined"


class HorizonTooShortError(NumericalError):
    code = "horizon_too_short"


class OutsideGridError(NumericalError):
    code = "outside_grid"


class QuadratureError(NumericalError):
    code = "quadrature_failure"


class ParameterUnidentifiableError(NumericalError):
    code = "parameter_unidentifiable"

    def __init__(self, message, params=(), detail=None):
        super().__init__(message, detail={"params": list(params), **(detail or {})})
        self.params = tuple(params)
