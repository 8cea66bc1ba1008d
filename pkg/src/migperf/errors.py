"""Exception hierarchy shared by every layer.

Each error carries an HTTP status so the control surface can map failures
without a lookup table of its own.
"""


class MigPerfError(Exception):
    status = 400
    code = "error"

    def __init__(self, message="", **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self):
        body = {"code": self.code, "message": self.message}
        if self.details:
            body["details"] = self.details
        return body


def _error(name, status, code):
    return type(name, (MigPerfError,), {"status": status, "code": code})


# catalog / device model
CatalogError = _error("CatalogError", 400, "catalog_error")
UnknownProfile = _error("UnknownProfile", 400, "unknown_profile")
AlreadyEnabled = _error("AlreadyEnabled", 409, "already_enabled")
NotEnabled = _error("NotEnabled", 409, "not_enabled")
ModeConflict = _error("ModeConflict", 409, "mode_conflict")
NoCapacity = _error("NoCapacity", 409, "no_capacity")
InvalidStart = _error("InvalidStart", 400, "invalid_start")
NotFound = _error("NotFound", 404, "not_found")
Busy = _error("Busy", 409, "busy")

# controller
UnknownDevice = _error("UnknownDevice", 404, "unknown_device")
InfeasibleTarget = _error("InfeasibleTarget", 400, "infeasible_target")
BusyInstance = _error("BusyInstance", 409, "busy_instance")
AlreadyBound = _error("AlreadyBound", 409, "already_bound")
NotBound = _error("NotBound", 409, "not_bound")

# workload
InvalidSpec = _error("InvalidSpec", 400, "invalid_spec")
BindFailed = _error("BindFailed", 409, "bind_failed")
NoEqualSplit = _error("NoEqualSplit", 400, "no_equal_split")

# telemetry / export
OutOfOrder = _error("OutOfOrder", 400, "out_of_order")
EmptySeries = _error("EmptySeries", 400, "empty_series")
InsufficientSamples = _error("InsufficientSamples", 400, "insufficient_samples")
MissingSeries = _error("MissingSeries", 400, "missing_series")
UnknownRun = _error("UnknownRun", 404, "unknown_run")
IncompleteGrid = _error("IncompleteGrid", 400, "incomplete_grid")

# engine
RunNotComplete = _error("RunNotComplete", 409, "run_not_complete")
UnknownGroup = _error("UnknownGroup", 404, "unknown_group")
