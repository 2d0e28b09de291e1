class ConfigError(ValueError):
    """Invalid configuration or precondition violation."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DivergenceError(ArithmeticError):
    """Non-finite parameters appeared during training."""

    def __init__(self, message, client=None, step=None, round=None):
        self.client = client
        self.step = step
        self.round = round
        ctx = []
        if round is not None:
            ctx.append(f"round {round}")
        if client is not None:
            ctx.append(f"client {client}")
        if step is not None:
            ctx.append(f"step {step}")
        if ctx:
            message = f"{message} ({', '.join(ctx)})"
        super().__init__(message)


class UnavailableError(RuntimeError):
    """Requested quantity was not recorded for this run."""
