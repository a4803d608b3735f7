class SimulationError(RuntimeError):
    """A replication produced a non-finite forward price or payoff input."""
