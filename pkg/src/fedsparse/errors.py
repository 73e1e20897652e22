"""Exception types shared across the simulator."""


class ConfigurationError(ValueError):
    """An impossible or out-of-range configuration was requested."""


class FormatError(ValueError):
    """A dataset file does not match its documented binary layout."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the computation requires finite ones."""


class ClientFailure(RuntimeError):
    """A single client could not complete its local update this round."""

    def __init__(self, client_id: int, round_no: int, cause: str):
        super().__init__(f"client {client_id} failed in round {round_no}: {cause}")
        self.client_id = client_id
        self.round_no = round_no
        self.cause = cause


class RoundError(RuntimeError):
    """A federated round could not produce a new server model."""
