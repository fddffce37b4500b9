import logging

LOG_FORMAT = "%(levelname)-5.5s [%(name)s] %(message)s"


def configure_logging(level: str | int = "WARNING") -> None:
    if isinstance(level, str):
        level = getattr(logging, level.upper(), logging.WARNING)
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)
    # cvxpy is chatty at INFO
    logging.getLogger("cvxpy").setLevel(max(level, logging.WARNING))


def verbosity_to_level(verbose: int) -> int:
    if verbose >= 2:
        return logging.DEBUG
    if verbose == 1:
        return logging.INFO
    return logging.WARNING
