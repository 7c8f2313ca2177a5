import logging
import logging.config

"""
This file configures logging for the docnav package.

Library modules never install handlers; they log through `log` (or a child logger
from `getLogger`). The command line entry point calls `configure_logging`, which sets
up the root handler. Under pytest, log records are captured and shown by the
log_cli settings in pytest.ini.
"""

LOG_FORMAT = "%(asctime)s,%(msecs)03d %(levelname)-8s [%(filename)s:%(lineno)d] %(message)s"
LOG_DATE_FORMAT = "%Y-%m-%d:%H:%M:%S"

# this config is only used for default log levels,
# log format is set by configure_logging or by pytest.ini
LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "loggers": {
        "docnav": {"level": "INFO"},
        "docnav.bridge": {"level": "INFO"},  # a line per message on DEBUG level
        "backoff": {"level": "WARNING"},
    },
}


def getLogger(name: str = "docnav") -> logging.Logger:
    """Method to get logger for docnav modules.

    Should be used to get correctly initialized logger."""
    return logging.getLogger(name)


def configure_logging(verbose: bool = False):
    logging.basicConfig(
        format=LOG_FORMAT,
        datefmt=LOG_DATE_FORMAT,
        level=logging.DEBUG if verbose else logging.INFO,
    )
    if verbose:
        getLogger().setLevel(logging.DEBUG)


# default logger for the package
log = getLogger()

logging.config.dictConfig(LOGGING)
