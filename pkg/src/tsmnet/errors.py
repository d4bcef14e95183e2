"""Error taxonomy used to map failures to CLI exit codes."""


class ConfigError(Exception):
    """Bad configuration file, flag, or option combination."""


class DataError(Exception):
    """Unusable dataset layout or tile contents."""


class NumericError(Exception):
    """Non-finite losses or failed gradient verification."""


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
