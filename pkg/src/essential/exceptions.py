"""Error taxonomy shared by the library and the CLI.

Exit-code mapping lives in the CLI: ConfigError -> 1, DataError and
FormatError -> 2, TrainingError -> 3. Plain ValueError / RuntimeError are
used for operation-level input and state violations.
"""


class ConfigError(Exception):
    """Invalid or unusable configuration (bad key, bad value, missing file)."""


class DataError(Exception):
    """Dataset cannot satisfy a request (missing class, too few samples)."""


class FormatError(DataError):
    """An on-disk artifact does not match its expected layout."""


class TrainingError(Exception):
    """A training session failed; partial run artifacts are retained."""
