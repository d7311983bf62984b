import re
import numbers
import logging
from typing import Optional

from exceptions import ParameterError

logger = logging.getLogger(__name__)

# Run names become file stems under the output directory.
RUN_NAME_PATTERN = re.compile(r"[a-zA-Z0-9_\-][a-zA-Z0-9_.\-]*")
RUN_NAME_MAX_LENGTH = 64

def sanitize_run_name(name: str, max_length: int = RUN_NAME_MAX_LENGTH) -> Optional[str]:
    """
    Return `name` if it is safe as an output file stem, else None.
    Allows alphanumeric, hyphen, underscore, and dot; no leading dot and no
    path separators. An empty name passes through as "".
    """
    if not name:
        return ""

    if len(name) > max_length:
        logger.warning("Run name rejected: too long",
                       extra={"run_name": name[:30], "length": len(name), "max_length": max_length})
        return None

    if not RUN_NAME_PATTERN.fullmatch(name):
        logger.warning("Run name rejected: invalid characters", extra={"run_name": name[:30]})
        return None

    return name

def check_index(value: int, upper: int, context: str) -> int:
    """Require 0 <= value < upper, raising ParameterError otherwise."""
    if not isinstance(value, numbers.Integral) or isinstance(value, bool) or not 0 <= value < upper:
        raise ParameterError(
            f"{context} index {value!r} out of range [0, {upper})",
            {"context": context, "value": value, "upper": upper},
        )
    return value

def check_count(value: int, minimum: int, context: str) -> int:
    if not isinstance(value, numbers.Integral) or isinstance(value, bool) or value < minimum:
        raise ParameterError(
            f"{context} must be an integer >= {minimum}, got {value!r}",
            {"context": context, "value": value, "minimum": minimum},
        )
    return value
