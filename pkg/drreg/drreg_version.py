# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause
import operator
from typing import Any, Callable

try:
    from .version import _version_str
except ImportError:
    # source checkout without tools/gen_drreg_version.py having run
    _version_str = "0.0.0+gitUnknown"

__all__ = ["DrregVersion", "release_of"]


def release_of(text: Any):
    """packaging's Version for `text` with the local `+git...` part dropped.

    packaging is imported on first comparison, not at package import.
    """
    from packaging.version import Version  # type: ignore[import]

    if isinstance(text, Version):
        return Version(text.public)
    return Version(str(text).split("+")[0])


class DrregVersion(str):
    """The version string; comparisons go by release and ignore the build hash."""

    @property
    def base(self) -> str:
        return self.split("+")[0]

    def _compare(self, other: Any, op: Callable[[Any, Any], bool]) -> bool:
        return op(release_of(self), release_of(other))

    def __eq__(self, other: Any) -> bool:
        return self._compare(other, operator.eq)

    def __ne__(self, other: Any) -> bool:
        return self._compare(other, operator.ne)

    def __lt__(self, other: Any) -> bool:
        return self._compare(other, operator.lt)

    def __le__(self, other: Any) -> bool:
        return self._compare(other, operator.le)

    def __gt__(self, other: Any) -> bool:
        return self._compare(other, operator.gt)

    def __ge__(self, other: Any) -> bool:
        return self._compare(other, operator.ge)

    # overriding __eq__ drops the inherited hash
    __hash__ = str.__hash__


__version__ = DrregVersion(_version_str)
