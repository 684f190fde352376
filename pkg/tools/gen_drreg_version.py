# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause
import os
import subprocess
from pathlib import Path

UNKNOWN = "Unknown"
drreg_root = Path(__file__).parent.parent


def get_sha() -> str:
    try:
        return (
            subprocess.check_output(["git", "rev-parse", "HEAD"], cwd=drreg_root)
            .decode("ascii")
            .strip()
        )
    except Exception:
        # assume $DRREG_VERSION is in sha form
        if drreg_version := os.environ.get("DRREG_VERSION"):
            assert len(drreg_version) < 11, "DRREG_VERSION should be in sha form"
            return drreg_version
        return UNKNOWN


def get_version() -> str:
    sha = get_sha()
    with open(drreg_root / "version.txt", "r") as f:
        return f.read().strip() + "+git" + sha[:7]


def write_version_file() -> Path:
    version_file = drreg_root / "drreg" / "version.py"
    with open(version_file, "w") as f:
        f.write("_version_str = '{}'\n".format(get_version()))
    return version_file


if __name__ == "__main__":
    write_version_file()
