# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause
# Extra flags, stripped from sys.argv before setuptools sees them:
#
#   -version-tag=TAG            appended to the release number as drreg-X.Y.Z.TAG
#                               (drops the local +git part); used for dated builds
#   -install_requires=A[,B...]  pins added on top of requirements.txt
#   -wheel-name=NAME            distribution name, default drreg
#

import shutil
import sys
from pathlib import Path

import setuptools
import setuptools.command.build_py
from setuptools import setup

ROOT = Path(__file__).resolve().parent


def _take_flags(argv):
    flags = {"-version-tag": None, "-install_requires": "", "-wheel-name": "drreg"}
    rest = []
    for arg in argv:
        name, sep, value = arg.partition("=")
        if sep and name in flags:
            flags[name] = value
        else:
            rest.append(arg)
    return flags, rest


FLAGS, sys.argv = _take_flags(sys.argv)
VERSION_TAG = FLAGS["-version-tag"]
WHEEL_NAME = FLAGS["-wheel-name"]
INSTALL_REQUIRES = [p for p in FLAGS["-install_requires"].split(",") if p]


class clean(setuptools.Command):
    """Removes everything .gitignore lists (build trees, run dirs, version.py)."""

    user_options = []

    def initialize_options(self):
        pass

    def finalize_options(self):
        pass

    def run(self):
        patterns = (ROOT / ".gitignore").read_text().splitlines()
        for pattern in patterns:
            pattern = pattern.strip()
            if not pattern or pattern.startswith("#"):
                continue
            for path in ROOT.glob(pattern.rstrip("/")):
                print("removing:", path.relative_to(ROOT))
                if path.is_dir():
                    shutil.rmtree(path, ignore_errors=True)
                else:
                    path.unlink(missing_ok=True)


class build_py(setuptools.command.build_py.build_py):
    def run(self):
        # drreg/version.py carries the git sha of the build
        from tools.gen_drreg_version import write_version_file

        write_version_file()
        super().run()


def version_tag():
    from tools.gen_drreg_version import get_version

    version = get_version()
    if VERSION_TAG is not None:
        release = version.split("+")[0]
        version = f"{release}.{VERSION_TAG}" if VERSION_TAG else release
    return version


def requirements():
    lines = (ROOT / "requirements.txt").read_text().splitlines()
    return [s for s in (line.split("#")[0].strip() for line in lines) if s]


def main():
    setup(
        name=WHEEL_NAME,
        version=version_tag(),
        description="Two-stage 2D/3D rigid registration of X-ray images to CT volumes",
        packages=["drreg", "drreg.nn"],
        python_requires=">=3.9",
        cmdclass={
            "build_py": build_py,
            "clean": clean,
        },
        entry_points={"console_scripts": ["drreg=drreg.cli:main"]},
        install_requires=requirements() + INSTALL_REQUIRES,
        extras_require={
            "test": ["pytest", "pytest-benchmark"],
            "plot": ["matplotlib"],
        },
        license="BSD-3-Clause",
    )


if __name__ == "__main__":
    main()
