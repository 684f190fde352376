# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause

import logging

from .errors import *  # noqa: F401,F403
from .pose_math import *  # noqa: F401,F403
from .volume_store import *  # noqa: F401,F403
from .projector import *  # noqa: F401,F403
from .similarity import *  # noqa: F401,F403
from .image_io import *  # noqa: F401,F403
from .distributions import *  # noqa: F401,F403
from .descent import *  # noqa: F401,F403
from .rtpi import *  # noqa: F401,F403
from .fine_reg import *  # noqa: F401,F403
from .pipeline import *  # noqa: F401,F403
from .harness import *  # noqa: F401,F403
from . import nn  # noqa: F401
from .drreg_version import __version__  # noqa: F401


logger = logging.getLogger("drreg")
logger.addHandler(logging.NullHandler())
