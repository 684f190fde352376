# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause
from .core import *  # noqa: F401,F403
from .normalization import *  # noqa: F401,F403
