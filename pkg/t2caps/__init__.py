# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""Top-2 classification benchmark for CNNs, FC capsule nets and PS capsule nets."""

__title__ = "t2caps"
__version__ = "0.1.0a1"
__author__ = "t2caps developers"
__license__ = "MPL 2.0"
__copyright__ = "Copyright 2026 t2caps developers"
