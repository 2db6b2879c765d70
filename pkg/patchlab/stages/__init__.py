# /*
# * Copyright © 2026 patchlab contributors.
# * SPDX-License-Identifier: Apache-2.0
# */
