# /*
# * Copyright © 2026 patchlab contributors.
# * SPDX-License-Identifier: Apache-2.0
# */

import commons
from defaults import Defaults
from sweeps import run_bidirectional

stage_order = commons.BIDIRECTIONAL
enabled = True


def execute(lab):
    report = run_bidirectional(lab.subject, lab.state["layer"], lab.state["heads"],
                               trials=commons.trials(lab, "bidirectional", Defaults.TRIALS),
                               good_fmt=commons.GOOD_FORMAT, bad_fmt=commons.BAD_FORMAT)
    lab.emit(report, "bidirectional")
