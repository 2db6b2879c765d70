# /*
# * Copyright © 2026 patchlab contributors.
# * SPDX-License-Identifier: Apache-2.0
# */

import commons
from sweeps import run_pair_generalization

stage_order = commons.GENERALIZE
enabled = True


def execute(lab):
    report = run_pair_generalization(lab.subject, lab.fixture_pairs, lab.state["layer"], lab.state["heads"],
                                     trials=commons.trials(lab, "generalize", 1),
                                     good_fmt=commons.GOOD_FORMAT, bad_fmt=commons.BAD_FORMAT)
    lab.emit(report, "generalize")
    lab.logger.info(f"generalization: {report.metadata['repaired_pairs']}/{report.metadata['manifesting_pairs']}"
                    " manifesting pairs repaired")
