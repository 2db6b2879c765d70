# /*
# * Copyright © 2026 patchlab contributors.
# * SPDX-License-Identifier: Apache-2.0
# */

import commons
from defaults import Defaults
from sweeps import run_fraction_sweep

stage_order = commons.FRACTION
enabled = True


def execute(lab):
    section = lab.run.sweep_section("fraction")
    trials = commons.trials(lab, "fraction", Defaults.TRIALS)
    grid = section.get('fractions', list(Defaults.FRACTION_GRID))
    for variant in section.get('variants', ["convex"]):
        report = run_fraction_sweep(lab.subject, lab.state["layer"], lab.state["heads"], grid=grid, trials=trials,
                                    variant=variant, source_fmt=commons.GOOD_FORMAT, target_fmt=commons.BAD_FORMAT)
        name = "sweep_fraction" if variant == "convex" else f"sweep_fraction_{variant}"
        lab.emit(report, name)
        if variant == "convex":
            lab.state["threshold_fraction"] = report.metadata["threshold_fraction"]
