# /*
# * Copyright © 2026 patchlab contributors.
# * SPDX-License-Identifier: Apache-2.0
# */

import commons
from defaults import Defaults
from sweeps import head_candidates, run_head_subset_sweep

stage_order = commons.HEADS
enabled = True


def execute(lab):
    section = lab.run.sweep_section("heads")
    trials = commons.trials(lab, "heads", Defaults.TRIALS)
    layer = lab.state["layer"]
    max_subsets = section.get('max_subsets', Defaults.MAX_SUBSETS)

    reports = {}
    for parity in section.get('parities', ["even", "odd"]):
        candidates = head_candidates(lab.subject.n_heads, parity)
        k_values = section.get('k_values') or list(range(1, len(candidates) + 1))
        report = run_head_subset_sweep(lab.subject, layer, parity, k_values, max_subsets=max_subsets, trials=trials,
                                       seed=lab.seed, source_fmt=commons.GOOD_FORMAT, target_fmt=commons.BAD_FORMAT)
        lab.emit(report, f"sweep_heads_{parity}")
        reports[parity] = report

    # later stages transplant the even heads when all of them together repair the bug
    heads = None
    even = reports.get("even")
    if even is not None and even.points and (even.points[-1].rate() or 0.0) >= Defaults.SUCCESS_LEVEL:
        heads = head_candidates(lab.subject.n_heads, "even")
    lab.state["heads"] = section.get('heads', heads)
    lab.logger.info(f"transplant heads: {'all' if lab.state['heads'] is None else lab.state['heads']}")
