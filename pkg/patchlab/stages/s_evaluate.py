# /*
# * Copyright © 2026 patchlab contributors.
# * SPDX-License-Identifier: Apache-2.0
# */

import commons
from bugforge import evaluate_formats
from sweeps import ModelSubject, trial_pairs

stage_order = commons.EVALUATE
enabled = True


def execute(lab):
    # the bug can only show on pairs where the two label rules disagree
    held_out = commons.disagreeing(lab.eval_pairs) or commons.disagreeing(lab.fixture_pairs)
    evaluation = evaluate_formats(lab.ckpt, lab.vocab, held_out)
    evaluation.metadata = {"pairs": "held-out disagreeing pairs", "n_pairs": len(held_out)}
    lab.emit(evaluation, "formats")

    agreeing = [p for p in lab.eval_pairs if not p.disagrees]
    if agreeing:
        control = evaluate_formats(lab.ckpt, lab.vocab, agreeing)
        control.metadata = {"pairs": "held-out agreeing pairs", "n_pairs": len(agreeing)}
        lab.emit(control, "formats_agreeing")

    lab.subject = ModelSubject(lab.ckpt, lab.vocab, trial_pairs(held_out, lab.fixture_pairs))
    lab.state["evaluation"] = evaluation
