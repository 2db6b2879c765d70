# /*
# * Copyright © 2026 patchlab contributors.
# * SPDX-License-Identifier: Apache-2.0
# */

import commons
from pipeline import train_checkpoint

stage_order = commons.TRAIN
enabled = True

CHECKPOINT_NAME = "toy.ckpt"
TRAIN_LOG_NAME = "train_log.yaml"


def execute(lab):
    lab.task = lab.run.task_spec()
    lab.train_pairs, lab.eval_pairs = lab.task.split()

    given = lab.run['checkpoint']
    if given:
        lab.run.require_file(given, "checkpoint")
        lab.logger.info(f"using existing checkpoint {given}")
        lab.use_checkpoint(given)
        return

    train_checkpoint(lab.run, lab.vocab, lab.path(CHECKPOINT_NAME), lab.path(TRAIN_LOG_NAME))
    lab.add_artifact(CHECKPOINT_NAME)
    lab.add_artifact(TRAIN_LOG_NAME)
    lab.use_checkpoint(lab.path(CHECKPOINT_NAME))
