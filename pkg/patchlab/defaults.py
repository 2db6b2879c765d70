# /*
#  * Copyright © 2026 patchlab contributors.
#  * SPDX-License-Identifier: Apache-2.0
#  */

class Defaults():
    SEED = 42
    LOG_LEVEL = "info"
    THREADS_ENV = "PATCHLAB_THREADS"

    # toy model shape
    N_LAYERS = 8
    N_HEADS = 8
    D_MODEL = 128
    D_MLP = 512
    MAX_SEQ = 24
    NORM_EPS = 1e-5
    ROPE_BASE = 10000.0

    # toy training
    TRAIN_STEPS = 2000
    LEARNING_RATE = 1e-3
    BATCH_SIZE = 64
    ADAM_BETAS = (0.9, 0.98)
    GRAD_CLIP = 1.0
    LOG_EVERY = 100
    INTERCHANGE_BATCH = 32
    INTERCHANGE_WEIGHT = 1.0
    INTERCHANGE_FULL = 0.5

    # synthetic task
    N_PAIRS = 2000
    EVAL_FRACTION = 0.2
    MAX_NEW_TOKENS = 8
    FIXTURE_PAIRS = (("9.8", "9.11"), ("8.7", "8.12"), ("7.85", "7.9"), ("3.4", "3.25"), ("10.9", "10.11"))

    # sweeps
    TRIALS = 50
    ALPHA_TRIALS = 20
    MAX_SUBSETS = 12870
    FRACTION_GRID = tuple(round(0.1 * i, 10) for i in range(11))
    ALPHA_GRID = tuple(-0.25 * i for i in range(21))
    HIJACKER_SIZE = 8
    SUCCESS_LEVEL = 0.5

    # sae
    SAE_EXPANSION = 8
    SAE_K = 8
    SAE_STEPS = 2000
    SAE_LEARNING_RATE = 1e-3
    SAE_BATCH_SIZE = 256
    SAE_EVAL_EVERY = 100
    SAE_DEAD_AFTER = 10
    TOP_N_FEATURES = 20

    # statistics
    CONFIDENCE_LEVEL = 0.95
    BOOTSTRAP_RESAMPLES = 10000
    KL_FLOOR = 1e-12
