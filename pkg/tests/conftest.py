# /*
#  * Copyright © 2026 patchlab contributors.
#  * SPDX-License-Identifier: Apache-2.0
#  */

import os
import sys

import pytest

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
PACKAGE_DIR = os.path.join(REPO_ROOT, "patchlab")
sys.path.insert(0, PACKAGE_DIR)
sys.path.insert(0, REPO_ROOT)

from model import forward_trace, init_checkpoint, toy_config  # noqa: E402
from vocab import SyntheticVocab  # noqa: E402

SLOW_ENV = "PATCHLAB_SLOW"


def pytest_configure(config):
    config.addinivalue_line("markers", f"slow: trains a toy model; runs only with {SLOW_ENV}=1")


def pytest_collection_modifyitems(config, items):
    if os.environ.get(SLOW_ENV) == "1":
        return
    skip = pytest.mark.skip(reason=f"set {SLOW_ENV}=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


TINY_SHAPE = dict(n_layers=2, n_heads=4, d_model=16, d_head=4, d_mlp=32, max_seq=24)


@pytest.fixture
def vocab():
    return SyntheticVocab()


@pytest.fixture
def tiny_config(vocab):
    return toy_config(len(vocab), **TINY_SHAPE)


@pytest.fixture
def tiny_ckpt(tiny_config):
    return init_checkpoint(tiny_config, seed=7)


@pytest.fixture
def make_trace(tiny_ckpt, vocab):
    def _make(text, prompt_len=None, keep_head_out=True):
        tokens = vocab.tokenize(text)
        return forward_trace(tiny_ckpt.config, tiny_ckpt, tokens, prompt_len=prompt_len, keep_head_out=keep_head_out)
    return _make


def tiny_run_config(tmp_path, **sections):
    """Run config small enough for reproduce-all to finish in seconds."""
    config = {
        "out_dir": str(tmp_path),
        "seed": 3,
        "model": dict(TINY_SHAPE),
        "train": {"steps": 20, "batch_size": 16, "log_every": 10},
        "task": {"n_pairs": 40, "eval_fraction": 0.25},
        "sae": {"expansion": 2, "k": 4, "steps": 20, "batch_size": 16, "eval_every": 10, "top_n": 4,
                "correlation_traces": 4},
        "sweeps": {
            "layers": {"trials": 2},
            "heads": {"trials": 1},
            "fraction": {"trials": 1, "fractions": [0.0, 0.5, 1.0]},
            "bidirectional": {"trials": 2},
            "alpha": {"trials": 1, "alphas": [0.0, -1.0], "hijacker_size": 2},
            "stats": {"resamples": 200},
        },
    }
    config.update(sections)
    return config
