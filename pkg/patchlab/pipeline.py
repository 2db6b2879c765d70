# /*
#  * Copyright © 2026 patchlab contributors.
#  * SPDX-License-Identifier: Apache-2.0
#  */

import glob
import json
import os
import sys
import time

import yaml
from bugforge import FIXTURE_PAIRS, make_dataset, train_toy
from checkpoint import load_checkpoint, save_checkpoint
from commandutils import CommandUtils
from errors import ConfigError, StageError
from logger import Logger
from runconfig import vocab_of
from vocab import SyntheticVocab

INCOMPLETE_MARKER = ".incomplete"
MANIFEST = "manifest.json"


class Pipeline(object):
    """
    End-to-end reproduction run. Stages live in stages/s_*.py and are
    executed in `stage_order`; each reads and extends the shared state on
    this object and emits its reports through emit().
    """

    def __init__(self, run, logger=None):
        self.run = run
        self.out_dir = run.out_dir
        self.logger = logger or Logger.get_logger(None, run.log_level)
        self.pipeline_path = os.path.dirname(os.path.abspath(__file__))
        self.vocab = SyntheticVocab()
        self.ckpt = None
        self.checkpoint_path = None
        self.task = None
        self.train_pairs = []
        self.eval_pairs = []
        self.fixture_pairs = list(FIXTURE_PAIRS)
        self.subject = None
        self.state = {}
        self.reports = {}
        self.artifacts = []
        self.timings = {}

    @property
    def seed(self):
        return self.run.seed

    @property
    def checkpoint_digest(self):
        return None if self.ckpt is None else self.ckpt.digest

    def path(self, name):
        return os.path.join(self.out_dir, name)

    def emit(self, report, name):
        written = self.run.emit(report, name, self.checkpoint_digest, out_dir=self.out_dir)
        self.reports[name] = report
        self.artifacts += [os.path.basename(p) for p in written]
        return written

    def add_artifact(self, path):
        self.artifacts.append(os.path.basename(path))

    def use_checkpoint(self, path):
        self.ckpt = load_checkpoint(path)
        self.vocab = vocab_of(path)
        self.checkpoint_path = path

    def _check_out_dir(self):
        os.makedirs(self.out_dir, exist_ok=True)
        leftovers = os.listdir(self.out_dir)
        if leftovers:
            raise ConfigError(f"output directory '{self.out_dir}' is not empty: {', '.join(sorted(leftovers)[:5])}")

    def _mark(self, stage):
        with open(self.path(INCOMPLETE_MARKER), "wt") as f:
            f.write(f"stage: {stage}\n")

    def _stages(self):
        sys.path.append(os.path.join(self.pipeline_path, "stages"))
        stages = []
        for mod_path in glob.glob(os.path.join(self.pipeline_path, "stages", "s_*.py")):
            module = os.path.splitext(os.path.basename(mod_path))[0]
            __import__(module)
            mod = sys.modules[module]
            if not getattr(mod, 'enabled', False):
                self.logger.info(f"stage {module} is not enabled")
                continue
            if not hasattr(mod, 'stage_order') or not hasattr(mod, 'execute'):
                self.logger.error(f"Error: stage {module} lacks stage_order or execute")
                continue
            stages.append((mod.stage_order, module, mod))
        return sorted(stages, key=lambda s: (s[0], s[1]))

    def execute(self):
        self._check_out_dir()
        CommandUtils.configure_torch()
        for _, module, mod in self._stages():
            self._mark(module)
            self.logger.info("Executing: " + module)
            started = time.monotonic()
            try:
                mod.execute(self)
            except Exception as e:
                self.logger.error(f"stage {module} failed: {e}")
                raise StageError(f"stage {module} failed: {type(e).__name__}: {e}") from e
            self.timings[module] = time.monotonic() - started
            self.logger.info(f"{module} finished in {self.timings[module]:.1f}s")
        self._write_manifest()
        os.remove(self.path(INCOMPLETE_MARKER))
        return self.artifacts

    def _write_manifest(self):
        entries = []
        for name in sorted(set(self.artifacts)):
            with open(self.path(name), "rb") as f:
                entries.append({"file": name, "sha256": CommandUtils.digest_of_bytes(f.read())})
        manifest = {
            "schema": "patchlab.manifest/1",
            "metadata": self.run.metadata(self.checkpoint_digest),
            "artifacts": entries,
        }
        with open(self.path(MANIFEST), "wt") as f:
            f.write(json.dumps(manifest, sort_keys=True, indent=2, default=str) + "\n")


def train_checkpoint(run, vocab, ckpt_path, log_path=None):
    """Train the toy model the run config describes and save it; returns (checkpoint, task spec)."""
    task = run.task_spec()
    train_pairs, _ = task.split()
    model_config = run.model_config(len(vocab))
    train_config = run.train_config()
    corpus = make_dataset(task, vocab, train_pairs)
    ckpt = train_toy(model_config, corpus, train_config, vocab.end_id)
    ckpt.provenance.extra["task"] = task.to_dict()
    metadata = run.metadata(ckpt.digest)
    save_checkpoint(ckpt, ckpt_path, vocab=vocab, metadata=metadata)

    if log_path is not None:
        log = {
            "metadata": metadata,
            "checkpoint_digest": ckpt.digest,
            "model": model_config.to_dict(),
            "train": train_config.to_dict(),
            "task": task.to_dict(),
            "train_examples": len(corpus),
            "initial_loss": ckpt.provenance.extra["initial_loss"],
            "final_loss": ckpt.provenance.final_loss,
            "loss_curve": ckpt.provenance.extra["loss_curve"],
        }
        with open(log_path, "wt") as f:
            yaml.safe_dump(log, f, sort_keys=True)
    return ckpt, task
