# /*
#  * Copyright © 2026 patchlab contributors.
#  * SPDX-License-Identifier: Apache-2.0
#  */

import os
from importlib.metadata import PackageNotFoundError, version

from bugforge import TaskSpec, TrainConfig
from checkpoint import load_checkpoint, load_checkpoint_vocab
from commandutils import CommandUtils
from defaults import Defaults
from errors import ConfigError
from logger import LOG_FILE
from model import toy_config
from sae import SaeConfig
from statsreport import emit_report
from vocab import SyntheticVocab


def tool_version():
    try:
        return version("patchlab")
    except PackageNotFoundError:
        return "0.0.0+source"


class RunConfig(object):
    """
    Effective configuration of one invocation: the YAML file given with
    -c/--config, `!param` values from -m/--param, then command-line flags.
    """
    known_keys = {
        'checkpoint', 'out_dir', 'seed', 'log_level', 'log_path',
        'model', 'train', 'task', 'sae', 'sweeps', 'report_formats',
    }
    section_keys = ('model', 'train', 'task', 'sae', 'sweeps')
    sae_analysis_keys = ('top_n', 'correlation_traces')
    location_keys = ('out_dir', 'log_level', 'log_path')

    def __init__(self, config=None):
        config = dict(config or {})
        CommandUtils.check_known_keys(config, self.known_keys, "run config")
        for section in self.section_keys:
            value = config.get(section) or {}
            if not isinstance(value, dict):
                raise ConfigError(f"config section '{section}' must be a mapping")
            config[section] = value
        config.setdefault('seed', Defaults.SEED)
        config.setdefault('out_dir', ".")
        config.setdefault('log_level', Defaults.LOG_LEVEL)
        config.setdefault('log_path', None)
        config.setdefault('checkpoint', None)
        config.setdefault('report_formats', ["json", "csv", "svg"])
        if not isinstance(config['seed'], int):
            raise ConfigError(f"seed must be an integer, got {config['seed']!r}")
        self.config = config
        self.params = {}

    @staticmethod
    def from_options(options):
        params = CommandUtils.parse_params(getattr(options, 'params', []) or [])
        config = {}
        if getattr(options, 'config_file', None):
            config = CommandUtils.read_config_file(options.config_file, params=params)
        # flags override file values
        for key in ('seed', 'out_dir', 'log_level', 'log_path', 'checkpoint'):
            value = getattr(options, key, None)
            if value is not None:
                config[key] = value
        run = RunConfig(config)
        run.params = params
        return run

    def __getitem__(self, key):
        return self.config[key]

    @property
    def seed(self):
        return self.config['seed']

    @property
    def out_dir(self):
        return self.config['out_dir']

    @property
    def log_level(self):
        return self.config['log_level']

    def log_location(self):
        """
        (directory, file name) of the run log. The log never lands inside
        out_dir: by default it sits next to it as `<out_dir>.log`, with
        log_path it is `<log_path>/patchlab.log`.
        """
        out_dir = os.path.abspath(self.out_dir)
        if self.config['log_path'] is None:
            return os.path.dirname(out_dir), (os.path.basename(out_dir) or "patchlab") + ".log"
        log_dir = os.path.abspath(self.config['log_path'])
        if os.path.commonpath([log_dir, out_dir]) == out_dir:
            raise ConfigError(f"log_path '{self.config['log_path']}' must lie outside out_dir '{self.out_dir}'")
        return log_dir, LOG_FILE

    @property
    def formats(self):
        return tuple(self.config['report_formats'])

    def section(self, name):
        return self.config[name]

    def effective(self):
        """The merged config minus the keys that only say where output goes."""
        return {k: v for k, v in self.config.items() if k not in self.location_keys}

    def digest(self):
        return CommandUtils.digest_of(self.effective())

    def model_config(self, vocab_size):
        return toy_config(vocab_size, **self.config['model'])

    def train_config(self):
        return TrainConfig.from_dict(self.config['train'], seed=self.seed)

    def task_spec(self):
        return TaskSpec.from_config(self.config['task'], seed=self.seed)

    def sae_config(self, d_in):
        section = dict(self.config['sae'])
        expansion = section.pop('expansion', Defaults.SAE_EXPANSION)
        k = section.pop('k', Defaults.SAE_K)
        for key in self.sae_analysis_keys:
            section.pop(key, None)
        section.setdefault('seed', self.seed)
        unknown = set(section) - SaeConfig.known_keys
        if unknown:
            raise ConfigError("Unknown sae keys: " + ", ".join(sorted(unknown)))
        return SaeConfig.for_width(d_in, expansion=expansion, k=k, **section)

    def sweep_section(self, protocol):
        value = self.config['sweeps'].get(protocol) or {}
        if not isinstance(value, dict):
            raise ConfigError(f"sweeps.{protocol} must be a mapping")
        return value

    def require_file(self, path, what):
        if not path or not os.path.isfile(path):
            raise ConfigError(f"{what} '{path}' does not exist")
        return path

    def load_checkpoint(self, path=None):
        path = self.require_file(path or self.config['checkpoint'], "checkpoint")
        return load_checkpoint(path), vocab_of(path)

    def metadata(self, checkpoint_digest=None, **extra):
        meta = {
            "tool_version": tool_version(),
            "config_digest": self.digest(),
            "checkpoint_digest": checkpoint_digest,
            "seed": self.seed,
            "effective_config": self.effective(),
        }
        meta.update(extra)
        return meta

    def emit(self, report, name, checkpoint_digest=None, out_dir=None, formats=None):
        """Write report under out_dir; metadata already on the report wins over the run's own."""
        report.metadata = {**self.metadata(checkpoint_digest), **(report.metadata or {})}
        formats = self.formats if formats is None else [f for f in formats if f in self.formats]
        return emit_report(report, formats, os.path.join(out_dir or self.out_dir, name))


def vocab_of(checkpoint_path):
    symbols = load_checkpoint_vocab(checkpoint_path)
    return SyntheticVocab.from_list(symbols) if symbols else SyntheticVocab()
