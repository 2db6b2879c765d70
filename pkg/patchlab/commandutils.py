# /*
#  * Copyright © 2026 patchlab contributors.
#  * SPDX-License-Identifier: Apache-2.0
#  */
#

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor

import torch
import yaml
from defaults import Defaults
from errors import ConfigError


class CommandUtils(object):
    @staticmethod
    def _yaml_param(loader, node):
        params = loader.app_params
        default = None
        key = node.value

        if not isinstance(key, str):
            raise ConfigError("param name must be a string")

        if '=' in key:
            key, default = [t.strip() for t in key.split('=', maxsplit=1)]

            if key in params:
                value = params[key]
            else:
                value = yaml.safe_load(default)
        else:
            if key not in params:
                raise ConfigError(f"no param set for '{key}', and there is no default")
            value = params[key]

        return value

    @staticmethod
    def readConfig(stream, params={}):
        config = None

        class ParamLoader(yaml.SafeLoader):
            def __init__(self, stream):
                super().__init__(stream)
                self.app_params = params

        ParamLoader.add_constructor("!param", CommandUtils._yaml_param)
        try:
            config = yaml.load(stream, Loader=ParamLoader)
        except yaml.YAMLError as e:
            raise ConfigError(f"malformed config: {e}".replace("\n", " "))

        return config if config is not None else {}

    @staticmethod
    def read_config_file(path, params={}):
        if not os.path.isfile(path):
            raise ConfigError(f"config file '{path}' does not exist")
        with open(path, "rt") as f:
            config = CommandUtils.readConfig(f, params=params)
        if not isinstance(config, dict):
            raise ConfigError(f"config file '{path}' must hold a mapping")
        return config

    @staticmethod
    def parse_params(param_list):
        params = {}
        for p in param_list:
            if '=' not in p:
                raise ConfigError(f"param '{p}' must have the form key=value")
            k, v = p.split('=', maxsplit=1)
            params[k] = yaml.safe_load(v)
        return params

    @staticmethod
    def check_known_keys(config, known_keys, what):
        unknown_keys = set(config.keys()) - set(known_keys)
        if len(unknown_keys) > 0:
            raise ConfigError(f"Unknown {what} keys: " + ", ".join(sorted(unknown_keys)))

    @staticmethod
    def digest_of(obj):
        """sha256 over the canonical JSON rendering of a plain-data object"""
        canonical = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @staticmethod
    def digest_of_bytes(data):
        return hashlib.sha256(data).hexdigest()

    @staticmethod
    def thread_count():
        raw = os.environ.get(Defaults.THREADS_ENV, "1")
        try:
            count = int(raw)
        except ValueError:
            raise ConfigError(f"{Defaults.THREADS_ENV} must be an integer, got '{raw}'")
        if count < 1:
            raise ConfigError(f"{Defaults.THREADS_ENV} must be >= 1, got {count}")
        return count

    @staticmethod
    def ordered_map(fn, items, threads=None):
        """map() over a thread pool; results come back in input order"""
        items = list(items)
        threads = CommandUtils.thread_count() if threads is None else threads
        if threads <= 1 or len(items) <= 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))

    @staticmethod
    def configure_torch():
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(CommandUtils.thread_count())
