#!/usr/bin/env python3

#
# Copyright © 2026 patchlab contributors.
# SPDX-License-Identifier: Apache-2.0
#

import os
from subprocess import PIPE, STDOUT, Popen, call

__all__ = ('get_patchlab_version')

# used when git is not available, e.g. when building from an sdist
defaultTag = "0.1.0"


def _git(*args):
    p = Popen(['git', *args], stdout=PIPE, stderr=PIPE)
    p.stderr.close()
    return [line.decode().strip() for line in p.stdout.readlines()]


def get_version():
    try:
        return _git('rev-parse', '--short', 'HEAD')[0]
    except Exception:
        raise ValueError('Cannot get the commit hash!')


def get_latest_tag():
    try:
        return _git('describe', '--tags', '--abbrev=0')[0].lstrip('v')
    except Exception:
        return defaultTag


def is_dirty():
    try:
        return len(_git('diff-index', '--name-only', 'HEAD')) > 0
    except Exception:
        return False


def get_patchlab_version():
    try:
        if call(['git', 'rev-parse', '--git-dir'], stderr=STDOUT, stdout=open(os.devnull, 'w')):
            return defaultTag
    except FileNotFoundError:
        return defaultTag

    version = f"{get_latest_tag()}+g{get_version()}"
    if is_dirty():
        version += '.dirty'
    return version


if __name__ == '__main__':
    print(get_patchlab_version())
