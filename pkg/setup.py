#
# Copyright © 2026 patchlab contributors.
# SPDX-License-Identifier: Apache-2.0
#

import os

from setuptools import setup

from version import get_patchlab_version

here = os.path.abspath(os.path.dirname(__file__))

with open(os.path.join(here, "requirements.txt")) as requirements_txt:
    REQUIRES = requirements_txt.read().splitlines()

setup(
    name='patchlab',
    description='Activation patching lab for a toy transformer with a planted format bug',
    packages=['patchlab', 'patchlab.stages'],
    install_requires=REQUIRES,
    extras_require={'test': ['pytest']},
    include_package_data=True,
    zip_safe=False,
    python_requires='>=3.9',
    entry_points={
        'console_scripts': [
            'patchlab = patchlab.cli:main',
        ]
    },
    version=get_patchlab_version(),
)
