#!/usr/bin/env python

# SPDX-FileCopyrightText: © 2020 Open Networking Foundation <support@opennetworking.org>
# SPDX-License-Identifier: Apache-2.0

from __future__ import absolute_import

from setuptools import setup


def version():
    with open("VERSION") as f:
        return f.read().strip()


def parse_requirements(filename):
    # parse a requirements.txt file, allowing for blank lines and comments
    requirements = []
    for line in open(filename):
        line = line.strip()
        if line and not line.startswith("#"):
            requirements.append(line)
    return requirements


setup(
    name="ealstm",
    version=version(),
    description="Evolutionary attention-based LSTM for multivariate time series forecasting",
    author="Open Networking Foundation and Partners",
    author_email="support@opennetworking.org",
    packages=["ealstm"],
    package_data={"ealstm": ["py.typed"]},
    include_package_data=True,
    license="Apache v2",
    install_requires=parse_requirements("requirements.txt"),
    extras_require={
        "test": ["pytest>=6.2", "pytest-aiohttp>=0.3", "pytest-asyncio>=0.15"],
        "docs": ["sphinx", "sphinx-autodoc-typehints", "sphinxcontrib-openapi", "furo"],
    },
    entry_points={"console_scripts": ["ealstm = ealstm.cli:main"]},
    classifiers=[
        "License :: OSI Approved :: Apache Software License",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "Typing :: Typed",
    ],
)
