#!/usr/bin/env python

from setuptools import setup, find_packages

setup(
    name="tswitch",
    version="1.0",
    description="Task vector switches: pulse discard, binarized task switches and routed merging",
    packages=find_packages(exclude=["tests"]),  # Automatically discovers all packages
    package_data={"tswitch": ["configs/*.json"]},
    python_requires=">=3.8",
    install_requires=[
        "numpy",
        "torch",
        "tqdm",
        "termcolor",
        "matplotlib",
    ],
    extras_require={"test": ["pytest"]},
    entry_points={"console_scripts": ["tsw = tswitch.scripts.tsw:main"]},
)
