#!/usr/bin/env python
"""Setup script for facade-em."""

from setuptools import setup

if __name__ == "__main__":
    setup()
