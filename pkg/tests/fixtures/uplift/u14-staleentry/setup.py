from setuptools import setup

setup(name="gridtool", version="1.2")
