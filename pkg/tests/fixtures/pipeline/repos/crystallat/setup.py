from setuptools import setup

setup(name="crystallat", version="2.1", py_modules=["crystallat"])
