from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension("pointgat._speedups", ["src/pointgat/_speedups.pyx"]),
]

setup(ext_modules=cythonize(extensions, language_level="3"))
