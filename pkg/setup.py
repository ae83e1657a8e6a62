import os

from setuptools import Extension, setup

import numpy as np

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

# The compiled propagator kernel is optional: the package falls back to the
# pure-numpy implementation whenever the extension is absent or fails to
# build, so a missing compiler must never block installation.
ext_modules = []
pyx = os.path.join("src", "liesteer", "_prop_cy.pyx")
if cythonize is not None and os.path.exists(pyx):
    ext = Extension(
        "liesteer._prop_cy",
        [pyx],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    ext_modules = cythonize([ext], language_level=3)

setup(ext_modules=ext_modules)
