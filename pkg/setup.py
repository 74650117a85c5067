import os
import platform

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# LLSA_NO_OPENMP=1   build single-threaded
# LLSA_NO_VEC_EXP=1  keep scalar exp() even where glibc's libmvec is available
# LLSA_MARCH=<isa>   -march value (default native; "none" for the compiler baseline)
compile_args = ["-O3", "-funroll-loops", "-fno-math-errno"]
link_args = []
macros = []
libraries = []

if os.environ.get("LLSA_NO_OPENMP"):
    compile_args.append("-fopenmp-simd")
else:
    compile_args.append("-fopenmp")
    link_args.append("-fopenmp")

if (platform.system() == "Linux" and platform.libc_ver()[0] == "glibc"
        and not os.environ.get("LLSA_NO_VEC_EXP")):
    macros.append(("LLSA_VEC_EXP", "1"))
    libraries.append("mvec")

march = os.environ.get("LLSA_MARCH", "native")
if march and march != "none":
    compile_args.append(f"-march={march}")

extensions = [
    Extension(
        "llsa._kernels",
        ["src/llsa/_kernels.pyx"],
        include_dirs=[np.get_include(), "src/llsa"],
        define_macros=macros,
        libraries=libraries,
        extra_compile_args=compile_args,
        extra_link_args=link_args,
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
