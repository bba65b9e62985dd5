"""MSAFE: multiscale sensor selection and kernel estimation for historical
functional linear models.

Submodules
----------
ppoly      piecewise-polynomial arithmetic and exact quadrature
basis      multiscale and spline basis construction
assembly   design-block assembly, truncation, sparsification, penalties
grouplasso adaptive group-LASSO solver
fastpath   compiled warm-started lambda-path engine
pipeline   multistage selection, ridge estimation, cross-validation
simulate   correlated-noise simulation study
io         dataset/config serialization and run manifests
cli        command-line entry points
"""

from . import assembly, basis, grouplasso, io, pipeline, ppoly, simulate
from .assembly import Dataset, DesignBlock, assemble_all, sparsify
from .basis import BasisSet, build_multiscale_basis, build_spline_basis
from .grouplasso import GroupProblem, solve, solve_path
from .pipeline import CvGrid, ModelConfig, run_full, select_sensors
from .simulate import run_sim

__version__ = "0.1.0"
