"""rheoflow: three-field FEM for implicitly constituted incompressible flow."""

__version__ = "0.1.0"

from .mesh import TriMesh, unit_square_mesh, barycentric_refine, mesh_metrics
from .fespace import FunctionSpace, DiscreteField, build_space, interpolate
from .constitutive import (Newtonian, Carreau, BinghamPapanastasiou,
                           ActivatedEulerNS)
from .forms import (DirichletBC, FormParams, ThreeFieldProblem,
                    ThreeFieldState, select_b_variant, trilinear_b)
from .solver import NewtonOptions, newton_solve, continuation_solve
from .timestepper import TimeGrid, l2_div_project, march
