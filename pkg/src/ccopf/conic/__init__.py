"""Self-contained second-order cone programming backend.

Standard embedding: minimize c'x subject to Ax = b and h - Gx in K, where K
is a product of nonnegative-orthant and second-order blocks over the slack
vector.  ``solve`` is the reference interior-point method, ``presolve``
reduces a problem with exact solution and certificate back-mapping, and
``solve_reduced`` chains the two.  Any backend that passes the conformance
suite built on ``random_instance`` may substitute for the reference solver.
"""

from .problem import Cone, ConicError, ConicProblem, Solution
from .solver import DEFAULT_SETTINGS, SolverError, solve
from .presolve import Reduction, presolve, solve_reduced
from .conformance import ReferenceInstance, random_instance

__all__ = [
    "Cone",
    "ConicError",
    "ConicProblem",
    "Solution",
    "SolverError",
    "DEFAULT_SETTINGS",
    "solve",
    "Reduction",
    "presolve",
    "solve_reduced",
    "ReferenceInstance",
    "random_instance",
]
