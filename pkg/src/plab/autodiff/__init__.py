from . import ops
from .gradcheck import analytic_grad, grad_check, numeric_grad
from .ops import DegenerateVectorError, UnsupportedOpError, forward_op
from .tensor import Graph, NonFiniteError, ShapeError, Tensor, as_tensor, backward, current_graph

__all__ = [
    "DegenerateVectorError",
    "Graph",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "UnsupportedOpError",
    "analytic_grad",
    "as_tensor",
    "backward",
    "current_graph",
    "forward_op",
    "grad_check",
    "numeric_grad",
    "ops",
]
