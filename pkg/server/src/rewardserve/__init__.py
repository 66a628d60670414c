"""Reference reward-scoring server speaking the reward wire protocol."""

from .models import ClassifierModel, FormulaModel, ModelError, build_model
from .server import create_server, make_handler, serve

__version__ = "0.1.0"

__all__ = [
    "ClassifierModel",
    "FormulaModel",
    "ModelError",
    "build_model",
    "create_server",
    "make_handler",
    "serve",
    "__version__",
]
