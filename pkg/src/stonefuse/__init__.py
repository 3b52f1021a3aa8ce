from .errors import StonefuseError

__version__ = "0.1.0"
__all__ = ["StonefuseError", "__version__"]
