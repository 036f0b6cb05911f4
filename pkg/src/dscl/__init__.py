"""Deformed sparse random matrices: deterministic spectral laws and Monte Carlo checks."""
__version__ = "0.1.0"

from . import measure, dsclaw, ensemble, verify  # noqa: E402

__all__ = ["measure", "dsclaw", "ensemble", "verify", "__version__"]
