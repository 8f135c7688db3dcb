"""AdvCheck: local-gradient based adversarial example detection (desk scale)."""

from . import attacks, dataio, detector, evalkit, netcore

__all__ = ["attacks", "dataio", "detector", "evalkit", "netcore"]
__version__ = "0.1.0"
