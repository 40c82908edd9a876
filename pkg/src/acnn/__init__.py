"""Attentive CNN for binary arousal/valence classification from speech."""

from .errors import AcnnError
from .frontend import FrontendConfig, logmel
from .model import HyperParams, preset

__all__ = ["AcnnError", "FrontendConfig", "HyperParams", "logmel", "preset"]
__version__ = "0.1.0"
