"""Expression-classifier adapter speaking fer-oracle/1 over stdio.

The package wraps an arbitrary six-class facial-expression model behind a
newline-delimited JSON protocol so that analysis tooling can drive it as a
black-box subprocess, and ships a small landmark extractor that writes
68-point CSV files for high-contrast face crops.
"""

from fer_adapter.backends import AdapterError, StubBackend, TorchScriptBackend
from fer_adapter.protocol import CLASSES, PROTOCOL, serve

__all__ = [
    "AdapterError",
    "CLASSES",
    "PROTOCOL",
    "StubBackend",
    "TorchScriptBackend",
    "serve",
]

__version__ = "0.1.0"
