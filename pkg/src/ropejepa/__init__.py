"""Joint-embedding predictive pretraining for rope condition monitoring.

Everything runs on a small NumPy autodiff core (``ropejepa.tensor``); the
model, data generator, training loop, and evaluation tooling live in the
submodules and are tied together by the ``ropejepa`` command line entry point.
"""

__version__ = "0.1.0"
