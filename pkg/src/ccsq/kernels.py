"""Backend selection for the LSTM recurrence.

The compiled extension is used when it imports; set ``CCSQ_PURE_PYTHON=1``
to force the numpy implementation.
"""
import os

from . import _lstm_py

BACKEND = "python"
if os.environ.get("CCSQ_PURE_PYTHON", "") != "1":
    try:
        from . import _lstm_core as _impl
    except ImportError:  # extension not built
        _impl = _lstm_py
    else:
        BACKEND = "cython"
else:
    _impl = _lstm_py

lstm_forward = _impl.lstm_forward
lstm_backward = _impl.lstm_backward

__all__ = ["BACKEND", "lstm_forward", "lstm_backward", "get_backend"]


def get_backend(name=None):
    """Return ``(lstm_forward, lstm_backward)`` for ``name`` (default: active)."""
    if name is None:
        return lstm_forward, lstm_backward
    if name == "python":
        return _lstm_py.lstm_forward, _lstm_py.lstm_backward
    if name == "cython":
        from . import _lstm_core

        return _lstm_core.lstm_forward, _lstm_core.lstm_backward
    raise ValueError(f"unknown backend {name!r}")
