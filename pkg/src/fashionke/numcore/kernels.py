"""Select the LSTM recurrence backend at import time.

The compiled extension is used when it was built; setting
``FASHIONKE_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

from . import _lstm_py

BACKEND = "python"
lstm_forward = _lstm_py.lstm_forward
lstm_backward = _lstm_py.lstm_backward

if os.environ.get("FASHIONKE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _lstm_ext
    except ImportError:  # extension not built
        _lstm_ext = None
    if _lstm_ext is not None:
        BACKEND = "cython"
        lstm_forward = _lstm_ext.lstm_forward
        lstm_backward = _lstm_ext.lstm_backward


def backends():
    """Available ``{name: (forward, backward)}`` pairs, for tests and benchmarks."""
    out = {"python": (_lstm_py.lstm_forward, _lstm_py.lstm_backward)}
    try:
        from . import _lstm_ext as ext
    except ImportError:
        return out
    out["cython"] = (ext.lstm_forward, ext.lstm_backward)
    return out
