"""Hot-loop kernels with a compiled core and a numpy fallback.

The compiled extension is used when it imports cleanly, unless the environment
variable ``SPOOFMAMBA_PURE_PYTHON=1`` is set.  Both backends expose the same
functions; :func:`get_backend` returns either module explicitly (used by tests
and the benchmark).
"""

import os

from . import _fallback

try:
    from . import _core as _compiled
except ImportError:  # extension not built
    _compiled = None

_force_python = os.environ.get("SPOOFMAMBA_PURE_PYTHON", "0") not in ("", "0")

if _compiled is not None and not _force_python:
    _active = _compiled
    BACKEND = "compiled"
else:
    _active = _fallback
    BACKEND = "python"

scan_forward = _active.scan_forward
scan_forward_chunked = _active.scan_forward_chunked
scan_backward = _active.scan_backward
abs_maxpool = _active.abs_maxpool
abs_maxpool_backward = _active.abs_maxpool_backward
channel_moments = _active.channel_moments
affine_selu_maxpool = _active.affine_selu_maxpool
affine_selu_maxpool_backward = _active.affine_selu_maxpool_backward
bn_input_grad = _active.bn_input_grad


def compiled_available() -> bool:
    return _compiled is not None


def get_backend(name: str):
    if name == "python":
        return _fallback
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")
