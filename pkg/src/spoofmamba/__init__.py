"""Spectro-temporal bidirectional Mamba countermeasure for speech deepfake detection."""

import os

# Deterministic mode pins BLAS to one thread so reductions keep a fixed order.
# This only takes effect when spoofmamba is imported before numpy.
if os.environ.get("SPOOFMAMBA_DETERMINISTIC", "0") not in ("", "0"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
