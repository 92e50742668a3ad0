"""Text-conditioned joint-embedding predictive pretraining on numpy.

``TCJEPA_THREADS`` caps BLAS/OpenMP/numba worker threads; it only takes effect
when set before numpy is first imported, which importing this package first
guarantees.
"""

import os as _os

_threads = _os.environ.get("TCJEPA_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from ._kernels import backend_name, use_numba  # noqa: E402
from .train import TrainConfig, Trainer, TrainState, load_checkpoint, save_checkpoint  # noqa: E402

__all__ = ["TrainConfig", "TrainState", "Trainer", "backend_name", "load_checkpoint",
           "save_checkpoint", "use_numba"]
__version__ = "0.1.0"
