"""Masked video autoencoder with a region-decomposed encoder, in plain numpy."""
import os

# Thread count must be fixed before numpy loads its BLAS.
_threads = os.environ.get("MOTIONMAE_NUM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
