"""Test-session setup: pin BLAS threading before numpy loads.

Single-threaded BLAS is faster for this package's small matmuls and keeps
worker processes from oversubscribing the machine during the benchmark.
"""

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
