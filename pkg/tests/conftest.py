import os
import sys

# Single-threaded BLAS before numpy loads anywhere (spinning BLAS pools fight
# the compiled kernels for cores); cvtr enforces this at import as well.
os.environ.setdefault("OPENBLAS_NUM_THREADS",
                      os.environ.get("CVTR_BLAS_THREADS", "1"))

sys.path.insert(0, os.path.dirname(__file__))
