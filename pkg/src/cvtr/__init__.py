"""cvtr: curvature-regularized fast adversarial training at desk scale.

Library layout:

* :mod:`cvtr.autodiff` - reverse-mode AD engine with double backprop
* :mod:`cvtr.data` - MNIST/CIFAR-10 binary parsers, synthetic sets, batching
* :mod:`cvtr.models` - MNIST CNN and small ResNets, checkpoint format
* :mod:`cvtr.attacks` - FGSM, PGD (linf/l2), DeepFool-l2, C&W-l2, transfer
* :mod:`cvtr.training` - vanilla / adversarial / curvature-regularized trainers
* :mod:`cvtr.metrics` - robustness and loss-geometry measurements
* :mod:`cvtr.cli` - train / eval / profile / transfer / attack commands
"""

import os as _os

# BLAS worker pools spin-wait and fight the compiled-kernel thread pool for
# cores, which slows every array op several-fold on small machines. Our GEMMs
# are small, so single-threaded BLAS is the right default; CVTR_BLAS_THREADS
# overrides it.
_blas = _os.environ.get("CVTR_BLAS_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "VECLIB_MAXIMUM_THREADS", "BLIS_NUM_THREADS"):
    _os.environ.setdefault(_var, _blas)
# the omp layer is present everywhere we build; tbb emits a version warning
_os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

try:  # if numpy is already loaded the env vars came too late; fix at runtime
    from threadpoolctl import ThreadpoolController as _TC
    _TC().limit(limits=int(_blas), user_api="blas")
except Exception:  # pragma: no cover - threadpoolctl is optional
    pass

__version__ = "0.1.0"
