"""Deep unrolling reconstruction networks with momentum acceleration.

Implements learned proximal gradient descent (LPGD, plus a shared-weight
variant LPGDSW) and learned primal-dual (LPD) reconstruction networks for a
nonlinear windowed-quadratic deconvolution problem, each optionally
accelerated by an explicit momentum term (MA) or a learned recurrent
momentum module (RMA, an LSTM over the gradient history).
"""

import os

# Training determinism requires a fixed reduction order inside BLAS; pin the
# thread pools before numpy loads unless the caller chose otherwise.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
del _var

__version__ = "0.1.0"
