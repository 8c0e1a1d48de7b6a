# Pin BLAS to one thread before numpy loads: the acceptance suite's timing
# contract assumes a single CPU thread, and single-threaded reductions keep
# training runs bitwise reproducible.
import os

for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(var, "1")
