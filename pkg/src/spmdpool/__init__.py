"""File-coordinated SPMD master/worker process pool.

A master splits ``0:step:maxvalue`` across ``nproc`` background worker
processes, each evaluating the same expression on its slice; completion is
signalled purely through lock files in a shared directory.
"""

__version__ = "0.1.0"
