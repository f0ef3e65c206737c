"""Worker-thread control.

All heavy contractions run in the BLAS pool; `set_threads(1)` pins it
for bit-reproducible runs. The `UQSR_THREADS` environment variable is
the fallback used when the CLI gets no --threads flag.
"""

import os

import threadpoolctl

_controller = threadpoolctl.ThreadpoolController()
_threads = None


def set_threads(n: int):
    global _threads
    n = int(n)
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    _controller.limit(limits=n, user_api="blas")
    _threads = n


def get_threads():
    return _threads


def default_threads():
    env = os.environ.get("UQSR_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1
