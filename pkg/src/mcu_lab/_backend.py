"""Select the compiled kernels when they import, else the numpy twin.

Set ``MCU_LAB_BACKEND=python`` to force the fallback.
"""

import os

from . import _kernels_py as python_kernels

compiled_kernels = None
if os.environ.get("MCU_LAB_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as compiled_kernels
    except ImportError:  # extension not built
        compiled_kernels = None

kernels = compiled_kernels if compiled_kernels is not None else python_kernels
BACKEND = "compiled" if compiled_kernels is not None else "python"
