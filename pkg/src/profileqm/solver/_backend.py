"""Select the compiled kernel when available, else the pure-Python one.

Set ``PROFILEQM_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernel_py

pure = _kernel_py.dual_active_set
compiled = None

try:
    from ._kernel import dual_active_set as compiled  # type: ignore[no-redef]
except ImportError:  # extension not built
    compiled = None

if compiled is not None and os.environ.get("PROFILEQM_PURE_PYTHON", "") in ("", "0"):
    dual_active_set = compiled
    BACKEND = "compiled"
else:
    dual_active_set = pure
    BACKEND = "python"


def get_kernel(name=None):
    """Kernel by name (``"compiled"`` or ``"python"``); default is the selected one."""
    if name is None:
        return dual_active_set
    if name == "python":
        return pure
    if name == "compiled":
        if compiled is None:
            raise ImportError("compiled kernel is not built")
        return compiled
    raise ValueError(f"unknown kernel {name!r}")
