"""Hot-loop kernels with a compiled core and a pure-Python fallback.

The backend is selected once at import time. Set ``BINOMARK_BACKEND`` to
``fast``, ``pure``, or ``auto`` (default) to override; ``auto`` prefers the
compiled extension and silently falls back to the pure implementation when
the extension is not built. Both backends produce bit-identical results.
"""

from __future__ import annotations

import os

from . import pure

_BACKENDS = {"pure": pure}
try:
    from . import _fast  # type: ignore[attr-defined]

    _BACKENDS["fast"] = _fast
except ImportError:  # extension not built
    _fast = None

_requested = os.environ.get("BINOMARK_BACKEND", "auto").lower()
if _requested == "auto":
    _active = _BACKENDS.get("fast", pure)
elif _requested in _BACKENDS:
    _active = _BACKENDS[_requested]
else:
    raise ImportError(
        f"BINOMARK_BACKEND={_requested!r} is not available; "
        f"choose one of: auto, {', '.join(sorted(_BACKENDS))}"
    )

score_bits = _active.score_bits
token_bits = _active.token_bits
score_bit = _active.score_bit
fused_scores = _active.fused_scores
mc_score_table = _active.mc_score_table
softppl_objective = _active.softppl_objective
softppl_bisect = _active.softppl_bisect


def active_backend() -> str:
    """Name of the backend selected at import time."""
    return _active.NAME


def available_backends() -> dict:
    """All importable backend modules, keyed by name."""
    return dict(_BACKENDS)
