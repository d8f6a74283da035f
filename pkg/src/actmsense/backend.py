"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
implementation is used. Set ``ACTMSENSE_BACKEND=python`` to force the
fallback.
"""

from __future__ import annotations

import os

from . import _pykernels

python = _pykernels
compiled = None

try:  # pragma: no cover - depends on the build
    from . import _ckernels as compiled  # type: ignore[no-redef]
except ImportError:
    compiled = None

if os.environ.get("ACTMSENSE_BACKEND", "").lower() == "python" or compiled is None:
    impl = python
else:
    impl = compiled


def available() -> dict:
    out = {"python": python}
    if compiled is not None:
        out["compiled"] = compiled
    return out


def use(name: str) -> None:
    """Switch the active backend (``'python'`` or ``'compiled'``)."""
    global impl
    mods = available()
    if name not in mods:
        raise ValueError(f"backend {name!r} not available (have {sorted(mods)})")
    impl = mods[name]


def active() -> str:
    return impl.NAME
