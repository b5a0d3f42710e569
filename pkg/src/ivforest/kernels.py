"""Facade selecting the kernel backend at import time (see `backend`)."""

from __future__ import annotations

from . import backend

if backend.numba_enabled():
    from . import _kernels_nb as _impl
else:
    from . import _kernels_np as _impl

BACKEND = backend.backend_name()

splitmix64 = _impl.splitmix64
grow_tree = _impl.grow_tree
apply_tree = _impl.apply_tree
predict_pass1 = _impl.predict_pass1
predict_pass2 = _impl.predict_pass2
policy_search_depth2 = _impl.policy_search_depth2
