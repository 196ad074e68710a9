"""JSON files for problems, MPC setups and solutions."""

from __future__ import annotations

import json
import math
import sys

import numpy as np

from ..model import CoupledQP
from ..mpc import NetworkSystem, Terminal


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _clean(o):
    # JSON has no infinities; encode them as strings like the model does
    if isinstance(o, float) and not math.isfinite(o):
        return repr(o)
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    return o


def dumps(obj):
    return json.dumps(_clean(json.loads(json.dumps(obj, default=_default))), indent=1, sort_keys=True)


def write_json(obj, path=None):
    """Write ``obj`` to ``path``, or to stdout when ``path`` is None or "-"."""
    text = dumps(obj) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def problem_from_json(d):
    """Accept a bare problem dict or a wrapper with a "problem" key."""
    return CoupledQP.from_dict(d["problem"] if "problem" in d else d)


def terminal_to_dict(term):
    return {"K": term.K.tolist(), "P": term.P.tolist(), "xf_lb": term.xf_lb.tolist(),
            "xf_ub": term.xf_ub.tolist()}


def terminal_from_dict(d):
    return Terminal(np.asarray(d["K"], dtype=float), np.asarray(d["P"], dtype=float),
                    np.array([float(v) for v in d["xf_lb"]]), np.array([float(v) for v in d["xf_ub"]]))


def mpc_setup_to_dict(sys_, x0=None, N=None, terminal=None, extra=None):
    d = {"system": sys_.to_dict()}
    if x0 is not None:
        d["x0"] = np.asarray(x0, dtype=float).tolist()
    if N is not None:
        d["horizon"] = int(N)
    if terminal is not None:
        d["terminal"] = terminal_to_dict(terminal)
    d.update(extra or {})
    return d


def mpc_setup_from_json(d):
    """Return ``(system, x0, horizon, terminal)``; missing entries are None."""
    if "system" not in d:
        return NetworkSystem.from_dict(d), None, None, None
    x0 = np.asarray(d["x0"], dtype=float) if "x0" in d else None
    term = terminal_from_dict(d["terminal"]) if "terminal" in d else None
    return NetworkSystem.from_dict(d["system"]), x0, d.get("horizon"), term
