"""Plain-text array checkpoints.

Layout::

    # key=value          (metadata, one per line)
    @array NAME d1,d2    (shape; empty for a scalar)
    v v v ...            (row-major values, 17 significant digits)

Seventeen significant digits round-trip every float64 exactly.
"""

import numpy as np


def _fmt(v):
    return f"{v:.17g}"


def write(path, arrays: dict, meta=None):
    with open(path, "w") as fh:
        for key in sorted(meta or {}):
            fh.write(f"# {key}={meta[key]}\n")
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=float)
            fh.write(f"@array {name} {','.join(str(d) for d in arr.shape)}\n")
            fh.write(" ".join(_fmt(v) for v in arr.ravel()) + "\n")


def _parse_meta_value(val):
    for cast in (int, float):
        try:
            return cast(val)
        except ValueError:
            pass
    return val


def read(path):
    arrays, meta = {}, {}
    with open(path) as fh:
        lines = fh.read().splitlines()
    i = 0
    while i < len(lines):
        line = lines[i]
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            meta[key.strip()] = _parse_meta_value(val.strip())
        elif line.startswith("@array"):
            parts = line.split()
            name = parts[1]
            shape = tuple(int(d) for d in parts[2].split(",")) if len(parts) > 2 else ()
            i += 1
            values = np.array([float(v) for v in lines[i].split()], dtype=float)
            arrays[name] = values.reshape(shape)
        elif line.strip():
            raise ValueError(f"{path}:{i + 1}: unexpected line")
        i += 1
    return arrays, meta
