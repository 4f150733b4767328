import hashlib

import numpy as np

from .. import binfmt
from ..errors import ShapeError


class ParamSet:
    """Named arrays of a network plus per-parameter optimizer state.

    Arrays are updated in place by the optimizers, so layers holding a
    reference to this set always see current values. Non-trainable entries
    (batch-norm running statistics) live here too so they are saved and
    digested alongside the weights.
    """

    def __init__(self):
        self.values = {}
        self.trainable = set()
        self.opt_state = {}
        self.step = 0

    def add(self, name, value, trainable=True):
        if name in self.values:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.values[name] = np.ascontiguousarray(value)
        if trainable:
            self.trainable.add(name)

    def __getitem__(self, name):
        return self.values[name]

    def __contains__(self, name):
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def names(self):
        return list(self.values)

    def items(self):
        return self.values.items()

    def trainable_items(self):
        return [(k, v) for k, v in self.values.items() if k in self.trainable]

    def assign(self, name, value):
        """Overwrite a parameter in place; the shape is fixed at creation."""
        cur = self.values[name]
        value = np.asarray(value)
        if value.shape != cur.shape:
            raise ShapeError(f"{name}: shape {value.shape} != {cur.shape}")
        cur[...] = value

    def astype(self, dtype):
        for k in self.values:
            self.values[k] = self.values[k].astype(dtype)
        self.opt_state = {k: tuple(s.astype(dtype) for s in v)
                          for k, v in self.opt_state.items()}

    def copy(self):
        new = ParamSet()
        new.values = {k: v.copy() for k, v in self.values.items()}
        new.trainable = set(self.trainable)
        new.opt_state = {k: tuple(s.copy() for s in v) for k, v in self.opt_state.items()}
        new.step = self.step
        return new

    def digest(self):
        h = hashlib.sha256()
        for name in sorted(self.values):
            arr = self.values[name]
            h.update(name.encode())
            h.update(str(arr.dtype).encode())
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def arrays(self, prefix=""):
        return [(prefix + k, v) for k, v in self.values.items()]


def save_params(path, params, metadata=None):
    header = {"kind": "params", "trainable": sorted(params.trainable)}
    if metadata:
        header["metadata"] = metadata
    binfmt.write_file(path, header, params.arrays())


def load_params(path):
    header, arrays = binfmt.read_file(path)
    params = ParamSet()
    trainable = set(header.get("trainable", arrays))
    for name, arr in arrays.items():
        params.add(name, arr, trainable=name in trainable)
    return params, header.get("metadata", {})
