"""Network building blocks: MLPs, a GRU cell, a parameter store and Adam."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

CHECKPOINT_MAGIC = b"CFODECKP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    """Tanh MLP with identity output layer.

    ``widths`` is ``(input, hidden..., output)``.
    """

    name: str
    widths: tuple

    def __post_init__(self):
        if len(self.widths) < 3:
            raise ValueError(f"{self.name}: need at least one hidden layer, got widths {self.widths}")
        if any(int(w) < 1 for w in self.widths):
            raise ValueError(f"{self.name}: all widths must be >= 1, got {self.widths}")

    @property
    def n_layers(self):
        return len(self.widths) - 1

    def param_shapes(self):
        shapes = {}
        for i in range(self.n_layers):
            shapes[f"{self.name}.W{i}"] = (self.widths[i], self.widths[i + 1])
            shapes[f"{self.name}.b{i}"] = (self.widths[i + 1],)
        return shapes


@dataclass(frozen=True)
class GruSpec:
    """Gated recurrent cell; gates are stacked as ``[update, reset, candidate]``."""

    name: str
    input_width: int
    hidden_width: int

    def __post_init__(self):
        if self.hidden_width < 1 or self.input_width < 1:
            raise ValueError(f"{self.name}: widths must be >= 1")

    def param_shapes(self):
        i, h = self.input_width, self.hidden_width
        return {
            f"{self.name}.Wx": (i, 3 * h),
            f"{self.name}.Wh": (h, 3 * h),
            f"{self.name}.bx": (3 * h,),
            f"{self.name}.bh": (3 * h,),
        }


def _fan(spec, pname, shape):
    # GRU gate blocks are initialised per gate, not as one wide matrix
    if isinstance(spec, GruSpec) and pname.endswith(("Wx", "Wh")):
        return shape[0], spec.hidden_width
    return shape[0], shape[1]


class ParamStore:
    """Named float64 parameters with Adam moment buffers."""

    def __init__(self, params=None):
        self.params = {}
        self.m = {}
        self.v = {}
        self.step = 0
        for name, arr in (params or {}).items():
            self.add(name, arr)

    def add(self, name, arr):
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(arr, dtype=np.float64)
        self.params[name] = arr
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return sorted(self.params)

    @property
    def n_params(self):
        return int(sum(a.size for a in self.params.values()))

    def bind(self, tape=None):
        """Map names to tensors: tape leaves if ``tape`` is given, else constants."""
        if tape is None:
            return {k: ad.Tensor(v) for k, v in self.params.items()}
        return {k: tape.var(self.params[k]) for k in self.names()}

    def copy(self):
        new = ParamStore()
        for k in self.names():
            new.params[k] = self.params[k].copy()
            new.m[k] = self.m[k].copy()
            new.v[k] = self.v[k].copy()
        new.step = self.step
        return new

    def flat(self):
        return np.concatenate([self.params[k].ravel() for k in self.names()]) if self.params else np.zeros(0)


def init_params(specs, seed):
    """Glorot-uniform weights, zero biases, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for spec in specs:
        for pname, shape in spec.param_shapes().items():
            if len(shape) == 1:
                store.add(pname, np.zeros(shape))
                continue
            fan_in, fan_out = _fan(spec, pname, shape)
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            store.add(pname, rng.uniform(-bound, bound, size=shape))
    return store


def mlp_forward(spec, params, x):
    """Apply the MLP to ``x`` of shape ``(width,)`` or ``(batch, width)``."""
    x = ad.constant(x) if not isinstance(x, ad.Tensor) else x
    if x.shape[-1] != spec.widths[0]:
        raise ad.ShapeError(f"{spec.name}: input width {x.shape[-1]} != expected {spec.widths[0]}")
    h = x
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        h = ad.add(ad.matmul(h, params[f"{spec.name}.W{i}"]), params[f"{spec.name}.b{i}"])
        if i < last:
            h = ad.tanh(h)
    return h


def gru_step(spec, params, x, h_prev, gx=None):
    """One gated recurrent update.

    ``gx`` optionally carries the precomputed input projection
    ``x @ Wx + bx`` so a whole sequence can be projected in one matmul.
    """
    H = spec.hidden_width
    if gx is None:
        x = ad.constant(x) if not isinstance(x, ad.Tensor) else x
        if x.shape[-1] != spec.input_width:
            raise ad.ShapeError(f"{spec.name}: input width {x.shape[-1]} != expected {spec.input_width}")
        gx = ad.add(ad.matmul(x, params[f"{spec.name}.Wx"]), params[f"{spec.name}.bx"])
    h_prev = ad.constant(h_prev) if not isinstance(h_prev, ad.Tensor) else h_prev
    if h_prev.shape[-1] != H:
        raise ad.ShapeError(f"{spec.name}: hidden width {h_prev.shape[-1]} != expected {H}")
    gh = ad.add(ad.matmul(h_prev, params[f"{spec.name}.Wh"]), params[f"{spec.name}.bh"])
    z = ad.sigmoid(ad.add(gx[..., :H], gh[..., :H]))
    r = ad.sigmoid(ad.add(gx[..., H:2 * H], gh[..., H:2 * H]))
    n = ad.tanh(ad.add(gx[..., 2 * H:], ad.mul(r, gh[..., 2 * H:])))
    # h' = (1 - z) * n + z * h_prev
    return ad.add(n, ad.mul(z, ad.sub(h_prev, n)))


def adam_step(store, grads, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place bias-corrected Adam update; ``grads`` is keyed by parameter name."""
    missing = set(store.params) - set(grads)
    if missing:
        raise KeyError(f"missing gradients for {sorted(missing)}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name in store.names():
        g = grads[name]
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if lr != 0.0:
            store.params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


# -- checkpoint format -------------------------------------------------------
# magic(8) | version u32 | header_len u64 | header json utf-8 |
# per parameter in header order: count u64 | count float64 little-endian


def save_checkpoint(path, store, meta):
    names = store.names()
    header = {
        "format": "cfode-checkpoint",
        "version": CHECKPOINT_VERSION,
        "meta": meta,
        "params": [{"name": n, "shape": list(store.params[n].shape)} for n in names],
        "adam_step": store.step,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for n in names:
            arr = np.ascontiguousarray(store.params[n], dtype="<f8").ravel()
            fh.write(struct.pack("<Q", arr.size))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Return ``(ParamStore, meta)``; moments are reset to zero."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a cfode checkpoint")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", data, 12)
    off = 20
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    store = ParamStore()
    for entry in header["params"]:
        (count,) = struct.unpack_from("<Q", data, off)
        off += 8
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(np.float64)
        off += 8 * count
        store.add(entry["name"], arr.reshape(entry["shape"]))
    store.step = header.get("adam_step", 0)
    return store, header["meta"]
