"""A small deterministic convolutional feature network.

Stands in for a large pretrained backbone at desk scale: exposes per-layer
activations for the style/content losses, and a manual reverse-mode backward
pass producing pixel and parameter gradients. Weights are seeded, so the same
seed always yields the bit-identical network.

The default architecture has four conv stages (8, 16, 16, 32 channels, 3x3
kernels) with relu activations, a residual block at stage 3, and 2x average
pooling between stages. Style losses default to the four stage outputs,
the content loss to the stage-3 (residual) output.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    conv2d,
    conv2d_backward,
    global_avg_pool,
    global_avg_pool_backward,
    leaky_relu,
    pool2d,
    pool2d_backward,
    relu,
)

STYLE_LAYERS = ("relu1", "relu2", "res3", "relu4")
CONTENT_LAYER = "res3"

# Default weight seed. Chosen so every conv1 kernel mixes positive and
# negative weights on each padded border sub-window, keeping the relevance
# rules' denominators nondegenerate on strictly positive images.
DEFAULT_FEATURE_SEED = 11

__all__ = [
    "LayerSpec",
    "Network",
    "build_network",
    "default_feature_spec",
    "default_feature_network",
    "extract_features",
    "backward",
    "save_weights",
    "load_weights",
    "STYLE_LAYERS",
    "CONTENT_LAYER",
    "DEFAULT_FEATURE_SEED",
]


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the network.

    kind is one of conv, activation, pool, residual, global-pool, dense,
    softmax. Residual layers carry a `body` of inner LayerSpecs and compute
    input + body(input).
    """

    kind: str
    name: str = ""
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    activation: str = "relu"
    slope: float = 0.01
    window: int = 2
    mode: str = "avg"
    units: int = 0
    body: tuple = field(default_factory=tuple)


def default_feature_spec() -> list[LayerSpec]:
    return [
        LayerSpec("conv", "conv1", out_channels=8),
        LayerSpec("activation", "relu1"),
        LayerSpec("pool", "pool1", window=2, mode="avg"),
        LayerSpec("conv", "conv2", out_channels=16),
        LayerSpec("activation", "relu2"),
        LayerSpec("pool", "pool2", window=2, mode="avg"),
        LayerSpec("residual", "res3", body=(
            LayerSpec("conv", "res3_conv", out_channels=16),
            LayerSpec("activation", "res3_relu"),
        )),
        LayerSpec("pool", "pool3", window=2, mode="avg"),
        LayerSpec("conv", "conv4", out_channels=32),
        LayerSpec("activation", "relu4"),
    ]


def _he_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Network:
    """Immutable after construction; forward/backward are pure functions of
    their inputs, so concurrent readers are safe."""

    def __init__(self, specs: list[LayerSpec], params: dict, in_channels: int):
        self.specs = list(specs)
        self.params = params
        self.in_channels = in_channels
        self.layer_names = [s.name for s in self.specs]

    # -- parameter plumbing ------------------------------------------------

    def param_items(self):
        """(key, array) pairs in a fixed traversal order."""
        out = []

        def walk(specs, prefix=""):
            for s in specs:
                if s.kind in ("conv", "dense"):
                    p = self.params[s.name]
                    out.append((s.name + ".weight", p["weight"]))
                    out.append((s.name + ".bias", p["bias"]))
                elif s.kind == "residual":
                    walk(s.body, s.name + "/")

        walk(self.specs)
        return out

    def flat_params(self) -> np.ndarray:
        items = self.param_items()
        if not items:
            return np.zeros(0)
        return np.concatenate([a.ravel() for _, a in items])

    def set_flat_params(self, flat: np.ndarray) -> None:
        pos = 0
        for key, a in self.param_items():
            n = a.size
            a[...] = np.asarray(flat[pos:pos + n], dtype=np.float64).reshape(a.shape)
            pos += n
        if pos != flat.size:
            raise ValueError(f"parameter vector length {flat.size} != expected {pos}")

    def flatten_grads(self, grads: dict) -> np.ndarray:
        parts = []
        for key, a in self.param_items():
            g = grads.get(key)
            parts.append(np.zeros(a.size) if g is None else np.asarray(g).ravel())
        return np.concatenate(parts) if parts else np.zeros(0)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for key, a in self.param_items():
            h.update(key.encode())
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def clone(self) -> "Network":
        params = {
            name: {k: v.copy() for k, v in p.items()}
            for name, p in self.params.items()
        }
        return Network(self.specs, params, self.in_channels)

    # -- forward / backward ------------------------------------------------

    def _as_input(self, image: np.ndarray) -> np.ndarray:
        x = np.asarray(image, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.shape[0] != self.in_channels:
            raise ValueError(
                f"network expects {self.in_channels} input channel(s), got shape {x.shape}"
            )
        return x

    def _layer_forward(self, spec: LayerSpec, x: np.ndarray):
        if spec.kind == "conv":
            p = self.params[spec.name]
            y = conv2d(x, p["weight"], p["bias"], spec.stride, spec.padding)
            return y, {"x": x}
        if spec.kind == "activation":
            fn = relu if spec.activation == "relu" else (lambda a: leaky_relu(a, spec.slope))
            return fn(x), {"x": x}
        if spec.kind == "pool":
            return pool2d(x, spec.window, spec.mode), {"x": x}
        if spec.kind == "residual":
            h = x
            body_caches = []
            for inner in spec.body:
                h, c = self._layer_forward(inner, h)
                body_caches.append(c)
            return x + h, {"x": x, "body_out": h, "body_caches": body_caches}
        if spec.kind == "global-pool":
            return global_avg_pool(x), {"x": x, "x_shape": x.shape}
        if spec.kind == "dense":
            p = self.params[spec.name]
            flat = x.ravel()
            return p["weight"] @ flat + p["bias"], {"x": x, "flat": flat}
        if spec.kind == "softmax":
            z = x - x.max()
            e = np.exp(z)
            y = e / e.sum()
            return y, {"y": y}
        raise ValueError(f"unknown layer kind {spec.kind!r}")

    def _layer_backward(self, spec: LayerSpec, cache: dict, gy: np.ndarray, grads: dict):
        if spec.kind == "conv":
            p = self.params[spec.name]
            gx, gw, gb = conv2d_backward(cache["x"], p["weight"], gy, spec.stride, spec.padding)
            grads[spec.name + ".weight"] = grads.get(spec.name + ".weight", 0) + gw
            grads[spec.name + ".bias"] = grads.get(spec.name + ".bias", 0) + gb
            return gx
        if spec.kind == "activation":
            x = cache["x"]
            if spec.activation == "relu":
                return gy * (x > 0)
            return gy * np.where(x > 0, 1.0, spec.slope)
        if spec.kind == "pool":
            return pool2d_backward(cache["x"], spec.window, spec.mode, gy)
        if spec.kind == "residual":
            g = gy
            for inner, c in zip(reversed(spec.body), reversed(cache["body_caches"])):
                g = self._layer_backward(inner, c, g, grads)
            return gy + g
        if spec.kind == "global-pool":
            return global_avg_pool_backward(cache["x_shape"], gy)
        if spec.kind == "dense":
            p = self.params[spec.name]
            grads[spec.name + ".weight"] = grads.get(spec.name + ".weight", 0) + np.outer(gy, cache["flat"])
            grads[spec.name + ".bias"] = grads.get(spec.name + ".bias", 0) + gy
            return (p["weight"].T @ gy).reshape(cache["x"].shape)
        if spec.kind == "softmax":
            y = cache["y"]
            return y * (gy - np.dot(gy, y))
        raise ValueError(f"unknown layer kind {spec.kind!r}")

    def forward_cache(self, image: np.ndarray):
        """Run the forward pass; returns ({layer name: activation}, caches)."""
        x = self._as_input(image)
        stack: dict[str, np.ndarray] = {}
        caches = []
        for spec in self.specs:
            x, c = self._layer_forward(spec, x)
            c["out_shape"] = x.shape
            stack[spec.name] = x
            caches.append(c)
        return stack, caches

    def forward(self, image: np.ndarray) -> dict:
        return self.forward_cache(image)[0]

    def backward(self, caches, seeds: dict, input_shape=None):
        """Reverse-mode pass. `seeds` maps layer name -> loss gradient w.r.t.
        that layer's output; gradients from several layers accumulate along
        the way. Returns (gradient w.r.t. input, {param key: gradient})."""
        for name, g in seeds.items():
            if name not in self.layer_names:
                raise ValueError(f"unknown layer id {name!r}; have {self.layer_names}")
        grads: dict[str, np.ndarray] = {}
        g = None
        for spec, cache in zip(reversed(self.specs), reversed(caches)):
            seed = seeds.get(spec.name)
            if seed is not None:
                seed = np.asarray(seed, dtype=np.float64)
                if seed.shape != cache["out_shape"]:
                    raise ValueError(
                        f"seed gradient for {spec.name!r} has shape {seed.shape}, "
                        f"layer output has shape {cache['out_shape']}"
                    )
                g = seed.copy() if g is None else g + seed
            if g is None:
                continue
            g = self._layer_backward(spec, cache, g, grads)
        if g is None:
            raise ValueError("no gradient seeds given")
        return g, grads


def _validate_and_init(specs, rng, in_channels, input_size, params, prefix="",
                       start_index=0):
    """Walk specs, checking shape compatibility and initializing parameters.
    Returns the output (channels, height, width); height/width are None when
    input_size is unknown."""
    c = in_channels
    h, w = input_size if input_size else (None, None)
    for i, s in enumerate(specs):
        where = f"layer {start_index + i} ({prefix}{s.name or s.kind})"
        if s.kind == "conv":
            if s.out_channels < 1:
                raise ValueError(f"{where}: conv needs out_channels >= 1")
            fan_in = c * s.kernel * s.kernel
            params[s.name] = {
                "weight": _he_init(rng, (s.out_channels, c, s.kernel, s.kernel), fan_in),
                "bias": np.zeros(s.out_channels),
            }
            c = s.out_channels
            if h is not None:
                h = (h + 2 * s.padding - s.kernel) // s.stride + 1
                w = (w + 2 * s.padding - s.kernel) // s.stride + 1
                if h < 1 or w < 1:
                    raise ValueError(f"{where}: output spatial size collapsed to {(h, w)}")
        elif s.kind == "activation":
            pass
        elif s.kind == "pool":
            if h is not None:
                if h % s.window or w % s.window:
                    raise ValueError(
                        f"{where}: window {s.window} does not divide {(h, w)}"
                    )
                h, w = h // s.window, w // s.window
        elif s.kind == "residual":
            if not s.body:
                raise ValueError(f"{where}: residual body is empty")
            bc, bh, bw = _validate_and_init(
                s.body, rng, c, (h, w) if h is not None else None, params,
                prefix=s.name + "/", start_index=0)
            if bc != c or (h is not None and (bh, bw) != (h, w)):
                raise ValueError(
                    f"{where}: residual body output ({bc} ch) must match its input ({c} ch)"
                )
        elif s.kind == "global-pool":
            h, w = 1, 1
        elif s.kind == "dense":
            if h is None:
                raise ValueError(f"{where}: dense layer requires a known input size")
            n_in = c * h * w
            params[s.name] = {
                "weight": _he_init(rng, (s.units, n_in), n_in),
                "bias": np.zeros(s.units),
            }
            c, h, w = s.units, 1, 1
        elif s.kind == "softmax":
            pass
        else:
            raise ValueError(f"{where}: unknown layer kind {s.kind!r}")
    return c, h, w


def build_network(specs: list[LayerSpec], seed: int, in_channels: int = 1,
                  input_size=None) -> Network:
    """Construct a network with seeded He-initialized weights. The same seed
    gives the bit-identical network. `input_size` (height, width) is required
    when the spec contains dense layers."""
    if not specs:
        raise ValueError("network spec is empty")
    named = []
    seen = set()
    for i, s in enumerate(specs):
        name = s.name or f"{s.kind}{i}"
        if name in seen:
            raise ValueError(f"duplicate layer name {name!r}")
        seen.add(name)
        body = tuple(
            inner if inner.name else
            LayerSpec(**{**inner.__dict__, "name": f"{name}_b{j}"})
            for j, inner in enumerate(s.body)
        )
        named.append(LayerSpec(**{**s.__dict__, "name": name, "body": body}))
    rng = np.random.default_rng(seed)
    params: dict[str, dict[str, np.ndarray]] = {}
    _validate_and_init(named, rng, in_channels, input_size, params)
    return Network(named, params, in_channels)


def default_feature_network(seed: int = DEFAULT_FEATURE_SEED) -> Network:
    return build_network(default_feature_spec(), seed)


def extract_features(net: Network, image: np.ndarray, layers=None) -> dict:
    """Forward the image and return {layer id: activation} for the requested
    layers (all layers when `layers` is None)."""
    stack = net.forward(image)
    if layers is None:
        return stack
    missing = [l for l in layers if l not in stack]
    if missing:
        raise ValueError(f"unknown layer id(s) {missing}; have {list(stack)}")
    return {l: stack[l] for l in layers}


def backward(net: Network, image: np.ndarray, seeds: dict):
    """Convenience wrapper: forward `image`, then backpropagate the seed
    gradients. Returns (pixel gradient, parameter gradients)."""
    _, caches = net.forward_cache(image)
    gx, grads = net.backward(caches, seeds)
    if np.asarray(image).ndim == 2:
        gx = gx[0] if gx.shape[0] == 1 else gx
    return gx, grads


# ------------------------------------------------------------- weight file
#
# Flat binary layout:
#   magic "ESW1" | u32 number of parameter arrays
#   per array: u16 key length | key bytes | u8 ndim | u32 dims...
#   all array data, row-major float64, in header order
#   u32 crc32 of the data section

_MAGIC = b"ESW1"


def save_weights(net: Network, path) -> None:
    items = net.param_items()
    header = [_MAGIC, struct.pack("<I", len(items))]
    blobs = []
    for key, a in items:
        kb = key.encode()
        header.append(struct.pack("<H", len(kb)))
        header.append(kb)
        header.append(struct.pack("<B", a.ndim))
        header.append(struct.pack(f"<{a.ndim}I", *a.shape))
        blobs.append(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    data = b"".join(blobs)
    with open(path, "wb") as f:
        f.write(b"".join(header))
        f.write(data)
        f.write(struct.pack("<I", zlib.crc32(data) & 0xFFFFFFFF))


def load_weights(net: Network, path) -> None:
    """Load parameters saved by save_weights into `net` (shapes must match)."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != _MAGIC:
        raise ValueError(f"{path}: not a weight file")
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    entries = []
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        key = buf[pos:pos + klen].decode()
        pos += klen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        entries.append((key, shape))
    n_data = sum(int(np.prod(s)) for _, s in entries) * 8
    data = buf[pos:pos + n_data]
    (crc,) = struct.unpack_from("<I", buf, pos + n_data)
    if zlib.crc32(data) & 0xFFFFFFFF != crc:
        raise ValueError(f"{path}: checksum mismatch, file corrupt")
    have = dict(net.param_items())
    off = 0
    for key, shape in entries:
        n = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape)
        off += n * 8
        if key not in have:
            raise ValueError(f"{path}: unknown parameter {key!r} for this network")
        if have[key].shape != arr.shape:
            raise ValueError(
                f"{path}: parameter {key!r} has shape {arr.shape}, network expects "
                f"{have[key].shape}"
            )
        have[key][...] = arr
