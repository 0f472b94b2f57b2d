"""Declarative layer graphs, the four network presets, and their execution.

A network is an ordered list of layers (conv / max_filter / activation /
dropout / combine / output) referencing earlier layers or the named inputs
("image", and "recursive" for the two-stream presets).  Dense execution
follows the skip-kernel rule: every max-filter with window ``w`` multiplies
the dilation of all downstream taps by ``w`` per axis, so the output stays
at full resolution while filters act on sparse grids.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from . import volcore
from .volcore import KernelStack, ShapeError

PRESET_IDS = ("VD2D", "VD2D3D", "VD2D3D_v2", "VD2D3D_v3")
LAYER_KINDS = ("conv", "max_filter", "activation", "dropout", "combine", "output")
INPUT_NAMES = ("image", "recursive")
CHECKPOINT_MAGIC = "vesselseg-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    inputs: tuple[str, ...]
    kernel: tuple[int, int, int] | None = None   # conv / output
    maps: int | None = None                      # conv / output out-channels
    window: tuple[int, int, int] | None = None   # max_filter
    act: str | None = None                       # conv fused / standalone activation
    p: float | None = None                       # dropout keep-reset probability
    init_from: str | None = None                 # transfer alias (recursive stream)


@dataclass
class NetworkSpec:
    preset_id: str
    inputs: tuple[str, ...]
    layers: list[LayerSpec]
    width_scale: float = 1.0

    def __post_init__(self):
        self.validate()

    @property
    def arity(self) -> int:
        return len(self.inputs)

    def validate(self) -> None:
        seen = set(self.inputs)
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {self.preset_id}")
        for l in self.layers:
            if l.kind not in LAYER_KINDS:
                raise ValueError(f"layer {l.name}: unknown kind {l.kind!r}")
            for src in l.inputs:
                if src not in seen:
                    raise ValueError(
                        f"layer {l.name}: input {src!r} is not an earlier layer or network input"
                    )
            if l.kind == "combine" and len(l.inputs) != 2:
                raise ValueError(f"combine layer {l.name} needs exactly 2 inputs")
            if l.kind in ("conv", "output") and (l.kernel is None or l.maps is None):
                raise ValueError(f"layer {l.name}: conv/output needs kernel and maps")
            if l.kind == "max_filter" and l.window is None:
                raise ValueError(f"layer {l.name}: max_filter needs a window")
            seen.add(l.name)
        if self.layers and self.layers[-1].kind != "output":
            raise ValueError("last layer must be the output layer")

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def conv_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind in ("conv", "output")]


def _parse_triple(s: str) -> tuple[int, int, int]:
    parts = tuple(int(p) for p in s.split("x"))
    if len(parts) != 3 or min(parts) < 1:
        raise ValueError(f"bad extent triple {s!r}")
    return parts


def parse_network(text: str) -> NetworkSpec:
    """Parse the key-value preset grammar (one `layer` line per layer)."""
    preset_id = None
    inputs: tuple[str, ...] = ()
    layers: list[LayerSpec] = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] == "preset":
            preset_id = tok[1]
        elif tok[0] == "inputs":
            inputs = tuple(tok[1:])
        elif tok[0] == "layer":
            kv = dict(t.split("=", 1) for t in tok[1:])
            layers.append(
                LayerSpec(
                    name=kv["name"],
                    kind=kv["kind"],
                    inputs=tuple(kv["input"].split(",")),
                    kernel=_parse_triple(kv["kernel"]) if "kernel" in kv else None,
                    maps=int(kv["maps"]) if "maps" in kv else None,
                    window=_parse_triple(kv["window"]) if "window" in kv else None,
                    act=kv.get("act"),
                    p=float(kv["p"]) if "p" in kv else None,
                    init_from=kv.get("init_from"),
                )
            )
        else:
            raise ValueError(f"unrecognized preset line: {raw!r}")
    if preset_id is None or not inputs:
        raise ValueError("preset file must declare `preset` and `inputs`")
    return NetworkSpec(preset_id, inputs, layers)


def scale_widths(spec: NetworkSpec, width_scale: float) -> NetworkSpec:
    """Scale all hidden feature-map counts (floor, min 1); output stays 2."""
    if width_scale == 1.0:
        return spec
    if width_scale <= 0:
        raise ValueError("width_scale must be positive")
    layers = []
    for l in spec.layers:
        if l.kind == "conv":
            layers.append(replace(l, maps=max(1, int(l.maps * width_scale))))
        else:
            layers.append(l)
    return NetworkSpec(spec.preset_id, spec.inputs, layers, width_scale=width_scale)


def build_preset(preset_id: str, width_scale: float = 1.0) -> NetworkSpec:
    if preset_id not in PRESET_IDS:
        raise ValueError(f"unknown preset {preset_id!r}; choose from {PRESET_IDS}")
    fname = preset_id.lower() + ".net"
    text = resources.files("vesselseg.presets").joinpath(fname).read_text()
    spec = parse_network(text)
    return scale_widths(spec, width_scale)


# ---------------------------------------------------------------------------
# Shape calculus: per-layer dilation and receptive field.

def trace(spec: NetworkSpec):
    """Per-layer (dilation, receptive_field) under the skip-kernel rule."""
    state: dict[str, tuple[tuple, tuple]] = {
        name: ((1, 1, 1), (1, 1, 1)) for name in spec.inputs
    }
    for l in spec.layers:
        ins = [state[s] for s in l.inputs]
        if l.kind == "combine":
            if ins[0] != ins[1]:
                raise ValueError(
                    f"combine {l.name}: branch geometries differ: {ins[0]} vs {ins[1]}"
                )
        d, rf = ins[0]
        if l.kind in ("conv", "output"):
            rf = tuple(r + (k - 1) * dd for r, k, dd in zip(rf, l.kernel, d))
        elif l.kind == "max_filter":
            rf = tuple(r + (w - 1) * dd for r, w, dd in zip(rf, l.window, d))
            d = tuple(dd * w for dd, w in zip(d, l.window))
        state[l.name] = (d, rf)
    return state


def receptive_field(spec: NetworkSpec) -> tuple[int, int, int]:
    """Input extent (fz, fy, fx) influencing a single output voxel."""
    return trace(spec)[spec.layers[-1].name][1]


def channels(spec: NetworkSpec) -> dict[str, int]:
    """Output channel count per node."""
    ch = {name: 1 for name in spec.inputs}
    for l in spec.layers:
        if l.kind in ("conv", "output"):
            ch[l.name] = l.maps
        else:
            ch[l.name] = ch[l.inputs[0]]
    return ch


def kernel_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    """(c_out, c_in, kz, ky, kx) per conv/output layer."""
    ch = channels(spec)
    return {
        l.name: (l.maps, ch[l.inputs[0]]) + l.kernel for l in spec.conv_layers()
    }


def param_count(spec: NetworkSpec) -> int:
    return sum(int(np.prod(s)) + s[0] for s in kernel_shapes(spec).values())


# ---------------------------------------------------------------------------
# Parameters.

@dataclass
class ParamStore:
    preset_id: str
    kernels: dict[str, KernelStack] = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION
    width_scale: float = 1.0

    def param_count(self) -> int:
        return sum(k.param_count() for k in self.kernels.values())

    def copy(self) -> "ParamStore":
        return ParamStore(
            self.preset_id,
            {n: KernelStack(k.weights.copy(), k.bias.copy()) for n, k in self.kernels.items()},
            self.version,
            self.width_scale,
        )

    def check_finite(self) -> None:
        for n, k in self.kernels.items():
            if not (np.isfinite(k.weights).all() and np.isfinite(k.bias).all()):
                raise FloatingPointError(f"non-finite parameters in layer {n}")


def init_weights(spec: NetworkSpec, scheme: str = "fanin_uniform", seed: int = 0) -> ParamStore:
    """Fan-in scaled uniform init: U(+-sqrt(3/fan_in)) => Var = 1/fan_in; biases 0."""
    if scheme != "fanin_uniform":
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    store = ParamStore(spec.preset_id, width_scale=spec.width_scale)
    for name, shape in kernel_shapes(spec).items():
        fan_in = int(np.prod(shape[1:]))
        lim = np.sqrt(3.0 / fan_in)
        w = rng.uniform(-lim, lim, size=shape)
        store.kernels[name] = KernelStack(w, np.zeros(shape[0]))
    return store


def check_params(spec: NetworkSpec, params: ParamStore) -> None:
    shapes = kernel_shapes(spec)
    for name, shape in shapes.items():
        if name not in params.kernels:
            raise ValueError(f"parameter store is missing layer {name}")
        got = params.kernels[name].weights.shape
        if tuple(got) != tuple(shape):
            raise ShapeError(f"layer {name}: parameter shape {got} does not match spec {shape}")


# ---------------------------------------------------------------------------
# Execution.

def _softmax_channels(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = logits.max(axis=0, keepdims=True)
    ex = np.exp(logits - m)
    denom = ex.sum(axis=0, keepdims=True)
    probs = ex / denom
    logp = (logits - m) - np.log(denom)
    return probs, logp


def forward(
    spec: NetworkSpec,
    params: ParamStore,
    inputs,
    mode: str = "infer",
    seed: int = 0,
    dropout_p: float | None = None,
):
    """Dense forward pass.

    ``inputs`` is one Tensor4 per network input, in spec order (single-channel
    planes may be passed as (z, y, x) and are promoted).  Returns
    ``(probs, cache)`` where probs has one channel per class and sums to 1
    over channels at every voxel; the cache carries what backward() needs.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if not isinstance(inputs, (list, tuple)):
        inputs = [inputs]
    if len(inputs) != spec.arity:
        raise ShapeError(
            f"{spec.preset_id} expects {spec.arity} input stream(s), got {len(inputs)}"
        )
    check_params(spec, params)
    rf = receptive_field(spec)
    acts: dict[str, np.ndarray] = {}
    for name, arr in zip(spec.inputs, inputs):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        arr = volcore.check_tensor4(arr, name)
        for ax, need, got in zip("zyx", rf, arr.shape[1:]):
            if got < need:
                raise ShapeError(
                    f"axis {ax}: input extent {got} is smaller than the "
                    f"receptive field {need}"
                )
        if arr.shape[1:] != np.asarray(inputs[0]).shape[-3:]:
            raise ShapeError("all input streams must share spatial dims")
        acts[name] = arr
    dil = {name: d for name, (d, _) in trace(spec).items()}
    rng = np.random.default_rng(seed)
    argmax_idx: dict[str, np.ndarray] = {}
    drop_masks: dict[str, np.ndarray] = {}
    probs = logp = None
    for l in spec.layers:
        x = acts[l.inputs[0]]
        d = dil[l.inputs[0]]
        if l.kind == "conv":
            out = volcore.conv_direct(x, params.kernels[l.name], d)
            if l.act and l.act != "linear":
                out = volcore.activation(out, l.act)
        elif l.kind == "max_filter":
            if mode == "train":
                out, idx = volcore.max_filter_argmax(x, l.window, d)
                argmax_idx[l.name] = idx
            else:
                out = volcore.max_filter(x, l.window, d)
        elif l.kind == "activation":
            out = volcore.activation(x, l.act)
        elif l.kind == "dropout":
            p = l.p if dropout_p is None else dropout_p
            if mode == "train" and p > 0.0:
                # inverted dropout: scaled at train time, identity at inference
                mask = (rng.random(x.shape) >= p) / (1.0 - p)
                drop_masks[l.name] = mask
                out = x * mask
            else:
                drop_masks[l.name] = np.ones_like(x)
                out = x
        elif l.kind == "combine":
            a, b = acts[l.inputs[0]], acts[l.inputs[1]]
            if a.shape != b.shape:
                raise ShapeError(
                    f"combine {l.name}: branch shapes {a.shape} vs {b.shape} differ"
                )
            out = a + b
        elif l.kind == "output":
            logits = volcore.conv_direct(x, params.kernels[l.name], d)
            probs, logp = _softmax_channels(logits)
            out = probs
        acts[l.name] = out
    cache = {
        "acts": acts,
        "argmax": argmax_idx,
        "dropout": drop_masks,
        "dilations": dil,
        "mode": mode,
        "probs": probs,
        "logp": logp,
    }
    return probs, cache


def loss_terms(probs: np.ndarray, logp: np.ndarray, target: np.ndarray, weights: np.ndarray):
    """Weighted cross entropy (per-voxel mean) and argmax error fraction."""
    target = np.asarray(target)
    if target.shape != probs.shape[1:]:
        raise ShapeError(f"target shape {target.shape} does not match output {probs.shape[1:]}")
    if weights.shape != target.shape:
        raise ShapeError("weight map shape must match target shape")
    t = target.astype(np.intp)
    picked = np.take_along_axis(logp, t[None], axis=0)[0]
    err = float(-(weights * picked).mean())
    cls = float((probs.argmax(axis=0) != t).mean())
    return err, cls


def backward(
    spec: NetworkSpec,
    params: ParamStore,
    cache,
    target: np.ndarray,
    weights: np.ndarray,
):
    """Gradients of the rebalanced cross-entropy w.r.t. every conv layer.

    Returns (grads, err, cls) where grads maps layer name -> (dW, db).
    ERR is the weighted cross-entropy per-voxel mean, CLS the fraction of
    voxels misclassified at argmax.
    """
    if cache["mode"] != "train":
        raise ValueError("backward needs a cache from a train-mode forward")
    probs, logp = cache["probs"], cache["logp"]
    err, cls = loss_terms(probs, logp, target, weights)
    t = np.asarray(target).astype(np.intp)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, t[None], 1.0, axis=0)
    n_vox = t.size
    grad_logits = weights[None] * (probs - onehot) / n_vox
    acts, dil = cache["acts"], cache["dilations"]
    grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    gout: dict[str, np.ndarray] = {spec.layers[-1].name: grad_logits}

    def push(name: str, g: np.ndarray):
        if name in gout:
            gout[name] = gout[name] + g
        else:
            gout[name] = g

    for l in reversed(spec.layers):
        g = gout.pop(l.name, None)
        if g is None:
            continue
        x = acts[l.inputs[0]]
        d = dil[l.inputs[0]]
        if l.kind in ("conv", "output"):
            if l.kind == "conv" and l.act and l.act != "linear":
                g = volcore.activation_backward(l.act, acts[l.name], g)
            gx, gw, gb = volcore.conv_backward(x, params.kernels[l.name], d, g)
            grads[l.name] = (gw, gb)
            if l.inputs[0] not in spec.inputs:
                push(l.inputs[0], gx)
        elif l.kind == "max_filter":
            gx = volcore.max_filter_backward(x, l.window, d, g, cache["argmax"][l.name])
            push(l.inputs[0], gx)
        elif l.kind == "activation":
            push(l.inputs[0], volcore.activation_backward(l.act, acts[l.name], g))
        elif l.kind == "dropout":
            push(l.inputs[0], g * cache["dropout"][l.name])
        elif l.kind == "combine":
            push(l.inputs[0], g)
            push(l.inputs[1], g.copy())
    return grads, err, cls


# ---------------------------------------------------------------------------
# VD2D -> VD2D3D weight transfer.

def transfer_vd2d_into(vd2d: ParamStore, target_spec: NetworkSpec, seed: int = 0) -> ParamStore:
    """Seed a two-stage network from trained VD2D weights.

    Layers whose name and in-plane shape match are copied; kernels widened
    from kz=1 to kz>1 carry the 2-d plane at the central z tap
    ((kz - 1) // 2) with the other taps zero.  Everything else (the
    recursive stream, Conv4c, Output) keeps its fresh seed-dependent init.
    """
    if vd2d.preset_id != "VD2D" or target_spec.preset_id == "VD2D":
        raise ValueError(
            f"transfer expects VD2D params into a VD2D3D-family spec, got "
            f"{vd2d.preset_id} -> {target_spec.preset_id}"
        )
    store = init_weights(target_spec, seed=seed)
    matched = 0
    aliases = {l.name: l.init_from for l in target_spec.layers if l.init_from}
    for name, shape in kernel_shapes(target_spec).items():
        src = vd2d.kernels.get(aliases.get(name, name))
        if src is None:
            continue
        c_out, c_in, kz, ky, kx = shape
        if (src.c_out, src.c_in) != (c_out, c_in) or src.kdims[1:] != (ky, kx):
            continue  # name matches but the 2-d shape does not: stays fresh
        if src.kdims[0] == kz:
            w = src.weights.copy()
        elif src.kdims[0] == 1:
            w = np.zeros(shape, dtype=src.weights.dtype)
            w[:, :, (kz - 1) // 2] = src.weights[:, :, 0]
        else:
            continue
        store.kernels[name] = KernelStack(w, src.bias.copy())
        matched += 1
    if matched == 0:
        raise ValueError(
            "incompatible preset pairing: no layer of the source store matches the target spec"
        )
    return store


# ---------------------------------------------------------------------------
# Checkpoints: text header + little-endian float32 blobs in header order.

def save_checkpoint(path, store: ParamStore) -> None:
    header = [
        f"{CHECKPOINT_MAGIC} v{store.version}",
        f"preset {store.preset_id}",
        f"width_scale {store.width_scale!r}",
    ]
    for name, k in store.kernels.items():
        header.append(f"layer {name} " + " ".join(str(s) for s in k.weights.shape))
    header.append("end\n")
    with open(path, "wb") as f:
        f.write("\n".join(header).encode("ascii"))
        for k in store.kernels.values():
            f.write(np.ascontiguousarray(k.weights, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(k.bias, dtype="<f4").tobytes())


def load_checkpoint(path) -> ParamStore:
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.index(b"end\n")
    lines = blob[:end].decode("ascii").splitlines()
    body = blob[end + 4 :]
    magic = lines[0].split()
    if magic[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version = int(magic[1].lstrip("v"))
    preset_id = lines[1].split()[1]
    width_scale = float(lines[2].split()[1])
    store = ParamStore(preset_id, version=version, width_scale=width_scale)
    off = 0
    for line in lines[3:]:
        tok = line.split()
        name, shape = tok[1], tuple(int(s) for s in tok[2:])
        nw = int(np.prod(shape))
        w = np.frombuffer(body, dtype="<f4", count=nw, offset=off).reshape(shape)
        off += nw * 4
        b = np.frombuffer(body, dtype="<f4", count=shape[0], offset=off)
        off += shape[0] * 4
        store.kernels[name] = KernelStack(
            w.astype(np.float64), b.astype(np.float64)
        )
    if off != len(body):
        raise ValueError(f"{path}: trailing bytes in checkpoint body")
    return store
