"""Two-stage recursive training: schedules, sampling, augmentation, SGD.

Stage 1 trains the 2-d network on image patches; stage 2 densely infers
stage-1 probability maps over every stack, seeds the 2-d/3-d network from
the trained weights, and continues training with (image, probability map)
input pairs.  All randomness flows from one seed; with the deterministic
engine mode the final checkpoint is bitwise reproducible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import netgraph
from .netgraph import NetworkSpec, ParamStore
from .volcore import ShapeError

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Learning-rate schedules.

@dataclass(frozen=True)
class LrSchedule:
    initial_lr: float
    anneal_factor: float = 1.0
    anneal_every: int = 1
    # Optional mid-stage reset (used by the second training stage).
    reset_at: int | None = None
    reset_lr: float | None = None
    reset_anneal_every: int | None = None

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if not 0.0 < self.anneal_factor <= 1.0:
            raise ValueError("anneal_factor must lie in (0, 1]")
        if self.anneal_every < 1:
            raise ValueError("anneal_every must be >= 1")


# Published schedules: stage 1 anneals by 0.999 every 6th update for 60K
# updates; stage 2 anneals every update for 15K updates, then restarts at
# 1e-4 annealing every 10th update for the remaining 75K.
VD2D_SCHEDULE = LrSchedule(0.01, 0.999, 6)
VD2D3D_SCHEDULE = LrSchedule(0.01, 0.999, 1, reset_at=15000, reset_lr=1e-4,
                             reset_anneal_every=10)
VD2D_UPDATES = 60_000
VD2D3D_UPDATES = 90_000


def lr_at(s: LrSchedule, k: int) -> float:
    """Learning rate applied at update index k (0-based)."""
    if k < 0:
        raise ValueError("update index must be >= 0")
    if s.reset_at is not None and k >= s.reset_at:
        return s.reset_lr * s.anneal_factor ** ((k - s.reset_at) // s.reset_anneal_every)
    return s.initial_lr * s.anneal_factor ** (k // s.anneal_every)


@dataclass
class TrainConfig:
    stage: str = "stage1"
    updates: int = VD2D_UPDATES
    patch_out: tuple[int, int, int] = (1, 100, 100)
    momentum: float = 0.9
    lr: LrSchedule = VD2D_SCHEDULE
    dropout_p: float | None = None   # None: use the preset's dropout probability
    augment: bool = True
    rebalance: bool = True
    seed: int = 0
    log_every: int = 100
    eval_patches: int = 4
    checkpoint_every: int = 5000
    out_dir: str | None = None

    def __post_init__(self):
        if min(self.patch_out) < 1:
            raise ValueError("patch_out extents must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


# ---------------------------------------------------------------------------
# Per-patch machinery.

def rebalance_weights(labels: np.ndarray) -> np.ndarray:
    """Per-voxel loss weights 0.5/f_c per class, unit mean over the patch.

    Single-class patches fall back to all-ones (the clamp rule).
    """
    labels = np.asarray(labels)
    f = labels.mean()
    if f == 0.0 or f == 1.0:
        return np.ones(labels.shape)
    return np.where(labels > 0, 0.5 / f, 0.5 / (1.0 - f))


def dihedral(arr: np.ndarray, t: int, axes=(-2, -1)) -> np.ndarray:
    """Apply element t (0..7) of the in-plane rotation/flip group of 8."""
    if not 0 <= t <= 7:
        raise ValueError("dihedral element must lie in 0..7")
    rot = t % 4
    if rot % 2 and arr.shape[axes[0]] != arr.shape[axes[1]]:
        raise ShapeError("quarter rotations need a square y-x patch")
    out = arr
    if t >= 4:
        out = np.flip(out, axis=axes[1])
    if rot:
        out = np.rot90(out, rot, axes=axes)
    return out


_DIHEDRAL_INVERSE = (0, 3, 2, 1, 4, 5, 6, 7)


def dihedral_inverse(t: int) -> int:
    """Group inverse: dihedral(dihedral(a, t), inverse(t)) == a."""
    return _DIHEDRAL_INVERSE[t]


def augment_patch(arrays, t: int):
    """One dihedral transform applied identically to every patch component."""
    return tuple(None if a is None else dihedral(a, t) for a in arrays)


def sample_patch(
    image: np.ndarray,
    labels: np.ndarray,
    spec: NetworkSpec,
    rng: np.random.Generator,
    patch_out=(1, 100, 100),
    recursive: np.ndarray | None = None,
):
    """Uniformly placed training patch.

    Returns (input_patch, label_patch, recursive_patch).  The input patch is
    output + receptive_field - 1 per axis; the label patch sits at the
    front-biased center offset (f - 1) // 2, matching dense inference.
    """
    rf = netgraph.receptive_field(spec)
    need = tuple(o + f - 1 for o, f in zip(patch_out, rf))
    for ax, n, got in zip("zyx", need, image.shape):
        if got < n:
            raise ShapeError(
                f"axis {ax}: stack extent {got} below required patch extent {n}"
            )
    off = tuple(int(rng.integers(0, got - n + 1)) for n, got in zip(need, image.shape))
    sl_in = tuple(slice(o, o + n) for o, n in zip(off, need))
    sl_out = tuple(
        slice(o + (f - 1) // 2, o + (f - 1) // 2 + p)
        for o, f, p in zip(off, rf, patch_out)
    )
    img = image[sl_in][None].astype(np.float64)
    lab = labels[sl_out].astype(np.uint8)
    rec = None if recursive is None else recursive[sl_in][None].astype(np.float64)
    return img, lab, rec


def sgd_step(params: ParamStore, grads, velocity: dict, lr: float, momentum: float):
    """v <- momentum * v - lr * g;  w <- w + v.  In-place on params."""
    for name, (gw, gb) in grads.items():
        k = params.kernels[name]
        vw, vb = velocity.get(name, (np.zeros_like(k.weights), np.zeros_like(k.bias)))
        vw = momentum * vw - lr * gw
        vb = momentum * vb - lr * gb
        k.weights += vw
        k.bias += vb
        velocity[name] = (vw, vb)
    return params, velocity


# ---------------------------------------------------------------------------
# Training loops.

def _as_record(item):
    if isinstance(item, dict):
        return dict(item)
    image, labels = item[0], item[1]
    rec = item[2] if len(item) > 2 else None
    return {"image": image, "labels": labels, "recursive": rec}


def _net_inputs(spec, img, rec):
    if spec.arity == 1:
        if rec is not None:
            raise ValueError(f"{spec.preset_id} takes a single input stream")
        return [img]
    if rec is None:
        raise ValueError(f"{spec.preset_id} needs a recursive map for each stack")
    return [img, rec]


def _eval_split(spec, params, records, cfg, patch_out, seed):
    """ERR/CLS over a fixed set of patches (same patches at every call)."""
    rng = np.random.default_rng(seed)
    errs, clss = [], []
    for _ in range(cfg.eval_patches):
        rec = records[int(rng.integers(len(records)))]
        img, lab, rmap = sample_patch(
            rec["image"], rec["labels"], spec, rng, patch_out, rec.get("recursive")
        )
        probs, cache = netgraph.forward(spec, params, _net_inputs(spec, img, rmap))
        w = rebalance_weights(lab) if cfg.rebalance else np.ones(lab.shape)
        err, cls = netgraph.loss_terms(probs, cache["logp"], lab, w)
        errs.append(err)
        clss.append(cls)
    return float(np.mean(errs)), float(np.mean(clss))


def train_stage(
    spec: NetworkSpec,
    params0: ParamStore,
    data,
    cfg: TrainConfig,
    test_data=(),
):
    """Run cfg.updates SGD steps of sample -> augment -> forward/backward.

    Returns (params, log_rows); each row is a dict with update index, split
    ("train" or "test"), ERR (weighted cross-entropy per voxel), and CLS
    (argmax error fraction).  Momentum velocity starts at zero.
    """
    records = [_as_record(r) for r in data]
    test_records = [_as_record(r) for r in test_data]
    if not records:
        raise ValueError("training data must be nonempty")
    for r in records + test_records:
        if (spec.arity == 2) != (r.get("recursive") is not None):
            raise ValueError(
                f"{spec.preset_id} arity {spec.arity} does not match supplied data"
            )
    if cfg.updates == 0:
        return params0, []
    params = params0.copy()
    velocity: dict = {}
    rng = np.random.default_rng(cfg.seed)
    rows = []

    def monitor(k, err, cls):
        rows.append({"update": k, "split": "train", "err": err, "cls": cls})
        if test_records:
            terr, tcls = _eval_split(
                spec, params, test_records, cfg, cfg.patch_out, seed=cfg.seed + 0x9E37
            )
            rows.append({"update": k, "split": "test", "err": terr, "cls": tcls})

    def checkpoint(k):
        if cfg.out_dir is not None:
            path = f"{cfg.out_dir}/{spec.preset_id}_{cfg.stage}_{k:06d}.ckpt"
            netgraph.save_checkpoint(path, params)

    for k in range(cfg.updates):
        rec = records[int(rng.integers(len(records)))]
        img, lab, rmap = sample_patch(
            rec["image"], rec["labels"], spec, rng, cfg.patch_out, rec.get("recursive")
        )
        if cfg.augment:
            t = int(rng.integers(8))
            img, lab, rmap = augment_patch((img, lab, rmap), t)
        probs, cache = netgraph.forward(
            spec, params, _net_inputs(spec, img, rmap), mode="train",
            seed=(cfg.seed * 1_000_003 + k) % (2**63), dropout_p=cfg.dropout_p,
        )
        w = rebalance_weights(lab) if cfg.rebalance else np.ones(lab.shape)
        grads, err, cls = netgraph.backward(spec, params, cache, lab, w)
        if not np.isfinite(err):
            raise FloatingPointError(f"non-finite training loss at update {k}")
        sgd_step(params, grads, velocity, lr_at(cfg.lr, k), cfg.momentum)
        if k % cfg.log_every == 0:
            monitor(k, err, cls)
        if k > 0 and k % cfg.checkpoint_every == 0:
            checkpoint(k)
    monitor(cfg.updates - 1, err, cls)
    params.check_finite()
    checkpoint(cfg.updates)
    return params, rows


def dense_infer(
    spec: NetworkSpec,
    params: ParamStore,
    image: np.ndarray,
    recursive: np.ndarray | None = None,
    tile: int = 120,
) -> np.ndarray:
    """Dense vessel-probability map aligned voxel-for-voxel with the stack.

    The stack is mirror-padded by the receptive field (front-biased split,
    (f-1)//2 before) so valid-mode output covers every voxel; output is
    produced tile by tile to bound memory.
    """
    image = np.asarray(image, dtype=np.float64)
    rf = netgraph.receptive_field(spec)
    pads = tuple(((f - 1) // 2, f - 1 - (f - 1) // 2) for f in rf)
    for ax, (before, after), got in zip("zyx", pads, image.shape):
        if max(before, after) > got - 1:
            raise ShapeError(
                f"axis {ax}: stack extent {got} too small to mirror-pad by {max(before, after)}"
            )
    padded = np.pad(image, pads, mode="reflect")
    streams = [padded]
    if spec.arity == 2:
        if recursive is None:
            raise ValueError(f"{spec.preset_id} needs a recursive input map")
        streams.append(np.pad(np.asarray(recursive, dtype=np.float64), pads, mode="reflect"))
    out = np.empty(image.shape, dtype=np.float32)
    nz, ny, nx = image.shape
    for y0 in range(0, ny, tile):
        y1 = min(y0 + tile, ny)
        for x0 in range(0, nx, tile):
            x1 = min(x0 + tile, nx)
            ins = [
                s[None, :, y0 : y1 + rf[1] - 1, x0 : x1 + rf[2] - 1] for s in streams
            ]
            probs, _ = netgraph.forward(spec, params, ins)
            out[:, y0:y1, x0:x1] = probs[1]
    return out


def stack_loss(
    spec: NetworkSpec,
    params: ParamStore,
    image: np.ndarray,
    labels: np.ndarray,
    recursive: np.ndarray | None = None,
    rebalance: bool = True,
):
    """Full-volume (ERR, CLS) from a dense inference pass.

    ERR is the class-rebalanced cross entropy per voxel over the whole stack,
    CLS the argmax error fraction; both deterministic (no patch sampling).
    """
    prob = dense_infer(spec, params, image, recursive).astype(np.float64)
    labels = np.asarray(labels) > 0
    p = np.clip(np.where(labels, prob, 1.0 - prob), 1e-12, None)
    w = rebalance_weights(labels) if rebalance else np.ones(labels.shape)
    err = float(-(w * np.log(p)).mean())
    cls = float(((prob >= 0.5) != labels).mean())
    return err, cls


def train_recursive(
    train_data,
    stage1_cfg: TrainConfig,
    stage2_cfg: TrainConfig,
    test_data=(),
    preset2: str = "VD2D3D",
    width_scale: float = 1.0,
):
    """Full two-stage procedure.

    Trains VD2D, densely infers its probability maps over all stacks
    (these are the recursive inputs, stored voxel-aligned), transfers the
    2-d weights into the chosen second-stage preset, and trains that with
    (image, map) input pairs.  Returns (stage-1 params, stage-2 params,
    recursive maps per train record, logs per stage).
    """
    spec1 = netgraph.build_preset("VD2D", width_scale)
    spec2 = netgraph.build_preset(preset2, width_scale)
    params1_0 = netgraph.init_weights(spec1, seed=stage1_cfg.seed)
    params1, log1 = train_stage(spec1, params1_0, train_data, stage1_cfg, test_data)

    def with_maps(items):
        out = []
        for item in items:
            r = _as_record(item)
            r["recursive"] = dense_infer(spec1, params1, r["image"]).astype(np.float64)
            out.append(r)
        return out

    train2 = with_maps(train_data)
    test2 = with_maps(test_data)
    params2_0 = netgraph.transfer_vd2d_into(params1, spec2, seed=stage2_cfg.seed)
    params2, log2 = train_stage(spec2, params2_0, train2, stage2_cfg, test2)
    maps = [r["recursive"].astype(np.float32) for r in train2]
    return params1, params2, maps, (log1, log2)
