"""Volume I/O (multi-page grayscale TIFF) and dataset manifest handling.

Stacks are stored z-slowest, matching TIFF page order: a 512x512x15 file
reads as an array of shape (15, 512, 512).  Label masks accept 0/255 or 0/1
on read and are normalized to 0/1; masks are always written as 0/255.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tifffile


class UnsupportedFormatError(ValueError):
    """Multi-channel/RGB data or a sample format the pipeline does not take."""


class CorruptFileError(ValueError):
    """Structurally broken TIFF (e.g. pages of unequal size)."""


class ManifestError(ValueError):
    """Malformed dataset manifest."""


_ALLOWED_DTYPES = ("uint8", "uint16", "int16", "float32")


@dataclass
class Stack:
    """A microscopy volume: voxels plus optional physical voxel size."""

    data: np.ndarray                       # (z, y, x)
    voxel_size_um: tuple | None = None     # (x, y, z) micrometers
    path: str | None = None

    @property
    def dims(self):
        return self.data.shape

    @property
    def spacing_zyx(self):
        if self.voxel_size_um is None:
            return None
        x, y, z = self.voxel_size_um
        return (z, y, x)


def read_stack(path) -> Stack:
    path = Path(path)
    with tifffile.TiffFile(path) as tf:
        pages = tf.pages
        shapes = set()
        for p in pages:
            if getattr(p, "samplesperpixel", 1) != 1:
                raise UnsupportedFormatError(
                    f"{path}: {p.samplesperpixel} samples/pixel; only grayscale is supported"
                )
            shapes.add(p.shape)
        if len(shapes) > 1:
            raise CorruptFileError(f"{path}: pages of unequal size {sorted(shapes)}")
        try:
            data = tf.asarray()
        except Exception as e:  # tifffile raises various subclasses here
            raise CorruptFileError(f"{path}: {e}") from e
        if data.dtype.name not in _ALLOWED_DTYPES:
            raise UnsupportedFormatError(
                f"{path}: dtype {data.dtype} unsupported (need 8/16-bit int or float32)"
            )
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise UnsupportedFormatError(f"{path}: expected a z-stack, got shape {data.shape}")
        voxel = None
        meta = tf.imagej_metadata or {}
        page0 = pages[0]
        if "XResolution" in page0.tags and "spacing" in meta:
            num, den = page0.tags["XResolution"].value
            vx = den / num if num else None
            num, den = page0.tags["YResolution"].value
            vy = den / num if num else None
            if vx and vy:
                voxel = (float(vx), float(vy), float(meta["spacing"]))
    return Stack(data=data, voxel_size_um=voxel, path=str(path))


def write_stack(path, data: np.ndarray, voxel_size_um=None) -> None:
    """Write a (z, y, x) volume as an uncompressed multi-page grayscale TIFF."""
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[None]
    if data.dtype.name not in _ALLOWED_DTYPES:
        raise UnsupportedFormatError(f"refusing to write dtype {data.dtype}")
    kwargs = {"photometric": "minisblack"}
    if voxel_size_um is not None:
        vx, vy, vz = voxel_size_um
        kwargs.update(
            imagej=True,
            resolution=(1.0 / vx, 1.0 / vy),
            metadata={"spacing": float(vz), "unit": "um", "axes": "ZYX"},
        )
    tifffile.imwrite(path, data, **kwargs)


def read_labels(path) -> Stack:
    """Read a binary mask stack; 0/255 or 0/1 normalize to 0/1 uint8."""
    st = read_stack(path)
    vals = np.unique(st.data)
    if not np.isin(vals, (0, 1, 255)).all():
        raise UnsupportedFormatError(
            f"{path}: label values {vals[:6]} are not binary (0/1 or 0/255)"
        )
    st.data = (st.data > 0).astype(np.uint8)
    return st


def write_mask(path, mask: np.ndarray, voxel_size_um=None) -> None:
    """Write a binary mask as 8-bit 0/255."""
    out = (np.asarray(mask) > 0).astype(np.uint8) * np.uint8(255)
    write_stack(path, out, voxel_size_um)


def label_stats(labels: np.ndarray) -> float:
    """Fraction of vessel voxels: count(vessel) / count(all)."""
    labels = np.asarray(labels)
    return float((labels > 0).mean())


# ---------------------------------------------------------------------------
# Dataset manifest: one INI section per stack.

USAGE_TAGS = ("Train", "Test")


@dataclass
class ManifestEntry:
    stack_id: str
    image: Path
    labels: Path
    voxel_size_um: tuple       # (x, y, z)
    source: str
    usage: str
    vessel_labels_pct: float | None = None
    dimension_vox: tuple | None = None   # (x, y, z)


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path | None = None

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def entry(self, stack_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.stack_id == stack_id:
                return e
        raise KeyError(stack_id)

    def split(self, usage: str):
        return [e for e in self.entries if e.usage == usage]


def parse_manifest(path) -> DatasetManifest:
    path = Path(path)
    cp = configparser.ConfigParser()
    try:
        with open(path) as f:
            cp.read_file(f)
    except configparser.DuplicateSectionError as e:
        raise ManifestError(f"{path}: duplicate stack id: {e}") from e
    except configparser.Error as e:
        raise ManifestError(f"{path}: {e}") from e
    manifest = DatasetManifest(root=path.parent)
    for section in cp.sections():
        if not section.startswith("stack "):
            raise ManifestError(f"{path}: unknown section [{section}]")
        sid = section.split(None, 1)[1]
        s = cp[section]
        try:
            vox = tuple(float(v) for v in s["voxel_size_um"].split())
        except (KeyError, ValueError) as e:
            raise ManifestError(f"{path}: stack {sid}: bad voxel_size_um") from e
        if len(vox) != 3 or min(vox) <= 0:
            raise ManifestError(f"{path}: stack {sid}: voxel size needs 3 positive values")
        usage = s.get("usage", "Train")
        if usage not in USAGE_TAGS:
            raise ManifestError(f"{path}: stack {sid}: unknown usage tag {usage!r}")
        dim = None
        if "dimension_vox" in s:
            dim = tuple(int(v) for v in s["dimension_vox"].split())
        pct = float(s["vessel_labels_pct"]) if "vessel_labels_pct" in s else None
        manifest.entries.append(
            ManifestEntry(
                stack_id=sid,
                image=path.parent / s["image"],
                labels=path.parent / s["labels"],
                voxel_size_um=vox,
                source=s.get("source", ""),
                usage=usage,
                vessel_labels_pct=pct,
                dimension_vox=dim,
            )
        )
    ids = [e.stack_id for e in manifest.entries]
    if len(set(ids)) != len(ids):
        raise ManifestError(f"{path}: duplicate stack ids")
    return manifest
