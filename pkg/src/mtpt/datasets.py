"""Procedural labeled images: eight parametric shape families, rendered
anti-aliased at 3x32x32, plus domain-shifted variants of the same families.

Geometric shift (global rotation / rescale) is composed into the analytic
rasterization coordinates, photometric shift (brightness, contrast, additive
noise) is applied to the rendered pixels; neither touches the warp module's
code path. Every sampled parameter lands in the split manifest and
everything is bitwise reproducible from (spec, seed).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

CLASS_NAMES = ["disk", "square", "triangle", "cross", "ring", "stripes", "checker", "blobs"]
N_CLASSES = len(CLASS_NAMES)

DATA_MAGIC = b"MTPTDATA"
DATA_VERSION = 1


@dataclass(frozen=True)
class DomainSpec:
    """One target domain: how far its samples drift from the source render."""

    name: str
    rotation_max: float = 0.0  # radians; sampled U(-max, max)
    scale_range: tuple[float, float] = (1.0, 1.0)
    brightness_max: float = 0.0
    contrast_max: float = 0.0
    noise_sigma: float = 0.0
    background: str = "flat"  # flat | gradient | noise
    samples_per_class: int = 50

    def __post_init__(self) -> None:
        if self.background not in ("flat", "gradient", "noise"):
            raise ValueError(f"unknown background kind {self.background!r}")
        if not all(map(math.isfinite, (*self.scale_range, self.rotation_max))):
            raise ValueError("shift ranges must be finite")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        d["scale_range"] = tuple(d["scale_range"])
        return cls(**d)


BUILTIN_DOMAINS: dict[str, DomainSpec] = {
    "source": DomainSpec("source"),
    "geo-mild": DomainSpec("geo-mild", rotation_max=math.radians(15), scale_range=(0.9, 1.1)),
    "geo-hard": DomainSpec("geo-hard", rotation_max=math.radians(60), scale_range=(0.6, 1.4)),
    "photo": DomainSpec("photo", brightness_max=0.15, contrast_max=0.3, noise_sigma=0.08),
    "mixed": DomainSpec(
        "mixed",
        rotation_max=math.radians(30),
        scale_range=(0.8, 1.25),
        contrast_max=0.2,
        noise_sigma=0.05,
        background="gradient",
    ),
}


@dataclass(frozen=True)
class StyleParams:
    """Jitter ranges for the base renders."""

    size_range: tuple[float, float] = (0.45, 0.65)
    center_jitter: float = 0.15
    fg_range: tuple[float, float] = (0.55, 0.95)
    bg_range: tuple[float, float] = (0.05, 0.35)


@dataclass
class LabeledImage:
    image: np.ndarray  # (3, S, S) in [0, 1]
    label: int
    domain: str
    seed: int
    params: dict


_TRI_VERTS = np.array(
    [
        [math.cos(math.pi / 2), math.sin(math.pi / 2)],
        [math.cos(math.pi * 7 / 6), math.sin(math.pi * 7 / 6)],
        [math.cos(math.pi * 11 / 6), math.sin(math.pi * 11 / 6)],
    ]
)


def _indicator(class_id: int, zx: np.ndarray, zy: np.ndarray, shape_rng: dict) -> np.ndarray:
    """Coverage of the unit-frame shape family at points (zx, zy)."""
    name = CLASS_NAMES[class_id]
    if name == "disk":
        return (zx * zx + zy * zy <= 1.0).astype(np.float64)
    if name == "square":
        return (np.maximum(np.abs(zx), np.abs(zy)) <= 0.82).astype(np.float64)
    if name == "triangle":
        inside = np.ones_like(zx, dtype=bool)
        v = _TRI_VERTS * 1.15
        for i in range(3):
            ax, ay = v[i]
            bx, by = v[(i + 1) % 3]
            cross = (bx - ax) * (zy - ay) - (by - ay) * (zx - ax)
            inside &= cross >= 0
        return inside.astype(np.float64)
    if name == "cross":
        bar = 0.32
        h = (np.abs(zx) <= 1.0) & (np.abs(zy) <= bar)
        vbar = (np.abs(zy) <= 1.0) & (np.abs(zx) <= bar)
        return (h | vbar).astype(np.float64)
    if name == "ring":
        r2 = zx * zx + zy * zy
        return ((r2 <= 1.0) & (r2 >= 0.55 * 0.55)).astype(np.float64)
    if name == "stripes":
        phi0 = math.pi / 6
        t = math.cos(phi0) * zx + math.sin(phi0) * zy
        pattern = np.sin(shape_rng["freq"] * math.pi * t) > 0
        box = np.maximum(np.abs(zx), np.abs(zy)) <= 1.0
        return (pattern & box).astype(np.float64)
    if name == "checker":
        k = shape_rng["freq"]
        pattern = np.sin(k * math.pi * zx) * np.sin(k * math.pi * zy) > 0
        box = np.maximum(np.abs(zx), np.abs(zy)) <= 1.0
        return (pattern & box).astype(np.float64)
    if name == "blobs":
        d = 0.55
        ox, oy = d * math.cos(math.pi / 4), d * math.sin(math.pi / 4)
        b1 = (zx - ox) ** 2 + (zy - oy) ** 2 <= 0.45 * 0.45
        b2 = (zx + ox) ** 2 + (zy + oy) ** 2 <= 0.45 * 0.45
        return (b1 | b2).astype(np.float64)
    raise ValueError(f"class_id {class_id} out of range")


def render_class(
    class_id: int,
    style: StyleParams,
    rng: np.random.Generator,
    *,
    geom: tuple[float, float] = (0.0, 1.0),
    background: str = "flat",
    image_size: int = 32,
    supersample: int = 2,
) -> tuple[np.ndarray, dict]:
    """Rasterize one jittered sample of a shape family.

    geom = (rotation, scale) is composed into the sampling coordinates, so a
    zero shift is exactly the base render. Returns (image, sampled params).
    """
    if not 0 <= class_id < N_CLASSES:
        raise ValueError(f"class_id must be < {N_CLASSES}, got {class_id}")
    size = float(rng.uniform(*style.size_range))
    cx = float(rng.uniform(-style.center_jitter, style.center_jitter))
    cy = float(rng.uniform(-style.center_jitter, style.center_jitter))
    fg = rng.uniform(*style.fg_range, size=3)
    bg = rng.uniform(*style.bg_range, size=3)
    shape_rng = {"freq": float(rng.uniform(1.8, 2.6))}

    ss = image_size * supersample
    coords = -1.0 + (2.0 * np.arange(ss) + 1.0) / ss
    gx, gy = np.meshgrid(coords, coords)  # gx varies along columns

    rot, scale = geom
    if rot != 0.0 or scale != 1.0:
        c, s = math.cos(rot), math.sin(rot)
        qx = (c * gx + s * gy) / scale
        qy = (-s * gx + c * gy) / scale
    else:
        qx, qy = gx, gy
    zx = (qx - cx) / size
    zy = (qy - cy) / size

    cover = _indicator(class_id, zx, zy, shape_rng)
    cover = cover.reshape(image_size, supersample, image_size, supersample).mean(axis=(1, 3))

    if background == "flat":
        bg_field = np.broadcast_to(bg[:, None, None], (3, image_size, image_size)).copy()
        bg_params: dict = {}
    elif background == "gradient":
        ang = float(rng.uniform(0.0, 2.0 * math.pi))
        base = -1.0 + (2.0 * np.arange(image_size) + 1.0) / image_size
        bx, by = np.meshgrid(base, base)
        ramp = 0.15 * (math.cos(ang) * bx + math.sin(ang) * by)
        bg_field = bg[:, None, None] + ramp[None]
        bg_params = {"gradient_angle": ang}
    else:  # noise
        bg_field = bg[:, None, None] + rng.uniform(-0.08, 0.08, size=(3, image_size, image_size))
        bg_params = {}

    img = cover[None] * fg[:, None, None] + (1.0 - cover[None]) * bg_field
    img = np.clip(img, 0.0, 1.0)
    params = {
        "size": size,
        "center": [cx, cy],
        "fg": fg.tolist(),
        "bg": bg.tolist(),
        "freq": shape_rng["freq"],
        **bg_params,
    }
    return img, params


@dataclass
class Split:
    images: np.ndarray  # (n, 3, S, S)
    labels: np.ndarray  # (n,)
    domain: str
    seed: int
    manifest: dict


def gen_split(
    spec: DomainSpec,
    n_per_class: int | None = None,
    seed: int = 0,
    *,
    style: StyleParams = StyleParams(),
    image_size: int = 32,
) -> Split:
    """Generate exactly n_per_class samples per class, class-major order.

    Per-sample rngs derive from (seed, class, k), so generation is
    order-independent and bitwise reproducible.
    """
    n_pc = spec.samples_per_class if n_per_class is None else int(n_per_class)
    if n_pc < 1:
        raise ValueError("n_per_class must be >= 1")
    n = n_pc * N_CLASSES
    images = np.empty((n, 3, image_size, image_size), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    samples: list[dict] = []
    idx = 0
    for c in range(N_CLASSES):
        for k in range(n_pc):
            sseq = np.random.SeedSequence([seed, c, k])
            rng = np.random.default_rng(sseq)
            sample_seed = int(sseq.generate_state(1)[0])
            shift: dict = {}
            rot, scale = 0.0, 1.0
            if spec.rotation_max > 0.0:
                rot = float(rng.uniform(-spec.rotation_max, spec.rotation_max))
                shift["rotation"] = rot
            if spec.scale_range != (1.0, 1.0):
                scale = float(rng.uniform(*spec.scale_range))
                shift["scale"] = scale
            img, params = render_class(
                c, style, rng, geom=(rot, scale), background=spec.background,
                image_size=image_size,
            )
            if spec.contrast_max > 0.0:
                contrast = float(rng.uniform(1.0 - spec.contrast_max, 1.0 + spec.contrast_max))
                img = (img - 0.5) * contrast + 0.5
                shift["contrast"] = contrast
            if spec.brightness_max > 0.0:
                brightness = float(rng.uniform(-spec.brightness_max, spec.brightness_max))
                img = img + brightness
                shift["brightness"] = brightness
            if spec.noise_sigma > 0.0:
                img = img + spec.noise_sigma * rng.standard_normal(img.shape)
                shift["noise_sigma"] = spec.noise_sigma
            images[idx] = np.clip(img, 0.0, 1.0)
            labels[idx] = c
            samples.append(
                {"index": idx, "label": c, "seed": sample_seed, "style": params, "shift": shift}
            )
            idx += 1
    manifest = {
        "spec": spec.to_dict(),
        "seed": seed,
        "n_samples": n,
        "n_classes": N_CLASSES,
        "class_names": CLASS_NAMES,
        "image_shape": [3, image_size, image_size],
        "samples": samples,
    }
    return Split(images, labels, spec.name, seed, manifest)


def render_sample(class_id: int, seed: int, spec: DomainSpec | None = None) -> LabeledImage:
    """One-off render, mainly for tests and docs."""
    spec = spec or BUILTIN_DOMAINS["source"]
    split = gen_split(spec, n_per_class=1, seed=seed)
    i = class_id  # class-major with one sample per class
    return LabeledImage(split.images[i], class_id, spec.name, seed, split.manifest["samples"][i])


def save_split(path, split: Split, manifest_path=None) -> Path:
    """Write header JSON + raw little-endian labels and image tensors."""
    path = Path(path)
    header = {k: v for k, v in split.manifest.items() if k != "samples"}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(DATA_MAGIC)
        f.write(struct.pack("<I", DATA_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(split.labels.astype("<i8").tobytes())
        f.write(split.images.astype("<f8").tobytes())
    mpath = Path(manifest_path) if manifest_path else path.with_suffix(".manifest.json")
    mpath.write_text(json.dumps(split.manifest, sort_keys=True, indent=2))
    return path


def load_split(path) -> Split:
    path = Path(path)
    blob = path.read_bytes()
    if blob[: len(DATA_MAGIC)] != DATA_MAGIC:
        raise ValueError(f"{path}: bad dataset magic")
    off = len(DATA_MAGIC)
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != DATA_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    header = json.loads(blob[off : off + hlen].decode("utf-8"))
    off += hlen
    n = header["n_samples"]
    shape = tuple(header["image_shape"])
    labels = np.frombuffer(blob, dtype="<i8", count=n, offset=off).astype(np.int64)
    off += 8 * n
    count = n * int(np.prod(shape))
    images = (
        np.frombuffer(blob, dtype="<f8", count=count, offset=off)
        .reshape((n,) + shape)
        .astype(np.float64)
    )
    manifest = dict(header)
    mpath = path.with_suffix(".manifest.json")
    if mpath.exists():
        manifest = json.loads(mpath.read_text())
    return Split(images, labels, header["spec"]["name"], header["seed"], manifest)
