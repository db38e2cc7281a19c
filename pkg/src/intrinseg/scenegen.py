"""Procedural desk-scale scene generator with exact ground truth.

An orthographic top-down software rasterizer shades parametric objects
(ground plane, spheres, boxes, cylinders) with a Lambertian model, so
reflectance, shading and labels are exact by construction.  Samples are
persisted in the bit-exact "ISEG1" container format.
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import Image, LabelMap, Sample, validate_sample

MAGIC = b"ISEG"
VERSION = 1
DTYPE_F32 = 0x01
DTYPE_U8 = 0x02

DEFAULT_CANVAS = (96, 128)
DEFAULT_NUM_CLASSES = 8
DEFAULT_CLASS_NAMES = [
    "ground",
    "sphere-bush",
    "box-hedge",
    "cylinder-trunk",
    "fence",
    "rock",
    "pot",
    "path",
]
# class id -> rasterizer primitive for the default class set
DEFAULT_CLASS_SHAPES = [
    "ground-plane",
    "sphere",
    "box",
    "cylinder",
    "box",
    "sphere",
    "cylinder",
    "box",
]
# class id -> characteristic base color.  Classes have recognizable
# albedo (jittered per object), so reflectance carries class information
# that the shading-confounded RGB image does not expose as cleanly.
CLASS_PALETTE = [
    (0.35, 0.30, 0.20),  # ground
    (0.20, 0.55, 0.15),  # sphere-bush
    (0.15, 0.40, 0.30),  # box-hedge
    (0.45, 0.30, 0.15),  # cylinder-trunk
    (0.60, 0.55, 0.45),  # fence
    (0.50, 0.50, 0.55),  # rock
    (0.65, 0.35, 0.25),  # pot
    (0.70, 0.65, 0.55),  # path
]
ALBEDO_JITTER = 0.12


def class_albedo(class_id: int, num_classes: int, rng: np.random.Generator):
    """Class base color plus per-object jitter, clamped to [0.05, 0.95]."""
    base = np.array(CLASS_PALETTE[class_id % len(CLASS_PALETTE)])
    if num_classes > len(CLASS_PALETTE):
        # extra classes rotate the palette so they stay distinguishable
        base = np.roll(base, class_id // len(CLASS_PALETTE))
    jitter = rng.uniform(-ALBEDO_JITTER, ALBEDO_JITTER, size=3)
    return tuple(float(v) for v in np.clip(base + jitter, 0.05, 0.95))


class ContainerFormatError(ValueError):
    """File is not a valid ISEG1 sample container."""


class SceneSpecError(ValueError):
    """Scene description violates its invariants."""


@dataclass(frozen=True)
class LightRig:
    """Directional light plus ambient floor."""

    direction: tuple[float, float, float]
    ambient: float
    intensity: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise SceneSpecError(f"light direction must be unit length, got {d}")
        if not 0.0 <= self.ambient <= 0.5:
            raise SceneSpecError(f"ambient {self.ambient} outside [0, 0.5]")
        if not 0.0 < self.intensity <= 1.5:
            raise SceneSpecError(f"intensity {self.intensity} outside (0, 1.5]")
        object.__setattr__(self, "direction", tuple(float(v) for v in d))


@dataclass(frozen=True)
class SceneObject:
    shape: str  # ground-plane | sphere | box | cylinder
    class_id: int
    albedo: tuple[float, float, float]
    position: tuple[float, float] = (0.0, 0.0)
    size: tuple[float, ...] = ()
    tilt: tuple[float, float] = (0.0, 0.0)  # box top-normal tilt

    def __post_init__(self):
        if self.shape not in ("ground-plane", "sphere", "box", "cylinder"):
            raise SceneSpecError(f"unknown shape {self.shape!r}")
        for ch in self.albedo:
            if not 0.05 <= ch <= 0.95:
                raise SceneSpecError(f"albedo channel {ch} outside [0.05, 0.95]")


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    objects: tuple[SceneObject, ...]
    light_rigs: tuple[LightRig, ...]
    num_classes: int = DEFAULT_NUM_CLASSES
    canvas: tuple[int, int] = DEFAULT_CANVAS

    def __post_init__(self):
        if not self.objects:
            raise SceneSpecError("scene needs at least one object")
        if self.objects[0].shape != "ground-plane":
            raise SceneSpecError("ground plane must be present and listed first")
        for obj in self.objects:
            if not 0 <= obj.class_id < self.num_classes:
                raise SceneSpecError(
                    f"class id {obj.class_id} outside [0, {self.num_classes})"
                )
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "light_rigs", tuple(self.light_rigs))


def lambertian(normal, rig: LightRig) -> float:
    """Shading value for one unit surface normal under a light rig."""
    n = np.asarray(normal, dtype=np.float64)
    if abs(np.linalg.norm(n) - 1.0) > 1e-6:
        raise ValueError(f"normal must be unit length, got norm {np.linalg.norm(n):.6f}")
    s = np.asarray(rig.direction)
    return float(np.clip(rig.ambient + rig.intensity * max(0.0, float(n @ s)), 0.0, 1.0))


def _object_surface(obj: SceneObject, xs: np.ndarray, ys: np.ndarray):
    """Per-pixel (mask, height, normal) for one primitive.

    xs/ys are world coordinate grids; returns normal as (3, H, W).
    """
    h, w = xs.shape
    normals = np.zeros((3, h, w))
    if obj.shape == "ground-plane":
        mask = np.ones((h, w), dtype=bool)
        z = np.zeros((h, w))
        normals[2] = 1.0
        return mask, z, normals

    cx, cy = obj.position
    if obj.shape == "sphere":
        (radius,) = obj.size
        d2 = (xs - cx) ** 2 + (ys - cy) ** 2
        mask = d2 <= radius ** 2
        z = np.sqrt(np.maximum(radius ** 2 - d2, 0.0))
        normals[0] = np.where(mask, (xs - cx) / radius, 0.0)
        normals[1] = np.where(mask, (ys - cy) / radius, 0.0)
        normals[2] = np.where(mask, z / radius, 0.0)
        return mask, z, normals

    if obj.shape == "box":
        sx, sy, height = obj.size
        mask = (np.abs(xs - cx) <= sx) & (np.abs(ys - cy) <= sy)
        z = np.where(mask, height, 0.0)
        top = np.array([obj.tilt[0], obj.tilt[1], 1.0])
        top = top / np.linalg.norm(top)
        for i in range(3):
            normals[i] = np.where(mask, top[i], 0.0)
        return mask, z, normals

    # horizontal cylinder, axis along y
    radius, half_len = obj.size
    dx = xs - cx
    mask = (np.abs(dx) <= radius) & (np.abs(ys - cy) <= half_len)
    zr = np.sqrt(np.maximum(radius ** 2 - dx ** 2, 0.0))
    z = np.where(mask, zr, 0.0)
    normals[0] = np.where(mask, dx / radius, 0.0)
    normals[2] = np.where(mask, zr / radius, 0.0)
    return mask, z, normals


def render_scene(spec: SceneSpec, rig_index: int) -> Sample:
    """Rasterize one scene under one light rig.

    Deterministic given (spec.seed, rig_index).  Camera jitter is derived
    from the scene seed only, so reflectance and labels are bit-identical
    across the rigs of one scene.
    """
    if not 0 <= rig_index < len(spec.light_rigs):
        raise SceneSpecError(f"rig index {rig_index} out of range")
    rig = spec.light_rigs[rig_index]
    h, w = spec.canvas

    jitter_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, 0xCA])))
    jx, jy = jitter_rng.uniform(-2.0, 2.0, size=2)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    xs += 0.5 + jx
    ys += 0.5 + jy

    best_z = np.full((h, w), -np.inf)
    albedo = np.zeros((3, h, w))
    normals = np.zeros((3, h, w))
    labels = np.zeros((h, w), dtype=np.uint8)
    for obj in spec.objects:
        mask, z, n = _object_surface(obj, xs, ys)
        take = mask & (z > best_z)
        best_z[take] = z[take]
        labels[take] = obj.class_id
        for c in range(3):
            albedo[c][take] = obj.albedo[c]
            normals[c][take] = n[c][take]

    if not np.all(np.isfinite(best_z)):
        raise SceneSpecError("some pixels are covered by no object")

    light = np.asarray(rig.direction).reshape(3, 1, 1)
    ndots = np.maximum((normals * light).sum(axis=0), 0.0)
    shading = np.clip(rig.ambient + rig.intensity * ndots, 0.0, 1.0)

    reflectance = albedo.astype(np.float32)
    shading = shading.astype(np.float32)[None]
    image = reflectance * shading  # exact product in float32
    return Sample(
        image=Image(image),
        reflectance=Image(reflectance),
        shading=Image(shading),
        labels=LabelMap(labels, spec.num_classes),
        scene_id=spec.seed,
        rig_id=rig_index,
        camera_id=0,
    )


# -- procedural content -----------------------------------------------------


def class_names_for(num_classes: int) -> list[str]:
    names = list(DEFAULT_CLASS_NAMES[:num_classes])
    while len(names) < num_classes:
        names.append(f"class{len(names)}")
    return names


def _shape_for_class(class_id: int, num_classes: int) -> str:
    if num_classes == DEFAULT_NUM_CLASSES:
        return DEFAULT_CLASS_SHAPES[class_id]
    return ("sphere", "box", "cylinder")[(class_id - 1) % 3]


def random_scene_spec(
    master_seed: int,
    scene_id: int,
    rigs: tuple[LightRig, ...],
    num_classes: int = DEFAULT_NUM_CLASSES,
    canvas: tuple[int, int] = DEFAULT_CANVAS,
) -> SceneSpec:
    """Seed-derived scene: mandatory ground plane plus 3-7 objects."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([master_seed, scene_id])))
    h, w = canvas

    objects = [SceneObject("ground-plane", 0, class_albedo(0, num_classes, rng))]
    for _ in range(int(rng.integers(3, 8))):
        class_id = int(rng.integers(1, num_classes)) if num_classes > 1 else 0
        shape = _shape_for_class(class_id, num_classes) if class_id else "ground-plane"
        pos = (float(rng.uniform(0, w)), float(rng.uniform(0, h)))
        scale = min(h, w)
        if shape == "sphere":
            size = (float(rng.uniform(0.06, 0.22) * scale),)
        elif shape == "box":
            size = (
                float(rng.uniform(0.05, 0.25) * scale),
                float(rng.uniform(0.05, 0.25) * scale),
                float(rng.uniform(0.02, 0.3) * scale),
            )
        else:
            size = (
                float(rng.uniform(0.04, 0.12) * scale),
                float(rng.uniform(0.15, 0.45) * scale),
            )
        tilt = tuple(rng.uniform(-0.6, 0.6, size=2)) if shape == "box" else (0.0, 0.0)
        albedo = class_albedo(class_id, num_classes, rng)
        objects.append(SceneObject(shape, class_id, albedo, pos, size, tilt))

    return SceneSpec(
        seed=scene_id,
        objects=tuple(objects),
        light_rigs=rigs,
        num_classes=num_classes,
        canvas=canvas,
    )


def random_light_rigs(master_seed: int, count: int) -> tuple[LightRig, ...]:
    """Shared light conditions, one per rig index, strongly varied."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([master_seed, 0x11F])))
    rigs = []
    for _ in range(count):
        d = rng.normal(size=3)
        d[2] = abs(d[2]) + 0.3  # keep the light above the horizon
        d = d / np.linalg.norm(d)
        rigs.append(
            LightRig(
                direction=tuple(d),
                ambient=float(rng.uniform(0.05, 0.4)),
                intensity=float(rng.uniform(0.4, 1.1)),
            )
        )
    return tuple(rigs)


# -- ISEG1 container --------------------------------------------------------


def _write_array(fh, arr: np.ndarray, dtype_tag: int):
    fh.write(struct.pack("<BB", dtype_tag, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    if dtype_tag == DTYPE_F32:
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    else:
        fh.write(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def _read_array(fh, path) -> np.ndarray:
    head = fh.read(2)
    if len(head) != 2:
        raise ContainerFormatError(f"{path}: truncated record header")
    dtype_tag, rank = struct.unpack("<BB", head)
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    count = int(np.prod(dims))
    if dtype_tag == DTYPE_F32:
        payload = fh.read(4 * count)
        if len(payload) != 4 * count:
            raise ContainerFormatError(f"{path}: truncated float payload")
        return np.frombuffer(payload, dtype="<f4").reshape(dims)
    if dtype_tag == DTYPE_U8:
        payload = fh.read(count)
        if len(payload) != count:
            raise ContainerFormatError(f"{path}: truncated byte payload")
        return np.frombuffer(payload, dtype=np.uint8).reshape(dims)
    raise ContainerFormatError(f"{path}: unknown dtype tag 0x{dtype_tag:02x}")


def write_sample(sample: Sample, path: str | Path):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", VERSION))
        _write_array(fh, sample.image.data, DTYPE_F32)
        _write_array(fh, sample.reflectance.data, DTYPE_F32)
        _write_array(fh, sample.shading.data, DTYPE_F32)
        _write_array(fh, sample.labels.data, DTYPE_U8)


def read_sample(path: str | Path, num_classes: int, scene_id: int = 0, rig_id: int = 0) -> Sample:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ContainerFormatError(f"{path}: bad magic, not an ISEG1 container")
        (version,) = struct.unpack("<B", fh.read(1))
        if version != VERSION:
            raise ContainerFormatError(f"{path}: unsupported version {version}")
        image = _read_array(fh, path)
        reflectance = _read_array(fh, path)
        shading = _read_array(fh, path)
        labels = _read_array(fh, path)
    return Sample(
        image=Image(image),
        reflectance=Image(reflectance),
        shading=Image(shading),
        labels=LabelMap(labels, num_classes),
        scene_id=scene_id,
        rig_id=rig_id,
    )


# -- dataset + manifest -----------------------------------------------------


@dataclass
class ManifestEntry:
    sample_id: int
    split: str  # train | test
    scene_id: int
    rig_id: int
    filename: str


@dataclass
class DatasetManifest:
    format_version: int
    num_samples: int
    height: int
    width: int
    num_classes: int
    class_names: list[str]
    entries: list[ManifestEntry]
    class_pixels_train: np.ndarray
    class_pixels_all: np.ndarray

    def entries_for(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def write(self, path: str | Path):
        lines = [
            f"format_version={self.format_version}",
            f"num_samples={self.num_samples}",
            f"height={self.height}",
            f"width={self.width}",
            f"num_classes={self.num_classes}",
            "class_names=" + ",".join(self.class_names),
            "class_pixels_train=" + ",".join(str(int(v)) for v in self.class_pixels_train),
            "class_pixels_all=" + ",".join(str(int(v)) for v in self.class_pixels_all),
            "samples:",
        ]
        for e in self.entries:
            lines.append(f"{e.sample_id} {e.split} {e.scene_id} {e.rig_id} {e.filename}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        lines = Path(path).read_text().splitlines()
        header: dict[str, str] = {}
        entries: list[ManifestEntry] = []
        in_samples = False
        for line in lines:
            if not line:
                continue
            if line == "samples:":
                in_samples = True
                continue
            if in_samples:
                sid, split, scene, rig, fname = line.split()
                entries.append(ManifestEntry(int(sid), split, int(scene), int(rig), fname))
            else:
                key, value = line.split("=", 1)
                header[key] = value
        return cls(
            format_version=int(header["format_version"]),
            num_samples=int(header["num_samples"]),
            height=int(header["height"]),
            width=int(header["width"]),
            num_classes=int(header["num_classes"]),
            class_names=header["class_names"].split(","),
            entries=entries,
            class_pixels_train=np.array([int(v) for v in header["class_pixels_train"].split(",")]),
            class_pixels_all=np.array([int(v) for v in header["class_pixels_all"].split(",")]),
        )


def scene_split(num_scenes: int, master_seed: int) -> dict[int, str]:
    """80/20 split by whole scene; never by individual frame."""
    if num_scenes < 2:
        raise SceneSpecError("need at least 2 scenes for a scene split")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([master_seed, 0x5B])))
    order = list(rng.permutation(num_scenes))
    n_test = max(1, round(0.2 * num_scenes))
    test = set(order[:n_test])
    return {s: ("test" if s in test else "train") for s in range(num_scenes)}


def _max_workers() -> int:
    cap = os.environ.get("ISEG_THREADS")
    if cap:
        return max(1, int(cap))
    return min(8, os.cpu_count() or 1)


def generate_dataset(
    num_scenes: int = 40,
    rigs_per_scene: int = 5,
    out_path: str | Path = "dataset",
    master_seed: int = 0,
    num_classes: int = DEFAULT_NUM_CLASSES,
    canvas: tuple[int, int] = DEFAULT_CANVAS,
) -> DatasetManifest:
    """Render and persist the full dataset; the manifest is written last.

    Rendering parallelizes across scenes (capped by ISEG_THREADS); all
    file writes happen on the calling thread, in a fixed order.
    """
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    rigs = random_light_rigs(master_seed, rigs_per_scene)
    split = scene_split(num_scenes, master_seed)
    specs = [
        random_scene_spec(master_seed, scene, rigs, num_classes, canvas)
        for scene in range(num_scenes)
    ]

    jobs = [(spec, rig) for spec in specs for rig in range(rigs_per_scene)]
    with ThreadPoolExecutor(max_workers=_max_workers()) as pool:
        samples = list(pool.map(lambda j: render_scene(j[0], j[1]), jobs))

    entries: list[ManifestEntry] = []
    pixels_train = np.zeros(num_classes, dtype=np.int64)
    pixels_all = np.zeros(num_classes, dtype=np.int64)
    for sample_id, ((spec, rig), sample) in enumerate(zip(jobs, samples)):
        violations = validate_sample(sample, tol=1e-6)
        if violations:
            raise SceneSpecError(f"generated sample failed validation: {violations[0]}")
        fname = f"s{spec.seed:04d}_r{rig:02d}.iseg"
        write_sample(sample, out / fname)
        counts = np.bincount(sample.labels.data.ravel(), minlength=num_classes)
        pixels_all += counts
        if split[spec.seed] == "train":
            pixels_train += counts
        entries.append(ManifestEntry(sample_id, split[spec.seed], spec.seed, rig, fname))

    manifest = DatasetManifest(
        format_version=VERSION,
        num_samples=len(entries),
        height=canvas[0],
        width=canvas[1],
        num_classes=num_classes,
        class_names=class_names_for(num_classes),
        entries=entries,
        class_pixels_train=pixels_train,
        class_pixels_all=pixels_all,
    )
    manifest.write(out / "manifest.txt")
    return manifest


def load_dataset(data_dir: str | Path) -> tuple[DatasetManifest, list[Sample]]:
    data_dir = Path(data_dir)
    manifest = DatasetManifest.read(data_dir / "manifest.txt")
    samples = [
        read_sample(data_dir / e.filename, manifest.num_classes, e.scene_id, e.rig_id)
        for e in manifest.entries
    ]
    return manifest, samples
