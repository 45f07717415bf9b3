"""Dataset layout, loading, toy domain pairs and batching.

Layout on disk::

    <root>/<domain>/manifest.json
    <root>/<domain>/<split>/<class>/<id>.npy      # (N, 3) little-endian float32

Raw ``<id>.f32`` files (headerless float32 triplets) are also readable.
"""

import json
import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from .geometry import DEFAULT_CLOUD_SIZE, DomainTag, PointCloud, normalize_cloud, resample_cloud

DATA_ROOT_ENV = "PCDA_DATA_ROOT"
SPLITS = ("train", "test")

POINTDA_CLASSES = (
    "bathtub", "bed", "bookshelf", "cabinet", "chair",
    "lamp", "monitor", "plant", "sofa", "table",
)

# per-class sample counts of the three PointDA-10 domains, in POINTDA_CLASSES order
POINTDA_COUNTS = {
    "modelnet": {
        "train": (106, 515, 572, 200, 889, 124, 465, 240, 680, 392),
        "test": (50, 100, 100, 86, 100, 20, 100, 100, 100, 100),
    },
    "shapenet": {
        "train": (599, 167, 310, 1076, 4612, 1620, 762, 158, 2198, 5876),
        "test": (85, 23, 50, 126, 662, 232, 112, 30, 330, 842),
    },
    "scannet": {
        "train": (98, 329, 464, 650, 2578, 161, 210, 88, 495, 1037),
        "test": (26, 85, 146, 149, 801, 41, 61, 25, 134, 301),
    },
}
DOMAIN_ALIASES = {"M": "modelnet", "S": "shapenet", "S*": "scannet"}


def default_data_root() -> Optional[Path]:
    value = os.environ.get(DATA_ROOT_ENV)
    return Path(value) if value else None


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    """Class list, per-split file lists and recorded per-class counts of one domain."""

    domain_name: str
    classes: List[str]
    splits: Dict[str, Dict[str, List[str]]] = field(default_factory=dict)
    counts: Dict[str, Dict[str, int]] = field(default_factory=dict)
    cloud_size: int = DEFAULT_CLOUD_SIZE

    def total(self, split: str) -> int:
        return sum(self.counts.get(split, {}).values())

    def class_index(self, name: str) -> int:
        return self.classes.index(name)

    def to_json(self) -> str:
        return json.dumps(
            {"domain_name": self.domain_name, "classes": self.classes, "splits": self.splits,
             "counts": self.counts, "cloud_size": self.cloud_size},
            indent=1, sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        data = json.loads(text)
        return cls(data["domain_name"], list(data["classes"]), data.get("splits", {}),
                   data.get("counts", {}), int(data.get("cloud_size", DEFAULT_CLOUD_SIZE)))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"manifest not found: {path}")
        return cls.from_json(path.read_text())

    @classmethod
    def pointda(cls, domain: str, cloud_size: int = DEFAULT_CLOUD_SIZE) -> "DatasetManifest":
        """Expected-count manifest for a PointDA-10 domain (``M``, ``S``, ``S*`` or full name).

        File lists are left empty and discovered from the directory at load time.
        """
        name = DOMAIN_ALIASES.get(domain, domain)
        if name not in POINTDA_COUNTS:
            raise ValueError(f"unknown PointDA-10 domain {domain!r}")
        counts = {split: dict(zip(POINTDA_CLASSES, POINTDA_COUNTS[name][split])) for split in SPLITS}
        return cls(name, list(POINTDA_CLASSES), {}, counts, cloud_size)

    @classmethod
    def from_directory(cls, root, domain: str, classes: Optional[Sequence[str]] = None,
                       cloud_size: int = DEFAULT_CLOUD_SIZE) -> "DatasetManifest":
        base = Path(root) / domain
        if classes is None:
            found = {p.name for split in SPLITS if (base / split).is_dir() for p in (base / split).iterdir() if p.is_dir()}
            classes = [c for c in POINTDA_CLASSES if c in found] + sorted(found - set(POINTDA_CLASSES))
        splits, counts = {}, {}
        for split in SPLITS:
            if not (base / split).is_dir():
                continue
            splits[split] = {c: _list_cloud_files(base, split, c) for c in classes}
            counts[split] = {c: len(v) for c, v in splits[split].items()}
        return cls(domain, list(classes), splits, counts, cloud_size)


def _list_cloud_files(base: Path, split: str, cls_name: str) -> List[str]:
    folder = base / split / cls_name
    if not folder.is_dir():
        return []
    return sorted(f"{split}/{cls_name}/{p.name}" for p in folder.iterdir() if p.suffix in (".npy", ".f32"))


# --------------------------------------------------------------------------
# cloud files
# --------------------------------------------------------------------------

def write_cloud(path, points: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, np.asarray(points, dtype="<f4"), allow_pickle=False)
    return path


def read_cloud(path) -> np.ndarray:
    path = Path(path)
    try:
        if path.suffix == ".npy":
            arr = np.load(path, allow_pickle=False)
        else:
            arr = np.fromfile(path, dtype="<f4")
            sidecar = path.with_suffix(".json")
            shape = json.loads(sidecar.read_text())["shape"] if sidecar.is_file() else (-1, 3)
            arr = arr.reshape(shape)
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read point cloud {path}: {exc}") from exc
    if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] == 0:
        raise ValueError(f"point cloud {path} has shape {arr.shape}, expected (N, 3)")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"point cloud {path} contains non-finite coordinates")
    return arr


def _path_seed(rel: str) -> int:
    return zlib.crc32(rel.encode("utf-8"))


def _split_files(root, manifest: DatasetManifest, split: str):
    base = Path(root) / manifest.domain_name
    listed = manifest.splits.get(split)
    files = []
    for label, cls_name in enumerate(manifest.classes):
        names = listed.get(cls_name, []) if listed else _list_cloud_files(base, split, cls_name)
        expected = manifest.counts.get(split, {}).get(cls_name, len(names))
        if len(names) != expected:
            raise ValueError(
                f"count mismatch for {manifest.domain_name}/{split}/{cls_name}: "
                f"manifest records {expected}, found {len(names)} files")
        files.extend((rel, label) for rel in names)
    for rel, _ in files:
        if not (base / rel).is_file():
            raise FileNotFoundError(f"listed cloud file missing: {base / rel}")
    return base, sorted(files)


def _load_one(base: Path, rel: str, label: int, tag: DomainTag, cloud_size: int) -> PointCloud:
    raw = PointCloud(read_cloud(base / rel), label, DomainTag(tag))
    return resample_cloud(normalize_cloud(raw), cloud_size, _path_seed(rel))


def load_dataset(root, manifest: DatasetManifest, split: str = "train",
                 tag: DomainTag = DomainTag.SOURCE) -> Iterator[PointCloud]:
    """Yield normalised, resampled clouds of one split in lexicographic path order.

    Counts are checked against the manifest before anything is yielded.
    """
    base, files = _split_files(root, manifest, split)
    for rel, label in files:
        yield _load_one(base, rel, label, tag, manifest.cloud_size)


@dataclass
class CloudArrays:
    """Stacked clouds: ``points`` (M, N, 3) float32, ``labels`` (M,) int64 with -1 for unlabeled."""

    points: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.points.shape[0]

    @classmethod
    def from_clouds(cls, clouds: Sequence[PointCloud]) -> "CloudArrays":
        clouds = list(clouds)
        if not clouds:
            return cls(np.zeros((0, 0, 3), np.float32), np.zeros(0, np.int64))
        points = np.stack([c.points for c in clouds]).astype(np.float32)
        labels = np.array([-1 if c.label is None else c.label for c in clouds], dtype=np.int64)
        return cls(points, labels)

    def subset(self, idx) -> "CloudArrays":
        return CloudArrays(self.points[idx], self.labels[idx])

    def concat(self, other: "CloudArrays") -> "CloudArrays":
        return CloudArrays(np.concatenate([self.points, other.points]), np.concatenate([self.labels, other.labels]))


def load_arrays(root, manifest: DatasetManifest, split: str = "train",
                tag: DomainTag = DomainTag.SOURCE, workers: int = 1) -> CloudArrays:
    """Stack one split; ``workers`` > 1 reads files on a thread pool (order is unchanged)."""
    if workers <= 1:
        return CloudArrays.from_clouds(load_dataset(root, manifest, split, tag))
    base, files = _split_files(root, manifest, split)
    with ThreadPoolExecutor(workers) as pool:
        clouds = pool.map(lambda item: _load_one(base, item[0], item[1], tag, manifest.cloud_size), files)
        return CloudArrays.from_clouds(list(clouds))


# --------------------------------------------------------------------------
# toy domains
# --------------------------------------------------------------------------

TOY_SHAPES = ("box", "cylinder", "sphere_cap", "two_box")


@dataclass(frozen=True)
class ToyDomainSpec:
    """Procedural domain: shape classes plus a scan-style deformation.

    ``density_bias`` skews sampling toward the top of the object
    (probability proportional to normalised height ** density_bias),
    ``part_dropout`` removes a random horizontal slab covering that fraction
    of the object's height, ``jitter_sigma`` adds Gaussian noise.
    """

    name: str = "toy_source"
    classes: Sequence[str] = TOY_SHAPES
    density_bias: float = 0.0
    part_dropout: float = 0.0
    jitter_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.density_bias < 0:
            raise ValueError("density_bias must be >= 0")
        if not 0 <= self.part_dropout < 1:
            raise ValueError("part_dropout must lie in [0, 1)")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")
        unknown = set(self.classes) - set(TOY_SHAPES)
        if unknown:
            raise ValueError(f"unknown toy shapes {sorted(unknown)}; choose from {TOY_SHAPES}")


def _sample_box(rng, n, lo, hi):
    """Uniform samples on the surface of the axis-aligned box [lo, hi]."""
    size = hi - lo
    areas = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]] * 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = lo + rng.random((n, 3)) * size
    axis = face % 3
    side = np.where(face < 3, lo[axis], hi[axis])
    pts[np.arange(n), axis] = side
    return pts


def _sample_cylinder(rng, n, radius, height):
    side, cap = 2 * np.pi * radius * height, np.pi * radius ** 2
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.random(n) * 2 * np.pi
    r = np.where(part == 0, radius, radius * np.sqrt(rng.random(n)))
    z = np.where(part == 0, rng.random(n) * height, np.where(part == 1, 0.0, height))
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), z])


def _sample_sphere_cap(rng, n, radius, cap_height):
    # dome of a sphere centred at the origin, cut at z = radius - cap_height, plus its base disk
    z0 = radius - cap_height
    base_r = np.sqrt(radius ** 2 - z0 ** 2)
    dome, disk = 2 * np.pi * radius * cap_height, np.pi * base_r ** 2
    on_dome = rng.random(n) < dome / (dome + disk)
    theta = rng.random(n) * 2 * np.pi
    z = np.where(on_dome, z0 + rng.random(n) * cap_height, z0)  # uniform in z is uniform on a sphere zone
    ring = np.where(on_dome, np.sqrt(np.maximum(radius ** 2 - z ** 2, 0.0)), base_r * np.sqrt(rng.random(n)))
    return np.column_stack([ring * np.cos(theta), ring * np.sin(theta), z - z0])


def sample_shape(shape: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` uniform surface points of one random instance of ``shape``."""
    if shape == "box":
        dims = rng.uniform([0.6, 0.6, 0.3], [1.4, 1.4, 0.9])
        return _sample_box(rng, n, -dims / 2 * np.array([1, 1, 0]), dims * np.array([0.5, 0.5, 1]))
    if shape == "cylinder":
        return _sample_cylinder(rng, n, rng.uniform(0.3, 0.6), rng.uniform(0.8, 1.6))
    if shape == "sphere_cap":
        radius = rng.uniform(0.6, 1.0)
        return _sample_sphere_cap(rng, n, radius, radius * rng.uniform(0.5, 0.9))
    if shape == "two_box":
        base = rng.uniform([0.8, 0.8, 0.1], [1.4, 1.4, 0.3])
        top = rng.uniform([0.2, 0.2, 0.5], [0.5, 0.5, 1.0])
        lo1, hi1 = -base / 2 * np.array([1, 1, 0]), base * np.array([0.5, 0.5, 1])
        lo2 = np.array([-top[0] / 2, -top[1] / 2, base[2]])
        hi2 = lo2 + top
        a1 = 2 * (base[0] * base[1] + base[0] * base[2] + base[1] * base[2])
        a2 = 2 * (top[0] * top[1] + top[0] * top[2] + top[1] * top[2])
        n1 = int(rng.binomial(n, a1 / (a1 + a2)))
        return np.concatenate([_sample_box(rng, n1, lo1, hi1), _sample_box(rng, n - n1, lo2, hi2)])
    raise ValueError(f"unknown toy shape {shape!r}")


def toy_raw_cloud(shape: str, spec: ToyDomainSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """One deformed object before resampling (may hold fewer than ``n`` points)."""
    if spec.density_bias > 0:
        # rejection sampling against height ** density_bias
        pool = sample_shape(shape, 8 * n, rng)
        z = pool[:, 2]
        h = (z - z.min()) / max(z.max() - z.min(), 1e-12)
        keep = rng.random(pool.shape[0]) < h ** spec.density_bias
        pts = pool[keep]
        while pts.shape[0] < n:
            more = sample_shape(shape, 8 * n, rng)
            z = more[:, 2]
            h = (z - z.min()) / max(z.max() - z.min(), 1e-12)
            pts = np.concatenate([pts, more[rng.random(more.shape[0]) < h ** spec.density_bias]])
        pts = pts[:n]
    else:
        pts = sample_shape(shape, n, rng)
    if spec.part_dropout > 0:
        z = pts[:, 2]
        zmin, span = z.min(), z.max() - z.min()
        start = zmin + rng.random() * (1 - spec.part_dropout) * span
        inside = (z >= start) & (z <= start + spec.part_dropout * span)
        if inside.all():
            inside[0] = False
        pts = pts[~inside]
    if spec.jitter_sigma > 0:
        pts = pts + rng.normal(scale=spec.jitter_sigma, size=pts.shape)
    return pts


def _object_seed(spec_seed: int, split: str, cls_name: str, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([spec_seed, SPLITS.index(split), zlib.crc32(cls_name.encode()), index])


def make_toy_domain(spec: ToyDomainSpec, per_class: int, root, cloud_size: int = 256) -> DatasetManifest:
    if per_class <= 0:
        raise ValueError(f"per_class must be positive, got {per_class}")
    base = Path(root) / spec.name
    manifest = DatasetManifest(spec.name, list(spec.classes), cloud_size=cloud_size)
    sizes = {"train": per_class, "test": math.ceil(per_class / 4)}
    for split, count in sizes.items():
        manifest.splits[split] = {}
        for cls_name in spec.classes:
            files = []
            for i in range(count):
                rng = np.random.default_rng(_object_seed(spec.seed, split, cls_name, i))
                raw = toy_raw_cloud(cls_name, spec, cloud_size, rng)
                cloud = PointCloud(raw, spec.classes.index(cls_name))
                pts = resample_cloud(cloud, cloud_size, int(rng.integers(2 ** 31))).points
                rel = f"{split}/{cls_name}/{i:05d}.npy"
                write_cloud(base / rel, pts)
                files.append(rel)
            manifest.splits[split][cls_name] = files
        manifest.counts[split] = {c: len(v) for c, v in manifest.splits[split].items()}
    manifest.save(base / "manifest.json")
    return manifest


def make_toy_pair(spec_source: ToyDomainSpec, spec_target: ToyDomainSpec, per_class: int, root,
                  cloud_size: int = 256):
    """Materialise a source and a target toy domain under ``root``; returns both manifests."""
    if list(spec_source.classes) != list(spec_target.classes):
        raise ValueError("source and target toy domains must share the class list")
    if spec_source.name == spec_target.name:
        raise ValueError("source and target toy domains need distinct names")
    return (make_toy_domain(spec_source, per_class, root, cloud_size),
            make_toy_domain(spec_target, per_class, root, cloud_size))


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------

@dataclass
class Batch:
    points: np.ndarray
    labels: np.ndarray
    z: Optional[np.ndarray] = None
    index: Optional[np.ndarray] = None

    def __len__(self):
        return self.points.shape[0]


class BatchIterator:
    """Seeded epoch-wise shuffling over stacked clouds; the short final batch is kept.

    With ``paired_z`` every batch carries fresh standard-normal mode vectors.
    """

    def __init__(self, data: CloudArrays, batch_size: int, seed: int, paired_z: bool = False,
                 mode_dim: int = 64, shuffle: bool = True):
        if batch_size <= 0:
            raise ValueError(f"batch_size must be positive, got {batch_size}")
        self.data = data
        self.batch_size = batch_size
        self.seed = seed
        self.paired_z = paired_z
        self.mode_dim = mode_dim
        self.shuffle = shuffle

    def __len__(self):
        return math.ceil(len(self.data) / self.batch_size)

    def epoch(self, epoch: int) -> Iterator[Batch]:
        rng = np.random.default_rng([self.seed, epoch])
        n = len(self.data)
        order = rng.permutation(n) if self.shuffle else np.arange(n)
        for start in range(0, n, self.batch_size):
            idx = order[start:start + self.batch_size]
            z = rng.standard_normal((idx.size, self.mode_dim)).astype(np.float32) if self.paired_z else None
            yield Batch(self.data.points[idx], self.data.labels[idx], z, idx)

    def __iter__(self):
        return self.epoch(0)


def batch_iterator(root, manifest: DatasetManifest, split: str, batch_size: int, seed: int,
                   paired_z: bool = False, mode_dim: int = 64) -> BatchIterator:
    return BatchIterator(load_arrays(root, manifest, split), batch_size, seed, paired_z, mode_dim)
