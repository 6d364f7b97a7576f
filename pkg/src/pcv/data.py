"""Labeled point clouds: procedural shapes, OFF meshes, normalization, I/O."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, ParseError, UsageError
from .tensor import DTYPE

SHAPE_KINDS = ("sphere", "cube", "cylinder", "cone", "torus")
CLOUD_MAGIC = "pcv-cloud"
CLOUD_VERSION = 1


@dataclass
class PointCloud:
    points: np.ndarray
    label: int
    id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=DTYPE)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise FormatError(f"point cloud must be (n, 3), got {self.points.shape}")

    @property
    def n(self):
        return self.points.shape[0]


def sample_rng(seed, stream=0):
    """Independent generator for (seed, stream); streams never collide."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream)]))


# -- procedural shapes -------------------------------------------------------

def _sphere(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cube(rng, n):
    # six faces of [-1, 1]^3, equal area
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    side = np.where(face % 2 == 0, -1.0, 1.0)
    for a in range(3):
        rows = axis == a
        others = [b for b in range(3) if b != a]
        pts[rows, a] = side[rows]
        pts[rows, others[0]] = uv[rows, 0]
        pts[rows, others[1]] = uv[rows, 1]
    return pts


def _disk(rng, n, radius):
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, size=n))
    t = rng.uniform(0.0, 2 * np.pi, size=n)
    return r * np.cos(t), r * np.sin(t)


def _cylinder(rng, n, radius=0.5, height=2.0):
    side_area = 2 * np.pi * radius * height
    cap_area = np.pi * radius**2
    probs = np.array([side_area, cap_area, cap_area]) / (side_area + 2 * cap_area)
    part = rng.choice(3, size=n, p=probs)
    pts = np.empty((n, 3))
    side = part == 0
    t = rng.uniform(0.0, 2 * np.pi, size=side.sum())
    pts[side, 0] = radius * np.cos(t)
    pts[side, 1] = radius * np.sin(t)
    pts[side, 2] = rng.uniform(-height / 2, height / 2, size=side.sum())
    for cap, z in ((1, -height / 2), (2, height / 2)):
        rows = part == cap
        x, y = _disk(rng, rows.sum(), radius)
        pts[rows, 0], pts[rows, 1], pts[rows, 2] = x, y, z
    return pts


def _cone(rng, n, radius=1.0, height=2.0):
    slant = math.hypot(radius, height)
    side_area = np.pi * radius * slant
    base_area = np.pi * radius**2
    on_side = rng.uniform(0.0, side_area + base_area, size=n) < side_area
    pts = np.empty((n, 3))
    m = on_side.sum()
    # distance from apex grows like sqrt(u) for uniform area on the lateral surface
    s = np.sqrt(rng.uniform(0.0, 1.0, size=m))
    t = rng.uniform(0.0, 2 * np.pi, size=m)
    pts[on_side, 0] = radius * s * np.cos(t)
    pts[on_side, 1] = radius * s * np.sin(t)
    pts[on_side, 2] = height / 2 - height * s
    x, y = _disk(rng, n - m, radius)
    pts[~on_side, 0], pts[~on_side, 1], pts[~on_side, 2] = x, y, -height / 2
    return pts


def _torus(rng, n, major=1.0, minor=0.35):
    # rejection on the tube angle: surface density is proportional to major + minor*cos(v)
    out = np.empty((0, 2))
    while out.shape[0] < n:
        v = rng.uniform(0.0, 2 * np.pi, size=2 * n)
        keep = rng.uniform(0.0, major + minor, size=2 * n) < major + minor * np.cos(v)
        u = rng.uniform(0.0, 2 * np.pi, size=2 * n)
        out = np.concatenate([out, np.stack([u[keep], v[keep]], axis=1)])
    u, v = out[:n, 0], out[:n, 1]
    ring = major + minor * np.cos(v)
    return np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)


_GENERATORS = {
    "sphere": _sphere,
    "cube": _cube,
    "cylinder": _cylinder,
    "cone": _cone,
    "torus": _torus,
}


def generate_shape(kind, n, jitter=0.0, seed=0, *, label=0, sample_id="", normalize=True):
    """Sample ``n`` points uniformly on a unit-scale surface of ``kind``.

    Gaussian jitter with standard deviation ``jitter`` is added before the
    cloud is normalized into the unit cube.
    """
    if kind not in _GENERATORS:
        raise UsageError(f"unknown shape kind {kind!r}; choose from {', '.join(SHAPE_KINDS)}")
    if n < 8:
        raise DomainError(f"need at least 8 points, got {n}")
    if jitter < 0:
        raise DomainError(f"jitter must be >= 0, got {jitter}")
    rng = np.random.default_rng(seed)
    pts = _GENERATORS[kind](rng, n)
    if jitter > 0:
        pts = pts + rng.normal(0.0, jitter, size=pts.shape)
    cloud = PointCloud(pts, label, sample_id)
    if normalize:
        cloud = normalize_to_unit_cube(cloud, points=pts)
    return cloud


# -- geometry ----------------------------------------------------------------

def normalize_to_unit_cube(cloud, points=None):
    """Uniformly scale and translate so the widest axis spans exactly [0, 1].

    ``points`` optionally supplies higher-precision coordinates for ``cloud``.
    """
    pts = np.asarray(cloud.points if points is None else points, dtype=np.float64)
    lo = pts.min(axis=0)
    extent = pts.max(axis=0) - lo
    widest = int(np.argmax(extent))
    scale = extent[widest]
    if scale == 0:
        raise DomainError("cannot normalize a cloud whose points are all identical")
    out = ((pts - lo) / scale).astype(DTYPE)
    np.clip(out, 0.0, 1.0, out=out)
    return PointCloud(out, cloud.label, cloud.id)


def resample(cloud, m, seed=0):
    rng = np.random.default_rng(seed)
    n = cloud.n
    if n == 0:
        raise DomainError("cannot resample an empty cloud")
    idx = rng.choice(n, size=m, replace=n < m)
    return PointCloud(cloud.points[idx], cloud.label, cloud.id)


# -- OFF meshes --------------------------------------------------------------

@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray  # (f, 3) vertex indices


def _off_lines(text):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def parse_off_text(text):
    lines = _off_lines(text)
    try:
        lineno, tokens = next(lines)
    except StopIteration:
        raise ParseError("empty file, expected OFF header", 1) from None
    head = tokens[0]
    if not head.startswith("OFF"):
        raise ParseError(f"expected 'OFF' header, found {head!r}", lineno)
    # ModelNet writes e.g. "OFF490 518 0" with the counts fused onto the token
    rest = ([head[3:]] if head[3:] else []) + tokens[1:]
    if not rest:
        try:
            lineno, rest = next(lines)
        except StopIteration:
            raise ParseError("missing vertex/face counts", lineno + 1) from None

    def ints(toks, ln, what):
        try:
            return [int(t) for t in toks]
        except ValueError:
            raise ParseError(f"non-numeric {what}: {' '.join(toks)!r}", ln) from None

    counts = ints(rest, lineno, "counts")
    if len(counts) != 3 or min(counts) < 0:
        raise ParseError(f"malformed counts {rest}, expected 'nv nf ne'", lineno)
    nv, nf, _ = counts

    vertices = np.empty((nv, 3))
    for i in range(nv):
        try:
            lineno, toks = next(lines)
        except StopIteration:
            raise ParseError(f"file ends after {i} of {nv} vertices", lineno + 1) from None
        if len(toks) < 3:
            raise ParseError(f"vertex needs 3 coordinates, got {len(toks)}", lineno)
        try:
            vertices[i] = [float(t) for t in toks[:3]]
        except ValueError:
            raise ParseError(f"non-numeric vertex coordinate in {toks[:3]}", lineno) from None

    faces = []
    for i in range(nf):
        try:
            lineno, toks = next(lines)
        except StopIteration:
            raise ParseError(f"file ends after {i} of {nf} faces", lineno + 1) from None
        vals = ints(toks, lineno, "face entry")
        k = vals[0]
        if k < 3 or len(vals) < k + 1:
            raise ParseError(f"face declares {k} vertices but lists {len(vals) - 1}", lineno)
        poly = vals[1:k + 1]
        for v in poly:
            if not 0 <= v < nv:
                raise ParseError(f"face references vertex {v} of {nv}", lineno)
        for j in range(1, k - 1):
            faces.append((poly[0], poly[j], poly[j + 1]))
    return Mesh(vertices, np.array(faces, dtype=np.int64).reshape(-1, 3))


def parse_off(path):
    with open(path, encoding="utf-8") as fh:
        return parse_off_text(fh.read())


def triangle_areas(mesh):
    a, b, c = (mesh.vertices[mesh.faces[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_mesh_surface(mesh, n, seed=0, *, label=0, sample_id="", normalize=False):
    """Area-weighted face choice, then a uniform barycentric point per face."""
    areas = triangle_areas(mesh) if len(mesh.faces) else np.zeros(0)
    total = areas.sum()
    if not total > 0:
        raise DomainError("mesh has zero total surface area")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.uniform(0.0, 1.0, size=n))
    r2 = rng.uniform(0.0, 1.0, size=n)
    w = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=1)
    tri = mesh.vertices[mesh.faces[face]]
    pts = np.einsum("ij,ijk->ik", w, tri)
    cloud = PointCloud(pts, label, sample_id)
    if normalize:
        cloud = normalize_to_unit_cube(cloud, points=pts)
    return cloud


# -- cloud files -------------------------------------------------------------

def format_cloud(cloud):
    # repr of the float64 value is exact for every float32, so reloads are bitwise
    lines = [f"{CLOUD_MAGIC} {CLOUD_VERSION} {cloud.n} {cloud.label}"]
    for x, y, z in cloud.points.astype(np.float64).tolist():
        lines.append(f"{x!r} {y!r} {z!r}")
    return "\n".join(lines) + "\n"


def save_cloud(cloud, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_cloud(cloud))


def parse_cloud_text(text, sample_id=""):
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty cloud file", 1)
    head = lines[0].split()
    if len(head) != 4 or head[0] != CLOUD_MAGIC:
        raise ParseError(f"expected '{CLOUD_MAGIC} <version> <n> <label>' header", 1)
    try:
        version, n, label = int(head[1]), int(head[2]), int(head[3])
    except ValueError:
        raise ParseError("non-numeric field in header", 1) from None
    if version != CLOUD_VERSION:
        raise ParseError(f"unsupported cloud version {version}", 1)
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != n:
        raise ParseError(f"header declares {n} points, file has {len(body)}", len(lines))
    pts = np.empty((n, 3), dtype=np.float64)
    for i, ln in enumerate(body):
        toks = ln.split()
        if len(toks) != 3:
            raise ParseError(f"expected 3 coordinates, got {len(toks)}", i + 2)
        try:
            pts[i] = [float(t) for t in toks]
        except ValueError:
            raise ParseError(f"non-numeric coordinate in {ln!r}", i + 2) from None
    return PointCloud(pts.astype(DTYPE), label, sample_id)


def load_cloud(path, sample_id=None):
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        return parse_cloud_text(fh.read(), path.stem if sample_id is None else sample_id)


# -- datasets ----------------------------------------------------------------

@dataclass
class DatasetConfig:
    classes: tuple = SHAPE_KINDS
    per_class: int = 100
    num_points: int = 256
    jitter: float = 0.02
    val_fraction: float = 0.2

    def __post_init__(self):
        self.classes = tuple(self.classes)
        unknown = [c for c in self.classes if c not in _GENERATORS]
        if unknown:
            raise UsageError(f"unknown shape kind {unknown[0]!r}")
        if len(set(self.classes)) != len(self.classes):
            raise UsageError("duplicate class names")
        if self.per_class < 1:
            raise UsageError(f"per_class must be >= 1, got {self.per_class}")


@dataclass
class DatasetManifest:
    classes: list
    splits: dict  # split name -> list of relative cloud paths
    seed: int
    generator: dict = field(default_factory=dict)
    root: Path | None = None
    clouds: dict | None = field(default=None, repr=False, compare=False)

    def to_json(self):
        return json.dumps(
            {"classes": self.classes, "seed": self.seed, "generator": self.generator,
             "splits": self.splits},
            indent=2,
        ) + "\n"

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise OSError(f"cannot read manifest {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: malformed manifest: {exc}") from exc
        seen = set()
        for files in raw["splits"].values():
            for f in files:
                if f in seen:
                    raise FormatError(f"{path}: file {f} listed twice")
                seen.add(f)
        return cls(raw["classes"], raw["splits"], raw["seed"], raw.get("generator", {}), path.parent)

    def load_split(self, split):
        if self.root is None:
            raise UsageError("manifest has no root directory")
        return [load_cloud(self.root / rel) for rel in self.splits[split]]


def build_dataset(config, seed, out_dir=None):
    """Generate a stratified train/val dataset of procedural shapes.

    Every sample draws from its own seed stream (``seed``, sample index), so
    the result does not depend on generation order. When ``out_dir`` is given
    the clouds and ``manifest.json`` are written there.
    """
    splits = {"train": [], "val": []}
    clouds = {}
    rng = np.random.default_rng(seed)
    stream = 0
    for label, kind in enumerate(config.classes):
        n_val = int(round(config.per_class * config.val_fraction))
        order = rng.permutation(config.per_class)
        val_idx = set(order[:n_val].tolist())
        for i in range(config.per_class):
            sample_id = f"{kind}_{i:04d}"
            cloud = generate_shape(
                kind, config.num_points, config.jitter,
                seed=np.random.SeedSequence([int(seed), stream]),
                label=label, sample_id=sample_id,
            )
            stream += 1
            split = "val" if i in val_idx else "train"
            rel = f"{split}/{sample_id}.txt"
            splits[split].append(rel)
            clouds[rel] = cloud
    manifest = DatasetManifest(
        list(config.classes), splits, int(seed),
        {"kind": "procedural", "per_class": config.per_class, "num_points": config.num_points,
         "jitter": config.jitter, "val_fraction": config.val_fraction},
        Path(out_dir) if out_dir is not None else None,
        clouds,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        for split in splits:
            (out_dir / split).mkdir(parents=True, exist_ok=True)
        for rel, cloud in clouds.items():
            try:
                save_cloud(cloud, out_dir / rel)
            except OSError as exc:
                raise OSError(f"cannot write {out_dir / rel}: {exc}") from exc
        (out_dir / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return manifest


def split_clouds(manifest, split):
    """Clouds of ``split`` from memory when freshly built, else from disk."""
    if manifest.clouds is not None:
        return [manifest.clouds[rel] for rel in manifest.splits[split]]
    return manifest.load_split(split)


def stack(clouds):
    return np.stack([c.points for c in clouds]).astype(DTYPE, copy=False)


def build_off_dataset(root, out_dir, num_points, seed=0):
    """Sample a ModelNet-style tree ``<root>/<class>/{train,test}/*.off``.

    The ``test`` split becomes ``val``. Each mesh is surface-sampled with its
    own seed stream and normalized into the unit cube.
    """
    root, out_dir = Path(root), Path(out_dir)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise UsageError(f"no class directories under {root}")
    splits = {"train": [], "val": []}
    stream = 0
    for label, name in enumerate(classes):
        for src_split, split in (("train", "train"), ("test", "val")):
            for off in sorted((root / name / src_split).glob("*.off")):
                mesh = parse_off(off)
                cloud = sample_mesh_surface(
                    mesh, num_points, np.random.SeedSequence([int(seed), stream]),
                    label=label, sample_id=f"{name}_{off.stem}", normalize=True,
                )
                stream += 1
                rel = f"{split}/{cloud.id}.txt"
                (out_dir / split).mkdir(parents=True, exist_ok=True)
                save_cloud(cloud, out_dir / rel)
                splits[split].append(rel)
    manifest = DatasetManifest(classes, splits, int(seed),
                               {"kind": "off", "source": str(root), "num_points": num_points},
                               out_dir)
    (out_dir / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return manifest
