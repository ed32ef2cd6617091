"""Point cloud containers, file formats, dataset manifests and synthetic scenes.

Two on-disk formats are supported:

ASCII
    First line names the columns (a subset of ``x y z intensity return_count
    label segment`` that includes ``x y z``), then one whitespace-separated
    row per point.

Binary
    8-byte magic ``LGEPCv01``, little-endian u64 point count, u32 column
    count, then one descriptor per column (u8 name length, name bytes,
    u8 dtype-string length, numpy dtype string such as ``<f8``), then each
    column's packed little-endian data in descriptor order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

UNLABELED = 255
UNASSIGNED = -1
COLUMNS = ("x", "y", "z", "intensity", "return_count", "label", "segment")
MAGIC = b"LGEPCv01"

_COLUMN_DTYPES = {
    "x": np.dtype("<f8"), "y": np.dtype("<f8"), "z": np.dtype("<f8"),
    "intensity": np.dtype("<f8"), "return_count": np.dtype("<u1"),
    "label": np.dtype("<u1"), "segment": np.dtype("<i8"),
}


class CloudFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N points with per-point attributes.

    ``label`` uses 255 for unlabeled points and ``segment`` uses -1 for
    points without a segment.
    """

    positions: np.ndarray
    intensity: np.ndarray
    return_count: np.ndarray
    label: np.ndarray
    segment: np.ndarray

    def __post_init__(self):
        n = len(self.positions)
        if self.positions.shape != (n, 3):
            raise ValueError(f"positions must be N x 3, got {self.positions.shape}")
        for name in ("intensity", "return_count", "label", "segment"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has length {len(getattr(self, name))}, expected {n}")
        for name in ("positions", "intensity", "return_count", "label", "segment"):
            getattr(self, name).flags.writeable = False

    @classmethod
    def from_arrays(cls, positions, intensity=None, return_count=None, label=None,
                    segment=None) -> "PointCloud":
        positions = np.array(positions, dtype=np.float64).reshape(-1, 3)
        n = len(positions)
        return cls(
            positions=positions,
            intensity=np.zeros(n) if intensity is None else np.array(intensity, dtype=np.float64),
            return_count=(np.ones(n, dtype=np.uint8) if return_count is None
                          else np.array(return_count, dtype=np.uint8)),
            label=(np.full(n, UNLABELED, dtype=np.uint8) if label is None
                   else np.array(label, dtype=np.uint8)),
            segment=(np.full(n, UNASSIGNED, dtype=np.int64) if segment is None
                     else np.array(segment, dtype=np.int64)),
        )

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def has_labels(self) -> bool:
        return bool((self.label != UNLABELED).any())

    @property
    def has_segments(self) -> bool:
        return bool((self.segment != UNASSIGNED).all()) and len(self) > 0

    def subset(self, index) -> "PointCloud":
        index = np.asarray(index)
        return PointCloud(self.positions[index], self.intensity[index],
                          self.return_count[index], self.label[index], self.segment[index])

    def with_(self, **changes) -> "PointCloud":
        """Copy with some columns replaced; ``None`` resets a column to its default."""
        defaults = PointCloud.from_arrays(np.zeros((len(self), 3)))
        fields = {k: getattr(defaults, k) if v is None else np.array(v)
                  for k, v in changes.items()}
        return replace(self, **fields)

    def column(self, name: str) -> np.ndarray:
        if name in ("x", "y", "z"):
            return self.positions[:, "xyz".index(name)]
        return getattr(self, name)


def read_cloud(path) -> PointCloud:
    """Read an ASCII or binary cloud; the format is detected from the magic."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC))
    if head == MAGIC:
        return _read_binary(path)
    return _read_ascii(path)


def write_cloud(cloud: PointCloud, path, format: str = "ascii",
                columns: tuple[str, ...] | None = None) -> None:
    path = Path(path)
    if columns is None:
        columns = ("x", "y", "z", "intensity", "return_count")
        if cloud.has_labels:
            columns += ("label",)
        if (cloud.segment != UNASSIGNED).any():
            columns += ("segment",)
    unknown = set(columns) - set(COLUMNS)
    if unknown:
        raise CloudFormatError(f"unknown columns {sorted(unknown)}")
    if format == "ascii":
        _write_ascii(cloud, path, columns)
    elif format == "binary":
        _write_binary(cloud, path, columns)
    else:
        raise ValueError(f"unknown format {format!r}")


def _assemble(cols: dict[str, np.ndarray], n: int) -> PointCloud:
    return PointCloud.from_arrays(
        np.stack([cols["x"], cols["y"], cols["z"]], axis=1) if n else np.zeros((0, 3)),
        intensity=cols.get("intensity"),
        return_count=cols.get("return_count"),
        label=cols.get("label"),
        segment=cols.get("segment"),
    )


def _read_ascii(path: Path) -> PointCloud:
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().split()
        unknown = [c for c in header if c not in COLUMNS]
        if unknown:
            raise CloudFormatError(f"{path}: unknown column(s) {unknown} in header")
        if not {"x", "y", "z"} <= set(header) or len(set(header)) != len(header):
            raise CloudFormatError(f"{path}: header must name x, y, z once each")
        rows = []
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != len(header):
                raise CloudFormatError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise CloudFormatError(f"{path}:{lineno}: {exc}") from None
    data = np.array(rows, dtype=np.float64).reshape(-1, len(header))
    cols = {name: data[:, i] for i, name in enumerate(header)}
    for name in ("return_count", "label", "segment"):
        if name in cols:
            v = cols[name]
            if not np.all(v == np.round(v)):
                raise CloudFormatError(f"{path}: column {name} must hold integers")
    return _assemble(cols, len(data))


def _format_column(name: str, values: np.ndarray) -> list[str]:
    if _COLUMN_DTYPES[name].kind == "f":
        return [repr(float(v)) for v in values]
    return [str(int(v)) for v in values]


def _write_ascii(cloud: PointCloud, path: Path, columns) -> None:
    formatted = [_format_column(c, cloud.column(c)) for c in columns]
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(" ".join(columns) + "\n")
        for row in zip(*formatted):
            fh.write(" ".join(row) + "\n")


def _write_binary(cloud: PointCloud, path: Path, columns) -> None:
    n = len(cloud)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<QI", n, len(columns)))
        for name in columns:
            dt = _COLUMN_DTYPES[name].str.encode("ascii")
            fh.write(struct.pack("<B", len(name)) + name.encode("ascii"))
            fh.write(struct.pack("<B", len(dt)) + dt)
        for name in columns:
            fh.write(np.ascontiguousarray(cloud.column(name), dtype=_COLUMN_DTYPES[name]).tobytes())


def _read_binary(path: Path) -> PointCloud:
    raw = path.read_bytes()
    offset = len(MAGIC)
    try:
        n, ncols = struct.unpack_from("<QI", raw, offset)
        offset += 12
        descriptors = []
        for _ in range(ncols):
            (ln,) = struct.unpack_from("<B", raw, offset)
            name = raw[offset + 1:offset + 1 + ln].decode("ascii")
            offset += 1 + ln
            (ld,) = struct.unpack_from("<B", raw, offset)
            dtype = np.dtype(raw[offset + 1:offset + 1 + ld].decode("ascii"))
            offset += 1 + ld
            if name not in COLUMNS:
                raise CloudFormatError(f"{path}: unknown column {name!r}")
            descriptors.append((name, dtype))
        cols = {}
        for name, dtype in descriptors:
            size = n * dtype.itemsize
            if offset + size > len(raw):
                raise CloudFormatError(f"{path}: truncated data for column {name!r}")
            cols[name] = np.frombuffer(raw, dtype=dtype, count=n, offset=offset).copy()
            offset += size
    except struct.error as exc:
        raise CloudFormatError(f"{path}: corrupt header ({exc})") from None
    if not {"x", "y", "z"} <= cols.keys():
        raise CloudFormatError(f"{path}: binary cloud lacks x, y or z")
    return _assemble(cols, n)


# -- manifests ---------------------------------------------------------------

ISPRS_CLASSES = ("powerline", "low_vegetation", "impervious_surface", "car",
                 "fence_hedge", "roof", "facade", "shrub", "tree")
SYNTH_CLASSES = ("ground", "building", "tree", "wire")


@dataclass
class DatasetManifest:
    """Ordered class names plus train/test file lists.

    Stored as JSON; relative file paths resolve against the manifest's
    directory.
    """

    classes: list[str]
    train: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)
    intensity_max: float = 1.0
    crs: str = "unspecified"
    units: str = "m"
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("a manifest needs at least 2 classes")
        if self.intensity_max <= 0:
            raise ValueError("intensity_max must be positive")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def resolve(self, name: str) -> Path:
        p = Path(name)
        return p if p.is_absolute() else self.root / p

    def train_paths(self) -> list[Path]:
        return [self.resolve(f) for f in self.train]

    def test_paths(self) -> list[Path]:
        return [self.resolve(f) for f in self.test]

    def load(self, path) -> PointCloud:
        """Read a cloud, normalize its intensity and validate labels."""
        cloud = read_cloud(path)
        labels = cloud.label[cloud.label != UNLABELED]
        if labels.size and labels.max() >= self.num_classes:
            raise ValueError(f"{path}: label {labels.max()} outside [0, {self.num_classes})")
        return cloud.with_(intensity=np.clip(cloud.intensity / self.intensity_max, 0.0, 1.0))

    def to_dict(self) -> dict:
        return {"classes": list(self.classes), "train": list(self.train), "test": list(self.test),
                "intensity_max": self.intensity_max, "crs": self.crs, "units": self.units}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_dict(cls, data: dict, root=".") -> "DatasetManifest":
        known = {"classes", "train", "test", "intensity_max", "crs", "units"}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown manifest keys {sorted(extra)}")
        return cls(root=Path(root), **data)

    @classmethod
    def load_file(cls, path, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        manifest = cls.from_dict(json.loads(path.read_text()), root=path.parent)
        if check_files:
            for p in manifest.train_paths() + manifest.test_paths():
                if not p.exists():
                    raise FileNotFoundError(f"manifest {path} lists missing file {p}")
        return manifest


# -- synthetic scenes --------------------------------------------------------

GROUND, BUILDING, TREE, WIRE = range(4)
SYNTH_JITTER = 0.02
SYNTH_JITTER_BOUND = 3 * SYNTH_JITTER
WIRE_BASE_HEIGHT = 16.0
_INTENSITY_MEAN = {GROUND: 90.0, BUILDING: 130.0, TREE: 170.0, WIRE: 210.0}
# adjacent classes overlap by ~20%: 2 * Phi(-40 / (2 * 15.6)) ~= 0.2
_INTENSITY_SD = 15.6


def ground_height(xy: np.ndarray, phase: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    return 0.6 * np.sin(xy[..., 0] / 9.0 + phase[0]) + 0.4 * np.cos(xy[..., 1] / 13.0 + phase[1])


def _jitter(rng, n):
    return np.clip(rng.normal(0.0, SYNTH_JITTER, size=(n, 3)), -SYNTH_JITTER_BOUND / np.sqrt(3),
                   SYNTH_JITTER_BOUND / np.sqrt(3))


def synth_scene(seed: int, extent: float = 60.0, density: float = 5.0,
                with_metadata: bool = False):
    """Generate a labeled urban-like tile of ``extent`` x ``extent`` metres.

    Classes: ground (undulating surface), building (flat or gabled roofs
    plus sparse facade strips), tree (ellipsoidal canopy shells) and wire
    (catenary strands above everything). ``density`` is points per square
    metre on horizontal surfaces. With ``with_metadata`` the generating
    primitives are returned alongside the cloud.
    """
    if density <= 0:
        raise ValueError("density must be positive")
    if extent < 24.0:
        raise ValueError(f"extent {extent} m is too small to place any object (need >= 24 m)")
    rng = np.random.default_rng(seed)
    phase = tuple(rng.uniform(0, 2 * np.pi, size=2))
    parts: list[tuple[np.ndarray, int, np.ndarray]] = []
    primitives: list[dict] = []

    # buildings: axis-aligned footprints that keep clear of each other
    footprints: list[tuple[float, float, float, float]] = []
    n_buildings = max(1, int(round(extent * extent / 900.0)))
    for _ in range(200 * n_buildings):
        if len(footprints) == n_buildings:
            break
        w, l = rng.uniform(8.0, 16.0, size=2)
        x0, y0 = rng.uniform(2.0, extent - 2.0 - w), rng.uniform(2.0, extent - 2.0 - l)
        box = (x0, y0, x0 + w, y0 + l)
        if all(box[0] > b[2] + 4 or box[2] < b[0] - 4 or box[1] > b[3] + 4 or box[3] < b[1] - 4
               for b in footprints):
            footprints.append(box)
    for x0, y0, x1, y1 in footprints:
        base = float(ground_height(np.array([(x0 + x1) / 2, (y0 + y1) / 2]), phase)) - 0.3
        eave = base + rng.uniform(4.0, 9.0)
        gabled = rng.random() < 0.5
        ridge = rng.uniform(1.5, 3.0) if gabled else 0.0
        area = (x1 - x0) * (y1 - y0)
        xy = rng.uniform((x0, y0), (x1, y1), size=(rng.poisson(density * area), 2))
        if gabled:
            half = (x1 - x0) / 2
            z = eave + ridge * (1.0 - np.abs(xy[:, 0] - (x0 + half)) / half)
        else:
            z = np.full(len(xy), eave)
        roof = np.column_stack([xy, z])
        # facade strips are seen obliquely, so they are sparse
        perim = 2 * ((x1 - x0) + (y1 - y0))
        nf = rng.poisson(0.6 * density * perim * (eave - base) / 4.0)
        t = rng.uniform(0, perim, size=nf)
        fx = np.where(t < x1 - x0, x0 + t,
                      np.where(t < (x1 - x0) + (y1 - y0), x1,
                               np.where(t < 2 * (x1 - x0) + (y1 - y0), x1 - (t - (x1 - x0) - (y1 - y0)), x0)))
        fy = np.where(t < x1 - x0, y0,
                      np.where(t < (x1 - x0) + (y1 - y0), y0 + (t - (x1 - x0)),
                               np.where(t < 2 * (x1 - x0) + (y1 - y0), y1,
                                        y1 - (t - 2 * (x1 - x0) - (y1 - y0)))))
        fz = rng.uniform(base + 0.5, eave, size=nf)
        facade = np.column_stack([fx, fy, fz])
        pts = np.vstack([roof, facade])
        returns = np.concatenate([np.ones(len(roof), np.uint8),
                                  rng.integers(1, 3, size=nf).astype(np.uint8)])
        parts.append((pts, BUILDING, returns))
        primitives.append({"kind": "building", "box": (x0, y0, x1, y1), "base": base,
                           "eave": eave, "ridge": ridge, "gabled": gabled})

    # trees: ellipsoid shells outside building footprints
    n_trees = max(2, int(round(extent * extent / 180.0)))
    placed = 0
    for _ in range(100 * n_trees):
        if placed == n_trees:
            break
        rx = rng.uniform(2.0, 4.0)
        rz = rng.uniform(1.5, 3.0)
        cx, cy = rng.uniform(rx, extent - rx, size=2)
        if any(cx + rx > b[0] - 1.5 and cx - rx < b[2] + 1.5 and cy + rx > b[1] - 1.5
               and cy - rx < b[3] + 1.5 for b in footprints):
            continue
        ground_z = float(ground_height(np.array([cx, cy]), phase))
        cz = ground_z + rng.uniform(3.5, 12.0 - rz)
        n = rng.poisson(density * np.pi * rx * rx * 1.2)
        direction = rng.standard_normal((n, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        shell = rng.uniform(0.7, 1.0, size=(n, 1))
        pts = np.array([cx, cy, cz]) + direction * shell * np.array([rx, rx, rz])
        parts.append((pts, TREE, rng.integers(1, 5, size=n).astype(np.uint8)))
        primitives.append({"kind": "tree", "center": (cx, cy, cz), "radii": (rx, rx, rz)})
        placed += 1

    # wires: parallel catenaries crossing the tile
    angle = rng.uniform(0, np.pi)
    direction = np.array([np.cos(angle), np.sin(angle)])
    normal = np.array([-direction[1], direction[0]])
    mid = np.array([extent / 2, extent / 2]) + rng.uniform(-extent / 6, extent / 6) * normal
    span = extent * 1.5
    for k in range(3):
        offset = (k - 1) * 1.2
        s = rng.uniform(-span / 2, span / 2, size=rng.poisson(2.0 * span))
        xy = mid + offset * normal + s[:, None] * direction
        inside = (xy >= 0).all(axis=1) & (xy <= extent).all(axis=1)
        xy, s = xy[inside], s[inside]
        sag_a = 60.0
        z = WIRE_BASE_HEIGHT + sag_a * (np.cosh(s / sag_a) - 1.0) - 2.0
        z += ground_height(xy, phase)
        pts = np.column_stack([xy, z])
        parts.append((pts, WIRE, rng.integers(1, 3, size=len(pts)).astype(np.uint8)))
        primitives.append({"kind": "wire", "mid": tuple(mid + offset * normal),
                           "direction": tuple(direction), "sag": sag_a})

    # ground everywhere except under roofs
    n = rng.poisson(density * extent * extent)
    xy = rng.uniform(0, extent, size=(n, 2))
    covered = np.zeros(n, dtype=bool)
    for x0, y0, x1, y1 in footprints:
        covered |= (xy[:, 0] >= x0) & (xy[:, 0] <= x1) & (xy[:, 1] >= y0) & (xy[:, 1] <= y1)
    xy = xy[~covered]
    ground = np.column_stack([xy, ground_height(xy, phase)])
    parts.insert(0, (ground, GROUND, np.ones(len(ground), np.uint8)))
    primitives.insert(0, {"kind": "ground", "phase": phase})

    positions = np.vstack([p for p, _, _ in parts])
    positions += _jitter(rng, len(positions))
    labels = np.concatenate([np.full(len(p), c, np.uint8) for p, c, _ in parts])
    returns = np.concatenate([r for _, _, r in parts])
    mean = np.array([_INTENSITY_MEAN[c] for c in labels])
    intensity = np.clip(np.round(rng.normal(mean, _INTENSITY_SD)), 0, 255)
    cloud = PointCloud.from_arrays(positions, intensity=intensity, return_count=returns,
                                   label=labels)
    if with_metadata:
        return cloud, primitives
    return cloud


def synth_manifest(directory, train_seeds=(1, 2), test_seeds=(100,), extent: float = 60.0,
                   density: float = 5.0, format: str = "binary") -> DatasetManifest:
    """Write synthetic tiles plus a manifest into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = "bin" if format == "binary" else "txt"

    def emit(seed):
        name = f"synth_{seed}.{ext}"
        write_cloud(synth_scene(seed, extent, density), directory / name, format=format)
        return name

    manifest = DatasetManifest(classes=list(SYNTH_CLASSES),
                               train=[emit(s) for s in train_seeds],
                               test=[emit(s) for s in test_seeds],
                               intensity_max=255.0, crs="local synthetic frame",
                               root=directory)
    manifest.save(directory / "manifest.json")
    return manifest
