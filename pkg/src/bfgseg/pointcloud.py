"""Labeled point clouds: synthetic indoor scenes, block splitting, fixed-size
sampling, augmentation and text/PLY file I/O.
"""
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ContractError, ParseError

BACKGROUND = 0
KINDS = ("plane", "wall", "box", "cylinder", "wedge")


@dataclass
class LabeledCloud:
    """Points of one scene or block.

    ``colors`` defaults to zeros. ``instances`` is optional per-point instance
    id (-1 for clutter), only filled in by the scene generator.
    """

    coords: np.ndarray
    labels: np.ndarray
    colors: np.ndarray = None
    instances: np.ndarray = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        n = self.coords.shape[0]
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.colors is None:
            self.colors = np.zeros((n, 3))
        else:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if self.instances is not None:
            self.instances = np.asarray(self.instances, dtype=np.int64).reshape(-1)
        if n < 1:
            raise ContractError("LabeledCloud needs at least one point")
        if self.labels.shape[0] != n or self.colors.shape[0] != n:
            raise ContractError(
                f"LabeledCloud: {n} coords, {self.labels.shape[0]} labels, "
                f"{self.colors.shape[0]} colors")
        if not np.all(np.isfinite(self.coords)):
            raise ContractError("LabeledCloud: non-finite coordinates")
        if np.any(self.labels < 0):
            raise ContractError("LabeledCloud: negative label")

    def __len__(self):
        return self.coords.shape[0]

    def subset(self, idx):
        inst = None if self.instances is None else self.instances[idx]
        return LabeledCloud(self.coords[idx], self.labels[idx], self.colors[idx], inst)

    def class_counts(self):
        ids, counts = np.unique(self.labels, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}

    def mask(self, class_id):
        return ClassMask(int(class_id), self.labels == class_id)


@dataclass
class ClassMask:
    class_id: int
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool).reshape(-1)

    @property
    def count(self):
        return int(self.mask.sum())


@dataclass(frozen=True)
class ClassGen:
    """One semantic class: a primitive generator with its size and tint.

    ``scale`` bounds every sampled extent in meters; ``elevation`` is the
    height of plane primitives above the floor.
    """

    name: str
    kind: str
    scale: tuple = (0.5, 1.0)
    color: tuple = (0.5, 0.5, 0.5)
    count: tuple = (1, 2)
    elevation: tuple = (0.0, 0.0)
    always: bool = False


def default_classes():
    # classes 6-10 reuse the generator families of 1-5 at other sizes and tints
    return (
        ClassGen("floor", "plane", (2.8, 3.5), (0.55, 0.45, 0.35), (1, 1), always=True),
        ClassGen("wall", "wall", (1.2, 2.4), (0.90, 0.90, 0.85), (1, 2), always=True),
        ClassGen("box", "box", (0.4, 0.8), (0.80, 0.20, 0.20), (1, 2)),
        ClassGen("cylinder", "cylinder", (0.3, 0.8), (0.20, 0.40, 0.85), (1, 2)),
        ClassGen("wedge", "wedge", (0.4, 0.8), (0.20, 0.75, 0.30), (1, 2)),
        ClassGen("table", "plane", (0.5, 1.0), (0.85, 0.70, 0.15), (1, 2), (0.6, 0.9)),
        ClassGen("column", "cylinder", (0.2, 1.4), (0.55, 0.25, 0.70), (1, 2)),
        ClassGen("cabinet", "box", (0.7, 1.2), (0.15, 0.70, 0.75), (1, 2)),
        ClassGen("ramp", "wedge", (0.8, 1.3), (0.95, 0.50, 0.10), (1, 2)),
        ClassGen("board", "wall", (0.5, 1.0), (0.85, 0.30, 0.65), (1, 2)),
    )


@dataclass
class SceneSpec:
    classes: tuple = field(default_factory=default_classes)
    n_points: int = 24000
    room_size: float = 3.5
    deformation: float = 0.0
    clutter_fraction: float = 0.05
    color_noise: float = 0.05
    objects_per_scene: int = 0
    seed: int = 0
    block_sample: int = 1

    def validate(self):
        if not self.classes:
            raise ConfigError("SceneSpec: empty class universe")
        for c in self.classes:
            if c.kind not in KINDS:
                raise ConfigError(f"SceneSpec: unknown generator kind {c.kind!r} for {c.name}")
            lo, hi = c.scale
            if not 0 < lo <= hi:
                raise ConfigError(f"SceneSpec: scale range for {c.name} must be positive, got {c.scale}")
            if c.count[0] < 1 or c.count[1] < c.count[0]:
                raise ConfigError(f"SceneSpec: bad instance count range for {c.name}: {c.count}")
        if self.n_points < max(1, self.block_sample):
            raise ConfigError("SceneSpec: n_points must be >= the block sample size")
        if self.objects_per_scene < 0:
            raise ConfigError("SceneSpec: objects_per_scene must be >= 0 (0 keeps every class)")
        if not 0 <= self.clutter_fraction < 1:
            raise ConfigError("SceneSpec: clutter_fraction must be in [0, 1)")
        if self.room_size <= 0 or self.deformation < 0 or self.color_noise < 0:
            raise ConfigError("SceneSpec: room_size > 0, deformation >= 0, color_noise >= 0")

    @property
    def class_names(self):
        return {i + 1: c.name for i, c in enumerate(self.classes)}


# primitive surface samplers; each returns (n, 3) points and the surface area

def _rot_z(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _plane(rng, gen, n, dims):
    a, b = dims[:2]
    z = rng.uniform(*gen.elevation)
    pts = np.column_stack([rng.uniform(-a / 2, a / 2, n), rng.uniform(-b / 2, b / 2, n),
                           np.full(n, z)])
    return pts


def _wall(rng, gen, n, dims):
    w, h = dims[:2]
    return np.column_stack([rng.uniform(-w / 2, w / 2, n), np.zeros(n), rng.uniform(0, h, n)])


def _box(rng, gen, n, dims):
    ex, ey, ez = dims
    areas = np.array([ey * ez, ey * ez, ex * ez, ex * ez, ex * ey, ex * ey])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u, v = rng.uniform(0, 1, n), rng.uniform(0, 1, n)
    pts = np.empty((n, 3))
    axis = face // 2
    side = face % 2
    for ax in range(3):
        sel = axis == ax
        others = [o for o in range(3) if o != ax]
        ext = np.array([ex, ey, ez])
        pts[sel, ax] = np.where(side[sel] == 0, -ext[ax] / 2, ext[ax] / 2)
        pts[sel, others[0]] = (u[sel] - 0.5) * ext[others[0]]
        pts[sel, others[1]] = (v[sel] - 0.5) * ext[others[1]]
    pts[:, 2] += ez / 2
    return pts


def _cylinder(rng, gen, n, dims):
    diameter, height = dims[0], dims[2]
    r = diameter / 2
    side_area, cap_area = 2 * math.pi * r * height, math.pi * r * r
    on_cap = rng.uniform(0, 1, n) < cap_area / (side_area + cap_area)
    theta = rng.uniform(0, 2 * math.pi, n)
    rad = np.where(on_cap, r * np.sqrt(rng.uniform(0, 1, n)), r)
    z = np.where(on_cap, height, rng.uniform(0, height, n))
    return np.column_stack([rad * np.cos(theta), rad * np.sin(theta), z])


def _wedge(rng, gen, n, dims):
    # right-triangle prism: rises from z=0 at x=-a/2 to z=h at x=+a/2
    a, b, h = dims
    slope_len = math.hypot(a, h)
    areas = np.array([slope_len * b, h * b, a * h / 2, a * h / 2])
    face = rng.choice(4, size=n, p=areas / areas.sum())
    u, v = rng.uniform(0, 1, n), rng.uniform(0, 1, n)
    pts = np.empty((n, 3))
    s = face == 0
    pts[s] = np.column_stack([-a / 2 + u[s] * a, (v[s] - 0.5) * b, u[s] * h])
    s = face == 1
    pts[s] = np.column_stack([np.full(s.sum(), a / 2), (v[s] - 0.5) * b, u[s] * h])
    tri = face >= 2
    fu, fv = u[tri], v[tri]
    flip = fu + fv > 1
    fu, fv = np.where(flip, 1 - fu, fu), np.where(flip, 1 - fv, fv)
    # triangle with corners (-a/2,0), (a/2,0), (a/2,h) in the xz-plane
    x = -a / 2 + fu * a + fv * a
    z = fv * h
    y = np.where(face[tri] == 2, -b / 2, b / 2)
    pts[tri] = np.column_stack([np.minimum(x, a / 2), y, z])
    return pts


def _dims_and_area(rng, gen, room):
    lo, hi = gen.scale
    dims = rng.uniform(lo, hi, 3)
    if gen.kind == "plane":
        return dims, dims[0] * dims[1]
    if gen.kind == "wall":
        return dims, dims[0] * dims[1]
    if gen.kind == "box":
        ex, ey, ez = dims
        return dims, 2 * (ex * ey + ey * ez + ex * ez)
    if gen.kind == "cylinder":
        r = dims[0] / 2
        return dims, 2 * math.pi * r * dims[2] + math.pi * r * r
    a, b, h = dims
    return dims, math.hypot(a, h) * b + h * b + a * h


_SAMPLERS = {"plane": _plane, "wall": _wall, "box": _box,
             "cylinder": _cylinder, "wedge": _wedge}


def generate_scene(spec):
    """Sample one synthetic room; every instance carries its class label (index + 1)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    room = spec.room_size
    optional = [ci for ci, gen in enumerate(spec.classes) if not gen.always]
    present = set(range(len(spec.classes)))
    if 0 < spec.objects_per_scene < len(optional):
        dropped = rng.choice(optional, len(optional) - spec.objects_per_scene, replace=False)
        present -= {int(c) for c in dropped}
    instances = []
    for ci, gen in enumerate(spec.classes):
        if ci not in present:
            continue
        for _ in range(rng.integers(gen.count[0], gen.count[1] + 1)):
            dims, area = _dims_and_area(rng, gen, room)
            if gen.kind == "plane" and gen.elevation == (0.0, 0.0):
                center = np.array([room / 2, room / 2]) + rng.uniform(-0.1, 0.1, 2) * room
            else:
                center = rng.uniform(0.15 * room, 0.85 * room, 2)
            # boxes and floor patches stay axis-aligned so their extents are measurable
            theta = 0.0 if gen.kind in ("box", "plane") else rng.uniform(0, 2 * math.pi)
            instances.append((ci + 1, gen, dims, area, center, theta))

    n_clutter = int(round(spec.n_points * spec.clutter_fraction))
    n_obj = spec.n_points - n_clutter
    areas = np.array([inst[3] for inst in instances])
    counts = rng.multinomial(n_obj, areas / areas.sum())

    coords, labels, colors, inst_ids = [], [], [], []
    for iid, ((label, gen, dims, _, center, theta), n) in enumerate(zip(instances, counts)):
        if n == 0:
            continue
        pts = _SAMPLERS[gen.kind](rng, gen, n, dims)
        if spec.deformation > 0:
            freq = rng.uniform(0.5, 2.0, 3)
            phase = rng.uniform(0, 2 * math.pi, 3)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            bend = np.sin(pts @ freq * 2 * math.pi / max(dims.max(), 1e-9) + phase[0])
            pts = pts + spec.deformation * bend[:, None] * direction[None, :]
        pts = pts @ _rot_z(theta).T
        pts[:, :2] += center
        coords.append(pts)
        labels.append(np.full(n, label))
        tint = np.clip(np.asarray(gen.color) + rng.normal(0, spec.color_noise, (n, 3)), 0, 1)
        colors.append(tint)
        inst_ids.append(np.full(n, iid))

    if n_clutter:
        n_blobs = max(1, n_clutter // 100)
        centers = np.column_stack([rng.uniform(0, room, (n_blobs, 2)),
                                   rng.uniform(0, 1.5, n_blobs)])
        which = rng.integers(0, n_blobs, n_clutter)
        coords.append(centers[which] + rng.normal(0, 0.05, (n_clutter, 3)))
        labels.append(np.full(n_clutter, BACKGROUND))
        colors.append(rng.uniform(0, 1, (n_clutter, 3)))
        inst_ids.append(np.full(n_clutter, -1))

    return LabeledCloud(np.concatenate(coords), np.concatenate(labels),
                        np.concatenate(colors), np.concatenate(inst_ids))


def split_blocks(cloud, block_size):
    """Partition by a non-overlapping xy grid anchored at the cloud's min corner.

    Points on the far edge of the cloud fall into the last cell, so every
    block's xy extent is at most ``block_size``. Empty cells are dropped;
    blocks are ordered by (x cell, y cell) and keep the input point order.
    """
    if block_size <= 0:
        raise ContractError(f"split_blocks: block_size must be > 0, got {block_size}")
    xy = cloud.coords[:, :2]
    lo = xy.min(axis=0)
    span = xy.max(axis=0) - lo
    cells = np.maximum(1, np.ceil(span / block_size - 1e-12)).astype(np.int64)
    ij = np.floor((xy - lo) / block_size).astype(np.int64)
    ij = np.minimum(ij, cells - 1)
    key = ij[:, 0] * cells[1] + ij[:, 1]
    blocks = []
    for k in np.unique(key):
        blocks.append(cloud.subset(np.flatnonzero(key == k)))
    return blocks


def sample_block(block, n_points, seed):
    """Draw exactly ``n_points`` points; without replacement when the block is big enough.

    Smaller blocks keep every point once and pad with repeats.
    """
    n = len(block)
    if n_points < 1:
        raise ContractError(f"sample_block: n_points must be >= 1, got {n_points}")
    rng = np.random.default_rng(seed)
    if n >= n_points:
        idx = rng.choice(n, n_points, replace=False)
    else:
        extra = rng.choice(n, n_points - n, replace=True)
        idx = rng.permutation(np.concatenate([np.arange(n), extra]))
    return block.subset(idx)


def augment(cloud, jitter_sigma, rotate, seed):
    """Gaussian coordinate jitter, then a random rotation about the vertical
    axis through the cloud's xy centroid. Labels and colors are untouched."""
    if jitter_sigma < 0:
        raise ContractError("augment: jitter_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    coords = cloud.coords.copy()
    if jitter_sigma > 0:
        coords = coords + rng.normal(0.0, jitter_sigma, coords.shape)
    if rotate:
        theta = rng.uniform(0, 2 * math.pi)
        pivot = coords[:, :2].mean(axis=0)
        c, s = math.cos(theta), math.sin(theta)
        x, y = coords[:, 0] - pivot[0], coords[:, 1] - pivot[1]
        coords[:, 0] = c * x - s * y + pivot[0]
        coords[:, 1] = s * x + c * y + pivot[1]
    return replace(cloud, coords=coords, labels=cloud.labels.copy(),
                   colors=cloud.colors.copy())


# file I/O

def write_cloud(cloud, path, header=None):
    """Text format: one point per line, ``x y z r g b label``; '#' lines are comments."""
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            for line in str(header).splitlines():
                fh.write(f"# {line}\n")
        for p, c, l in zip(cloud.coords, cloud.colors, cloud.labels):
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]:.6f} {c[1]:.6f} {c[2]:.6f} {l}\n")


def parse_cloud_lines(lines, path=None):
    coords, colors, labels = [], [], []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 7:
            raise ParseError(f"expected 7 fields, got {len(fields)}", line=lineno, path=path)
        try:
            vals = [float(f) for f in fields[:6]]
            label = int(fields[6])
        except ValueError:
            raise ParseError(f"non-numeric field in {line!r}", line=lineno, path=path) from None
        if not all(math.isfinite(v) for v in vals) or label < 0:
            raise ParseError(f"invalid value in {line!r}", line=lineno, path=path)
        coords.append(vals[:3])
        colors.append(vals[3:])
        labels.append(label)
    if not coords:
        raise ParseError("no points", path=path)
    return LabeledCloud(np.array(coords), np.array(labels), np.array(colors))


def read_cloud(path):
    with open(path, encoding="utf-8") as fh:
        return parse_cloud_lines(fh, path=str(path))


PALETTE = np.array([
    [128, 128, 128], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
    [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60],
    [250, 190, 212], [0, 128, 128], [220, 190, 255], [170, 110, 40], [128, 0, 0],
    [0, 0, 128],
], dtype=np.int64)


def write_ply(path, coords, labels, comments=()):
    """ASCII PLY; vertex colors come from PALETTE indexed by label.

    ``comments`` are written as header ``comment`` lines.
    """
    coords = np.asarray(coords, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    rgb = PALETTE[labels % len(PALETTE)]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        for c in comments:
            fh.write(f"comment {' '.join(str(c).split())}\n")
        fh.write(f"element vertex {len(coords)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("property int label\nend_header\n")
        for p, c, l in zip(coords, rgb, labels):
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]} {l}\n")


def read_ply_vertex_count(path):
    with open(path, encoding="ascii") as fh:
        for line in fh:
            if line.startswith("element vertex"):
                return int(line.split()[2])
    raise ParseError("no vertex element", path=str(path))
