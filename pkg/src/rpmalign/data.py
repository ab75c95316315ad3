"""Synthetic shapes, perturbation protocols, and dataset files.

Pairs are generated from primitive models sampled on analytic surfaces
and normalized into the unit sphere. A pair stores the perturbed source
and reference clouds plus the clean, complete model in both frames (the
evaluation metric compares against those), and the ground-truth
source-to-reference transform.

All randomness flows from one seed per pair; per-pair seeds derive from
the dataset master seed by a splitmix64 step (documented in
``derive_seed``), so manifests regenerate datasets byte-for-byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .geom import (
    PointCloud,
    RigidTransform,
    apply_transform,
    estimate_normals,
    invert,
    rot_euler_zyx,
)

PAIR_FORMAT_VERSION = 1
MANIFEST_FORMAT_VERSION = 1

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class DataError(ValueError):
    pass


def splitmix64(state: int) -> int:
    """One output of the splitmix64 generator for the given state."""
    z = (state + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_seed(master_seed: int, index: int) -> int:
    """Per-item seed: splitmix64 of the master advanced ``index + 1`` steps."""
    return splitmix64((master_seed + index * _GOLDEN) & _MASK64)


@dataclass(frozen=True)
class RegistrationPair:
    """Perturbed clouds, their clean/complete originals, and the gt transform."""

    source: PointCloud
    reference: PointCloud
    source_clean: PointCloud
    reference_clean: PointCloud
    gt: RigidTransform
    pair_id: str
    seed: int

    def __post_init__(self):
        mapped = self.gt.apply_points(self.source_clean.points)
        if np.abs(mapped - self.reference_clean.points).max() > 1e-12:
            raise DataError(
                "clean clouds are inconsistent with the ground-truth transform")


# -- perturbation protocol -----------------------------------------------------


def sample_transform(
    rng: np.random.Generator,
    rot_max_deg: float = 45.0,
    trans_max: float = 0.5,
) -> RigidTransform:
    """Three uniform Euler angles in [0, rot_max] composed Z-Y-X, plus a
    translation with components uniform in [-trans_max, trans_max]."""
    if not 0.0 < rot_max_deg < 180.0:
        raise ValueError("rot_max_deg must be in (0, 180)")
    if trans_max <= 0.0:
        raise ValueError("trans_max must be positive")
    yaw, pitch, roll = rng.uniform(0.0, rot_max_deg, size=3)
    translation = rng.uniform(-trans_max, trans_max, size=3)
    return RigidTransform(rot_euler_zyx(yaw, pitch, roll), translation)


def jitter(
    cloud: PointCloud,
    rng: np.random.Generator,
    sigma: float = 0.01,
    clip: float = 0.05,
) -> PointCloud:
    """Per-axis Gaussian noise (std ``sigma``) hard-clamped to ±``clip``.

    Normals are passed through; callers re-estimate them if wanted.
    """
    if sigma <= 0.0 or clip <= 0.0:
        raise ValueError("sigma and clip must be positive")
    noise = np.clip(rng.normal(0.0, sigma, size=cloud.points.shape), -clip, clip)
    return PointCloud(cloud.points + noise, cloud.normals)


def crop_halfspace(
    cloud: PointCloud,
    rng: np.random.Generator,
    keep_ratio: float = 0.7,
) -> PointCloud:
    """Keep exactly ceil(keep_ratio*N) points with the largest projection
    onto a uniformly random direction (the retained half-space)."""
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError("keep_ratio must be in (0, 1]")
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    if keep_ratio == 1.0:
        return cloud
    n_keep = int(np.ceil(keep_ratio * len(cloud)))
    proj = cloud.points @ direction
    top = np.argsort(-proj, kind="stable")[:n_keep]
    return cloud.subset(np.sort(top))


# -- primitives ------------------------------------------------------------------


def _sphere_surface(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return u.copy(), u.copy()


def _box_surface(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    half = rng.uniform(0.35, 1.0, size=3)
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    areas = np.repeat(areas, 2)  # +x, -x, +y, -y, +z, -z
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    nrm = np.zeros((n, 3))
    axis = faces // 2
    sign = np.where(faces % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    nrm[np.arange(n), axis] = sign
    return pts, nrm


def _cylinder_surface(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    radius = rng.uniform(0.35, 0.8)
    half_h = rng.uniform(0.5, 1.0)
    lateral = 2.0 * np.pi * radius * 2.0 * half_h
    cap = np.pi * radius * radius
    probs = np.array([lateral, cap, cap])
    part = rng.choice(3, size=n, p=probs / probs.sum())
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    pts = np.zeros((n, 3))
    nrm = np.zeros((n, 3))
    side = part == 0
    pts[side, 0] = radius * np.cos(phi[side])
    pts[side, 1] = radius * np.sin(phi[side])
    pts[side, 2] = rng.uniform(-half_h, half_h, size=int(side.sum()))
    nrm[side, 0] = np.cos(phi[side])
    nrm[side, 1] = np.sin(phi[side])
    for which, z_sign in ((part == 1, 1.0), (part == 2, -1.0)):
        m = int(which.sum())
        rad = radius * np.sqrt(rng.uniform(0.0, 1.0, size=m))
        pts[which, 0] = rad * np.cos(phi[which])
        pts[which, 1] = rad * np.sin(phi[which])
        pts[which, 2] = z_sign * half_h
        nrm[which, 2] = z_sign
    return pts, nrm


def _two_lobe_surface(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """A sphere fused with an offset, tilted ellipsoid.

    The generic placement (ellipsoid axes tilted, sphere center off every
    principal axis) leaves the compound with no rotational symmetry, which
    keeps ground-truth rotation identifiable — unlike the sphere and
    cylinder primitives.
    """
    r1 = rng.uniform(0.45, 0.6)
    center2 = np.array([0.55, 0.18, 0.12]) + rng.uniform(-0.05, 0.05, size=3)
    semi = np.array([0.45, 0.32, 0.22]) * rng.uniform(0.9, 1.1, size=3)
    tilt = rot_euler_zyx(*rng.uniform(10.0, 80.0, size=3))

    sphere_area = 4.0 * np.pi * r1 * r1
    # Thomsen approximation is plenty for the area-weighted surface choice
    p = 1.6075
    ap, bp, cp = semi ** p
    ell_area = 4.0 * np.pi * ((ap * bp + ap * cp + bp * cp) / 3.0) ** (1.0 / p)
    p_sphere = sphere_area / (sphere_area + ell_area)
    m_max = max(semi[0] * semi[1], semi[0] * semi[2], semi[1] * semi[2])

    def inside_sphere(pts):
        return np.linalg.norm(pts, axis=1) < r1

    def inside_ellipsoid(pts):
        local = (pts - center2) @ tilt
        return ((local / semi) ** 2).sum(axis=1) < 1.0

    pts_out = np.empty((n, 3))
    nrm_out = np.empty((n, 3))
    have = 0
    while have < n:
        batch = max(2 * (n - have), 64)
        from_sphere = rng.uniform(size=batch) < p_sphere
        u = rng.normal(size=(batch, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        accept_u = rng.uniform(size=batch)

        pts = np.where(from_sphere[:, None], r1 * u, (semi * u) @ tilt.T + center2)
        nrm_sph = u
        grad = u / semi
        nrm_ell = (grad / np.linalg.norm(grad, axis=1, keepdims=True)) @ tilt.T
        nrm = np.where(from_sphere[:, None], nrm_sph, nrm_ell)

        # area-correct acceptance for the ellipsoid parametrization
        m = np.sqrt(((semi[1] * semi[2] * u[:, 0]) ** 2
                     + (semi[0] * semi[2] * u[:, 1]) ** 2
                     + (semi[0] * semi[1] * u[:, 2]) ** 2))
        keep = np.where(from_sphere, True, accept_u < m / m_max)
        keep &= ~np.where(from_sphere, inside_ellipsoid(pts), inside_sphere(pts))

        pts, nrm = pts[keep], nrm[keep]
        take = min(n - have, pts.shape[0])
        pts_out[have: have + take] = pts[:take]
        nrm_out[have: have + take] = nrm[:take]
        have += take
    return pts_out, nrm_out


_PRIMITIVES = {
    "sphere": _sphere_surface,
    "box": _box_surface,
    "cylinder": _cylinder_surface,
    "two_lobe": _two_lobe_surface,
}


def gen_primitive(kind: str, n: int, rng: np.random.Generator) -> PointCloud:
    """Uniform surface sampling with analytic normals, scaled into the unit
    sphere (max point norm exactly 1)."""
    if kind not in _PRIMITIVES:
        raise DataError(f"unknown primitive kind '{kind}'")
    if n < 16:
        raise ValueError("need n >= 16 samples")
    pts, nrm = _PRIMITIVES[kind](n, rng)
    pts = pts / np.linalg.norm(pts, axis=1).max()
    return PointCloud(pts, nrm)


# -- pair construction -------------------------------------------------------------


@dataclass(frozen=True)
class PairConfig:
    """How a single registration pair is perturbed."""

    mode: str = "partial"  # clean | noisy | partial
    n_points: int = 128
    noise_sigma: float = 0.01
    noise_clip: float = 0.05
    keep_ratio: float = 0.7
    rot_mag_deg: float = 45.0
    trans_mag: float = 0.5
    reestimate_normals: bool = True
    normals_k: int = 20

    def __post_init__(self):
        if self.mode not in ("clean", "noisy", "partial"):
            raise DataError(f"unknown pair mode '{self.mode}'")


def make_pair(
    model: PointCloud,
    cfg: PairConfig,
    seed: int,
    pair_id: str = "pair",
) -> RegistrationPair:
    """Build one pair from a normalized model.

    Clean mode samples the same indices for both clouds; noisy and
    partial modes sample independently, then crop (partial only) and
    jitter both clouds. Point order is shuffled. Clean complete copies of
    the full model are stored in both frames.
    """
    rng = np.random.default_rng(seed)
    n_model = len(model)
    if cfg.n_points > n_model:
        raise DataError("n_points exceeds the model sample count")

    gt = sample_transform(rng, cfg.rot_mag_deg, cfg.trans_mag)
    reference_clean = model
    source_clean = apply_transform(model, invert(gt))

    if cfg.mode == "clean":
        idx = rng.choice(n_model, size=cfg.n_points, replace=False)
        src_idx, ref_idx = idx, idx
    else:
        src_idx = rng.choice(n_model, size=cfg.n_points, replace=False)
        ref_idx = rng.choice(n_model, size=cfg.n_points, replace=False)

    source = source_clean.subset(src_idx)
    reference = reference_clean.subset(ref_idx)

    if cfg.mode == "partial":
        source = crop_halfspace(source, rng, cfg.keep_ratio)
        reference = crop_halfspace(reference, rng, cfg.keep_ratio)
    if cfg.mode in ("noisy", "partial"):
        source = jitter(source, rng, cfg.noise_sigma, cfg.noise_clip)
        reference = jitter(reference, rng, cfg.noise_sigma, cfg.noise_clip)
        if cfg.reestimate_normals:
            k = min(cfg.normals_k, len(source), len(reference))
            source = PointCloud(source.points,
                                estimate_normals(source.points, k))
            reference = PointCloud(reference.points,
                                   estimate_normals(reference.points, k))

    source = source.subset(rng.permutation(len(source)))
    reference = reference.subset(rng.permutation(len(reference)))

    return RegistrationPair(source=source, reference=reference,
                            source_clean=source_clean,
                            reference_clean=reference_clean,
                            gt=gt, pair_id=pair_id, seed=seed)


@dataclass(frozen=True)
class DatasetConfig:
    """A reproducible dataset: pair protocol plus shape/count/seed choices."""

    n_pairs: int = 64
    kinds: tuple[str, ...] = ("box", "two_lobe")
    n_model: int = 512
    master_seed: int = 0
    pair: PairConfig = field(default_factory=PairConfig)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["kinds"] = list(self.kinds)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetConfig":
        doc = dict(doc)
        pair = PairConfig(**doc.pop("pair", {}))
        doc["kinds"] = tuple(doc.get("kinds", ("box", "two_lobe")))
        return cls(pair=pair, **doc)


@dataclass
class DatasetManifest:
    pair_paths: list[str]
    config: DatasetConfig
    format_version: int = MANIFEST_FORMAT_VERSION


def build_pair(cfg: DatasetConfig, index: int) -> RegistrationPair:
    """Deterministically build pair ``index`` of a dataset config."""
    seed = derive_seed(cfg.master_seed, index)
    rng = np.random.default_rng(seed)
    kind = cfg.kinds[index % len(cfg.kinds)]
    model = gen_primitive(kind, cfg.n_model, rng)
    return make_pair(model, cfg.pair, seed=derive_seed(seed, 1),
                     pair_id=f"{kind}_{index:04d}")


def generate_dataset(cfg: DatasetConfig, out_dir: str | Path) -> DatasetManifest:
    """Write pair files and the manifest; byte-identical across reruns."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: list[str] = []
    for i in range(cfg.n_pairs):
        pair = build_pair(cfg, i)
        rel = f"{pair.pair_id}.json"
        save_pair(pair, out / rel)
        paths.append(rel)
    manifest = DatasetManifest(pair_paths=paths, config=cfg)
    save_manifest(manifest, out / "manifest.json")
    return manifest


def load_dataset(manifest_path: str | Path) -> list[RegistrationPair]:
    manifest = load_manifest(manifest_path)
    base = Path(manifest_path).parent
    return [load_pair(base / rel) for rel in manifest.pair_paths]


# -- file formats -------------------------------------------------------------------


def _format_floats(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def save_cloud(cloud: PointCloud, path: str | Path) -> None:
    """Write a cloud as XYZN text (or ASCII PLY when the suffix is .ply)."""
    path = Path(path)
    rows = np.hstack([cloud.points, cloud.normals])
    if path.suffix.lower() == ".ply":
        lines = [
            "ply", "format ascii 1.0",
            f"element vertex {len(cloud)}",
            "property double x", "property double y", "property double z",
            "property double nx", "property double ny", "property double nz",
            "end_header",
        ]
        lines += [_format_floats(r) for r in rows]
    else:
        lines = ["# x y z nx ny nz"]
        lines += [_format_floats(r) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _cloud_from_rows(rows: list[list[float]], path, n_bad_normals: int,
                     return_warnings: bool):
    arr = np.asarray(rows, dtype=np.float64)
    pts, nrm = arr[:, :3], arr[:, 3:]
    lens = np.linalg.norm(nrm, axis=1)
    bad = np.abs(lens - 1.0) > 1e-6
    n_bad_normals += int(bad.sum())
    if bad.any():
        zero = lens == 0.0
        if zero.any():
            raise DataError(f"{path}: zero-length normal")
        nrm = nrm / lens[:, None]
    cloud = PointCloud(pts, nrm)
    return (cloud, n_bad_normals) if return_warnings else cloud


def load_cloud(path: str | Path, return_warnings: bool = False):
    """Read XYZN or ASCII PLY; non-unit normals are normalized (counted)."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".ply":
        return _load_ply(path, text, return_warnings)
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        parts = body.split()
        if len(parts) != 6:
            raise DataError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: no points")
    return _cloud_from_rows(rows, path, 0, return_warnings)


def _load_ply(path: Path, text: str, return_warnings: bool):
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise DataError(f"{path}: not a PLY file")
    n_vertex = None
    props: list[str] = []
    i = 1
    in_vertex = False
    if i >= len(lines) or lines[i].strip() != "format ascii 1.0":
        raise DataError(f"{path}: only 'format ascii 1.0' is supported")
    i += 1
    while i < len(lines):
        parts = lines[i].strip().split()
        i += 1
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "element":
            if parts[1] == "vertex":
                n_vertex = int(parts[2])
                in_vertex = True
            else:
                raise DataError(
                    f"{path}: unsupported element '{parts[1]}' (vertex only)")
            continue
        if parts[0] == "property":
            if not in_vertex:
                raise DataError(f"{path}: property outside vertex element")
            if parts[1] not in ("float", "float32", "double", "float64"):
                raise DataError(f"{path}: unsupported property type '{parts[1]}'")
            props.append(parts[2])
            continue
        if parts[0] == "end_header":
            break
        raise DataError(f"{path}: unsupported header line '{' '.join(parts)}'")
    else:
        raise DataError(f"{path}: missing end_header")

    if props != ["x", "y", "z", "nx", "ny", "nz"]:
        raise DataError(
            f"{path}: vertex properties must be x y z nx ny nz, got {props}")
    if n_vertex is None or n_vertex < 1:
        raise DataError(f"{path}: missing or empty vertex element")

    rows = []
    for lineno, line in enumerate(lines[i: i + n_vertex], start=i + 1):
        parts = line.split()
        if len(parts) != 6:
            raise DataError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        rows.append([float(p) for p in parts])
    if len(rows) != n_vertex:
        raise DataError(f"{path}: expected {n_vertex} vertices, got {len(rows)}")
    return _cloud_from_rows(rows, path, 0, return_warnings)


def _cloud_rows(cloud: PointCloud) -> list[list[float]]:
    return np.hstack([cloud.points, cloud.normals]).tolist()


def save_pair(pair: RegistrationPair, path: str | Path) -> None:
    doc = {
        "format_version": PAIR_FORMAT_VERSION,
        "pair_id": pair.pair_id,
        "seed": pair.seed,
        "gt": {
            "rotation": pair.gt.rotation.reshape(-1).tolist(),
            "translation": pair.gt.translation.tolist(),
        },
        "source": _cloud_rows(pair.source),
        "reference": _cloud_rows(pair.reference),
        "source_clean": _cloud_rows(pair.source_clean),
        "reference_clean": _cloud_rows(pair.reference_clean),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":"))
                          + "\n", encoding="utf-8", newline="\n")


def _cloud_from_doc(rows, path, name) -> PointCloud:
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 6:
        raise DataError(f"{path}: cloud '{name}' must be rows of 6 numbers")
    return PointCloud(arr[:, :3], arr[:, 3:])


def load_pair(path: str | Path) -> RegistrationPair:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    for key in ("format_version", "pair_id", "seed", "gt",
                "source", "reference", "source_clean", "reference_clean"):
        if key not in doc:
            raise DataError(f"{path}: missing field '{key}'")
    if int(doc["format_version"]) != PAIR_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format_version")
    gt = RigidTransform(
        np.asarray(doc["gt"]["rotation"], dtype=np.float64).reshape(3, 3),
        np.asarray(doc["gt"]["translation"], dtype=np.float64),
    )
    return RegistrationPair(
        source=_cloud_from_doc(doc["source"], path, "source"),
        reference=_cloud_from_doc(doc["reference"], path, "reference"),
        source_clean=_cloud_from_doc(doc["source_clean"], path, "source_clean"),
        reference_clean=_cloud_from_doc(doc["reference_clean"], path,
                                        "reference_clean"),
        gt=gt,
        pair_id=str(doc["pair_id"]),
        seed=int(doc["seed"]),
    )


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    doc = {
        "format_version": manifest.format_version,
        "pair_paths": manifest.pair_paths,
        "config": manifest.config.to_dict(),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n",
                          encoding="utf-8", newline="\n")


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    for key in ("format_version", "pair_paths", "config"):
        if key not in doc:
            raise DataError(f"{path}: missing field '{key}'")
    if int(doc["format_version"]) != MANIFEST_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format_version")
    return DatasetManifest(
        pair_paths=list(doc["pair_paths"]),
        config=DatasetConfig.from_dict(doc["config"]),
        format_version=int(doc["format_version"]),
    )
