"""Point-cloud and SE(3) primitives, normal estimation, evaluation metrics.

All geometry is float64. Rotations are 3x3 matrices acting on column
vectors; a rigid transform maps x to R @ x + t and rotates normals by R.
The anisotropic error metric uses the intrinsic Z-Y-X Euler convention
(yaw, pitch, roll); the metric is convention-dependent by nature, so the
convention is fixed and documented here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

ROT_TOL = 1e-9
NORMAL_TOL = 1e-6
# brute force below this size; tree queries above
_BRUTE_NN_MAX = 32


class GeomError(ValueError):
    pass


def _as_points(a, name: str = "points") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise GeomError(f"{name} must be (N, 3), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class PointCloud:
    """N points with unit normals."""

    points: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        pts = _as_points(self.points)
        nrm = _as_points(self.normals, "normals")
        if pts.shape[0] < 1:
            raise GeomError("point cloud must contain at least one point")
        if pts.shape != nrm.shape:
            raise GeomError(f"points {pts.shape} and normals {nrm.shape} differ")
        if not np.all(np.isfinite(pts)):
            raise GeomError("non-finite coordinates")
        norms = np.linalg.norm(nrm, axis=1)
        if not np.all(np.abs(norms - 1.0) <= NORMAL_TOL):
            raise GeomError("normals must have unit length")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return self.points.shape[0]

    def subset(self, idx) -> "PointCloud":
        return PointCloud(self.points[idx], self.normals[idx])


@dataclass(frozen=True)
class RigidTransform:
    """Rotation matrix + translation vector, an element of SE(3)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        tr = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3):
            raise GeomError(f"rotation must be 3x3, got {rot.shape}")
        if np.abs(rot.T @ rot - np.eye(3)).max() > ROT_TOL:
            raise GeomError("rotation is not orthogonal")
        if abs(np.linalg.det(rot) - 1.0) > ROT_TOL:
            raise GeomError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.rotation.T + self.translation


@dataclass(frozen=True)
class MetricsReport:
    """The evaluation metrics for one registration."""

    iso_rot_deg: float
    iso_trans: float
    aniso_rot_deg: float
    aniso_trans: float
    chamfer_mod: float
    gimbal_lock: bool = False

    def as_dict(self) -> dict:
        return {
            "iso_rot_deg": self.iso_rot_deg,
            "iso_trans": self.iso_trans,
            "aniso_rot_deg": self.aniso_rot_deg,
            "aniso_trans": self.aniso_trans,
            "chamfer_mod": self.chamfer_mod,
            "gimbal_lock": self.gimbal_lock,
        }


# -- rotations ----------------------------------------------------------------


def rot_x(deg: float) -> np.ndarray:
    r = np.deg2rad(deg)
    c, s = np.cos(r), np.sin(r)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(deg: float) -> np.ndarray:
    r = np.deg2rad(deg)
    c, s = np.cos(r), np.sin(r)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(deg: float) -> np.ndarray:
    r = np.deg2rad(deg)
    c, s = np.cos(r), np.sin(r)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_euler_zyx(yaw_deg: float, pitch_deg: float, roll_deg: float) -> np.ndarray:
    """Intrinsic Z-Y-X rotation: R = Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    return rot_z(yaw_deg) @ rot_y(pitch_deg) @ rot_x(roll_deg)


def rot_axis_angle(axis: np.ndarray, deg: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    r = np.deg2rad(deg)
    k = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(r) * k + (1.0 - np.cos(r)) * (k @ k)


def euler_zyx_deg(rotation: np.ndarray) -> tuple[np.ndarray, bool]:
    """Decompose into intrinsic Z-Y-X angles (yaw, pitch, roll), degrees.

    Returns the angles and a gimbal-lock flag (|pitch| within 1e-6 deg of
    90); at the lock the roll is fixed to 0 and yaw absorbs the remainder.
    """
    r = np.asarray(rotation, dtype=np.float64)
    sin_pitch = np.clip(-r[2, 0], -1.0, 1.0)
    pitch = np.arcsin(sin_pitch)
    locked = bool(90.0 - abs(np.rad2deg(pitch)) <= 1e-6)
    if locked:
        yaw = np.arctan2(-r[0, 1], r[1, 1])
        roll = 0.0
    else:
        yaw = np.arctan2(r[1, 0], r[0, 0])
        roll = np.arctan2(r[2, 1], r[2, 2])
    return np.rad2deg(np.array([yaw, pitch, roll])), locked


# -- core operations -----------------------------------------------------------


def apply_transform(cloud: PointCloud, transform: RigidTransform) -> PointCloud:
    """Map points through R x + t and rotate normals by R."""
    rot = transform.rotation
    return PointCloud(cloud.points @ rot.T + transform.translation,
                      cloud.normals @ rot.T)


def compose(t1: RigidTransform, t2: RigidTransform) -> RigidTransform:
    """The transform applying t2 first, then t1."""
    return RigidTransform(t1.rotation @ t2.rotation,
                          t1.rotation @ t2.translation + t1.translation)


def invert(transform: RigidTransform) -> RigidTransform:
    rt = transform.rotation.T
    return RigidTransform(rt, -(rt @ transform.translation))


def rotation_angle_deg(rotation: np.ndarray) -> float:
    """Angle of a rotation matrix in [0, 180] degrees."""
    tr = float(np.trace(np.asarray(rotation, dtype=np.float64)))
    return float(np.rad2deg(np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))))


def isotropic_errors(
    t_gt: RigidTransform, t_pred: RigidTransform
) -> tuple[float, float]:
    """(angle of R_gt^-1 R_pred in degrees, |t_gt - t_pred|)."""
    rot = rotation_angle_deg(t_gt.rotation.T @ t_pred.rotation)
    trans = float(np.linalg.norm(t_gt.translation - t_pred.translation))
    return rot, trans


def anisotropic_errors(
    t_gt: RigidTransform, t_pred: RigidTransform
) -> tuple[float, float, bool]:
    """Mean absolute Euler-angle (deg) and translation-component errors.

    Convention-dependent (intrinsic Z-Y-X); the trailing flag reports
    gimbal-lock proximity of either decomposition.
    """
    e_gt, lock_gt = euler_zyx_deg(t_gt.rotation)
    e_pred, lock_pred = euler_zyx_deg(t_pred.rotation)
    rot = float(np.mean(np.abs(e_gt - e_pred)))
    trans = float(np.mean(np.abs(t_gt.translation - t_pred.translation)))
    return rot, trans, lock_gt or lock_pred


def nearest_sqdist(queries: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Squared distance from each query to its nearest reference point."""
    queries = _as_points(queries, "queries")
    refs = _as_points(refs, "refs")
    if refs.shape[0] <= _BRUTE_NN_MAX:
        diff = queries[:, None, :] - refs[None, :, :]
        return np.einsum("qrd,qrd->qr", diff, diff).min(axis=1)
    dists, _ = cKDTree(refs).query(queries, k=1)
    return np.asarray(dists, dtype=np.float64) ** 2


def modified_chamfer(
    x_pred: PointCloud,
    y: PointCloud,
    x_clean: PointCloud,
    y_clean: PointCloud,
) -> float:
    """Bidirectional mean nearest squared distance against clean/complete clouds.

    ``x_pred`` and ``x_clean`` must both already be transformed by the
    predicted transform (the clean clouds are the complete, noise-free
    samplings of either model).
    """
    fwd = nearest_sqdist(x_pred.points, y_clean.points).mean()
    bwd = nearest_sqdist(y.points, x_clean.points).mean()
    return float(fwd + bwd)


def estimate_normals(
    points: np.ndarray,
    k: int = 20,
    return_flags: bool = False,
):
    """Per-point normals from the least eigenvector of the k-NN covariance.

    Normals are oriented away from the cloud centroid. Degenerate
    neighborhoods (rank < 2 covariance) fall back to +z and are flagged.
    """
    pts = _as_points(points)
    n = pts.shape[0]
    if not 3 <= k <= n:
        raise GeomError(f"need 3 <= k <= N, got k={k}, N={n}")
    if n <= _BRUTE_NN_MAX:
        diff = pts[:, None, :] - pts[None, :, :]
        d2 = np.einsum("qrd,qrd->qr", diff, diff)
        nbrs = np.argsort(d2, axis=1, kind="stable")[:, :k]
    else:
        _, nbrs = cKDTree(pts).query(pts, k=k)

    local = pts[nbrs]  # (N, k, 3)
    centered = local - local.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    eigval, eigvec = np.linalg.eigh(cov)  # ascending eigenvalues
    normals = eigvec[:, :, 0].copy()
    flags = eigval[:, 1] <= 1e-12 * np.maximum(eigval[:, 2], 1e-300)

    normals[flags] = (0.0, 0.0, 1.0)
    lens = np.linalg.norm(normals, axis=1, keepdims=True)
    normals /= lens

    centroid = pts.mean(axis=0)
    outward = np.einsum("nd,nd->n", normals, pts - centroid)
    normals[(outward < 0.0) & ~flags] *= -1.0

    if return_flags:
        return normals, flags
    return normals


def compute_metrics(
    t_gt: RigidTransform,
    t_pred: RigidTransform,
    source: PointCloud,
    reference: PointCloud,
    source_clean: PointCloud,
    reference_clean: PointCloud,
) -> MetricsReport:
    """All evaluation metrics for one predicted registration."""
    iso_rot, iso_trans = isotropic_errors(t_gt, t_pred)
    aniso_rot, aniso_trans, lock = anisotropic_errors(t_gt, t_pred)
    chamfer = modified_chamfer(
        apply_transform(source, t_pred),
        reference,
        apply_transform(source_clean, t_pred),
        reference_clean,
    )
    return MetricsReport(iso_rot_deg=iso_rot, iso_trans=iso_trans,
                         aniso_rot_deg=aniso_rot, aniso_trans=aniso_trans,
                         chamfer_mod=chamfer, gimbal_lock=lock)
