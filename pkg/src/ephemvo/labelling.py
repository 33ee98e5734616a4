"""Per-pixel ephemerality from prior-vs-observed structure.

The prior static cloud is rendered into the camera (point splatting with
hidden point removal), producing expected disparity and normals per pixel.
Observed structure comes from the simulator or imported files. The
ephemerality of a pixel is a weighted sum of the absolute disparity
difference and the angle between the normals, clamped to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .errors import ConfigError, DataError
from .geometry import CameraModel, Pose, Z_MIN, project_many
from .mapping import StaticPointCloud


@dataclass(frozen=True)
class LabellingConfig:
    gamma: float = 0.1  # ephemerality per pixel of disparity error
    delta: float = 0.5  # ephemerality per radian of normal angle
    hpr_radius_scale: float = 3.0
    normal_k: int = 16
    splat_spacing: float = 0.1  # expected cloud point spacing, metres
    unlabelled_policy: str = "static"

    def __post_init__(self):
        if self.gamma < 0 or self.delta < 0:
            raise ConfigError("gamma and delta must be non-negative")
        if self.normal_k < 3:
            raise ConfigError("normal_k must be at least 3")
        if self.hpr_radius_scale <= 1.0:
            raise ConfigError("hpr_radius_scale must exceed 1")
        if self.unlabelled_policy not in ("static", "ephemeral"):
            raise ConfigError("unlabelled_policy must be 'static' or 'ephemeral'")


@dataclass
class StructureImage:
    """Per-pixel disparity and unit normals; NaN marks invalid entries.

    Disparity validity and normal validity are tracked independently: a
    splatted point with a degenerate neighbourhood still has depth, just no
    usable normal.
    """

    disparity: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        self.disparity = np.asarray(self.disparity, dtype=np.float64)
        self.normals = np.asarray(self.normals, dtype=np.float64)
        if self.disparity.ndim != 2 or self.normals.shape != self.disparity.shape + (3,):
            raise DataError("disparity must be (H,W) and normals (H,W,3)")
        valid_d = np.isfinite(self.disparity)
        if np.any(self.disparity[valid_d] <= 0):
            raise DataError("valid disparities must be positive")
        valid_n = np.all(np.isfinite(self.normals), axis=-1)
        if np.any(valid_n):
            norms = np.linalg.norm(self.normals[valid_n], axis=-1)
            if np.max(np.abs(norms - 1.0)) > 1e-6:
                raise DataError("valid normals must be unit length")

    @property
    def shape(self):
        return self.disparity.shape

    def disparity_valid(self) -> np.ndarray:
        return np.isfinite(self.disparity)

    def normal_valid(self) -> np.ndarray:
        return np.all(np.isfinite(self.normals), axis=-1)


# the prior (rendered) and observed structure share one representation
PriorStructureImage = StructureImage
ObservedStructureImage = StructureImage


@dataclass
class EphemeralityMask:
    """Per-pixel ephemerality in [0, 1]; NaN marks unlabelled pixels."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        labelled = np.isfinite(self.values)
        if np.any((self.values[labelled] < 0) | (self.values[labelled] > 1)):
            raise DataError("labelled ephemerality values must lie in [0, 1]")

    @property
    def shape(self):
        return self.values.shape

    def labelled(self) -> np.ndarray:
        return np.isfinite(self.values)


def hidden_point_removal(points_camera: np.ndarray, radius_scale: float) -> np.ndarray:
    """Visibility flags via spherical flipping about the origin.

    Each point is reflected to p * (2R/|p| - 1) with R = radius_scale times
    the largest range; a point is visible iff its reflection is a vertex of
    the convex hull of the reflected set plus the origin.
    """
    pts = np.asarray(points_camera, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros(0, dtype=bool)
    if np.any(pts[:, 2] <= 0):
        raise DataError("hidden point removal expects points in front of the camera")
    norms = np.linalg.norm(pts, axis=1)
    radius = radius_scale * norms.max()
    flipped = pts * (2.0 * radius / norms - 1.0)[:, None]
    if len(pts) < 4:
        return np.ones(len(pts), dtype=bool)
    try:
        # QbB rescales into the unit box: same hull, better conditioning
        hull = ConvexHull(np.vstack([flipped, np.zeros(3)]), qhull_options="QbB")
    except QhullError:
        return np.ones(len(pts), dtype=bool)
    visible = np.zeros(len(pts), dtype=bool)
    vertices = hull.vertices
    visible[vertices[vertices < len(pts)]] = True
    return visible


def estimate_normals(positions: np.ndarray, k: int, viewpoint) -> tuple[np.ndarray, np.ndarray]:
    """Smallest-covariance-eigenvector normals from k nearest neighbours.

    Normals are oriented toward `viewpoint`. Returns (normals (N,3),
    valid (N,)); a neighbourhood whose covariance has rank < 2 is invalid.
    """
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(pts) < k:
        raise DataError(f"need at least k={k} points for normal estimation")
    viewpoint = np.asarray(viewpoint, dtype=np.float64).reshape(3)
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k)
    neighbours = pts[idx]  # (N, k, 3)
    centred = neighbours - neighbours.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centred, centred) / k
    eigvals, eigvecs = np.linalg.eigh(cov)
    normals = eigvecs[:, :, 0]
    # rank < 2 when the two smallest eigenvalues vanish against the largest
    scale = np.maximum(eigvals[:, 2], 1e-300)
    valid = eigvals[:, 1] > 1e-8 * scale
    toward = viewpoint[None, :] - pts
    flip = np.einsum("ij,ij->i", normals, toward) < 0
    normals[flip] = -normals[flip]
    normals[~valid] = np.nan
    return normals, valid


class PriorMap:
    """Static cloud bundled with its precomputed normals, ready to render."""

    def __init__(self, static_cloud: StaticPointCloud, config: LabellingConfig, viewpoint=(0.0, 0.0, 0.0)):
        if len(static_cloud) == 0:
            raise DataError("cannot build a prior map from an empty cloud")
        self.positions = static_cloud.positions
        self.config = config
        self.normals, self.normals_valid = estimate_normals(
            self.positions, config.normal_k, viewpoint
        )


def render_prior(prior: PriorMap, pose: Pose, cam: CameraModel, config: LabellingConfig | None = None) -> StructureImage:
    """Render the static cloud into the camera at `pose` (camera-to-world).

    Visible points (after hidden point removal) splat their disparity over a
    depth-dependent w x w block, nearest depth winning and ties going to the
    lower point index. Pixels that receive no point stay invalid.
    """
    config = prior.config if config is None else config
    h, w_img = cam.height, cam.width
    disparity = np.full((h, w_img), np.nan)
    normal_img = np.full((h, w_img, 3), np.nan)

    inv = pose.inverse()
    pts_cam = prior.positions @ inv.rotation.T + inv.translation
    u_all, v_all, d_all, in_view = project_many(cam, pts_cam)
    if not np.any(in_view):
        return StructureImage(disparity, normal_img)
    vis_idx = np.flatnonzero(in_view)
    cam_pts = pts_cam[vis_idx]
    u, v, d = u_all[vis_idx], v_all[vis_idx], d_all[vis_idx]

    # Pre-cull points far behind a same-pixel occluder before the hull: a
    # strictly nearer point on the same ray flips to the segment interior,
    # so such points can never be hull vertices.
    pix = np.rint(v).astype(np.int64) * w_img + np.rint(u).astype(np.int64)
    nearest = np.full(h * w_img, np.inf)
    np.minimum.at(nearest, pix, cam_pts[:, 2])
    near_enough = cam_pts[:, 2] <= nearest[pix] * 1.4
    vis_idx = vis_idx[near_enough]
    cam_pts = cam_pts[near_enough]
    u, v, d = u[near_enough], v[near_enough], d[near_enough]

    # occlusion among the points that actually render
    visible = hidden_point_removal(cam_pts, config.hpr_radius_scale)
    vis_idx = vis_idx[visible]
    cam_pts = cam_pts[visible]
    u, v, d = u[visible], v[visible], d[visible]
    if len(u) == 0:
        return StructureImage(disparity, normal_img)

    widths = np.clip(np.rint(cam.fx * config.splat_spacing / cam_pts[:, 2]), 1, 7).astype(np.int64)
    uc = np.rint(u).astype(np.int64)
    vc = np.rint(v).astype(np.int64)

    # One candidate layer per splat width, each resolved by write order
    # (ascending disparity, descending source index), then merged by
    # (disparity, -index): the nearest point wins, ties go to the lower
    # point index, independent of the grouping.
    disp_flat = np.full(h * w_img, -np.inf)
    src_img = np.full(h * w_img, np.iinfo(np.int64).max, dtype=np.int64)
    for width in np.unique(widths):
        sel = np.flatnonzero(widths == width)
        order = np.lexsort((-sel, d[sel]))
        sel = sel[order]
        offs = np.arange(width) - (width - 1) // 2
        du, dv = np.meshgrid(offs, offs)
        uu = (uc[sel][:, None] + du.reshape(-1)[None, :]).reshape(-1)
        vv = (vc[sel][:, None] + dv.reshape(-1)[None, :]).reshape(-1)
        rep = np.repeat(sel, width * width)
        inside = (uu >= 0) & (uu < w_img) & (vv >= 0) & (vv < h)
        pix = vv[inside] * w_img + uu[inside]
        layer_disp = np.full(h * w_img, -np.inf)
        layer_src = np.full(h * w_img, np.iinfo(np.int64).max, dtype=np.int64)
        layer_disp[pix] = d[rep[inside]]
        layer_src[pix] = rep[inside]
        take = (layer_disp > disp_flat) | ((layer_disp == disp_flat) & (layer_src < src_img))
        disp_flat[take] = layer_disp[take]
        src_img[take] = layer_src[take]

    filled = np.isfinite(disp_flat)
    disparity.reshape(-1)[filled] = disp_flat[filled]
    winners = src_img[filled]
    cloud_idx = vis_idx[winners]
    n_world = prior.normals[cloud_idx]
    n_valid = prior.normals_valid[cloud_idx]
    n_cam = n_world @ pose.rotation  # world -> camera frame
    # orient toward the live camera; the PCA sign is arbitrary
    view = cam_pts[winners]
    flip = np.einsum("ij,ij->i", n_cam, view) > 0
    n_cam[flip] = -n_cam[flip]
    n_cam[~n_valid] = np.nan
    normal_img.reshape(-1, 3)[filled] = n_cam
    return StructureImage(disparity, normal_img)


def ephemerality(prior: StructureImage, observed: StructureImage, config: LabellingConfig) -> EphemeralityMask:
    """Weighted disparity-and-normal difference, clamped to [0, 1].

    A pixel is labelled when both structures carry valid disparity there;
    the normal term is dropped where either normal is invalid.
    """
    if prior.shape != observed.shape:
        raise DataError("prior and observed images must share dimensions")
    labelled = prior.disparity_valid() & observed.disparity_valid()
    disp_term = config.gamma * np.abs(prior.disparity - observed.disparity)
    both_normals = prior.normal_valid() & observed.normal_valid()
    dot = np.clip(np.einsum("hwc,hwc->hw", prior.normals, observed.normals), -1.0, 1.0)
    normal_term = np.where(both_normals, config.delta * np.arccos(np.where(both_normals, dot, 1.0)), 0.0)
    values = np.clip(disp_term + normal_term, 0.0, 1.0)
    return EphemeralityMask(np.where(labelled, values, np.nan))
