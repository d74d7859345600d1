"""Synthetic box scenes and the oracle that stands in for feature/depth models.

A scene is a handful of axis-aligned boxes, each carrying a semantic class.
Every class (plus a background "sky" class) has a unit prototype vector; the
oracle ray-casts each pixel and emits the hit class's prototype with noise,
the hit z-depth, and the class id.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Camera, pixel_centers
from .occupancy import EMPTY, GridSpec, OccupancyGrid, TextPrototypes

IGNORE = 255
DEFAULT_CLASSES = ("ground", "block", "pillar")


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    cls: int

    def to_dict(self):
        return {"min": list(map(float, self.lo)), "max": list(map(float, self.hi)), "class": int(self.cls)}


@dataclass
class SyntheticScene:
    boxes: list
    prototypes: np.ndarray  # (N_C + 1, C); last row is the background prototype
    class_names: list
    cameras: list
    grid: GridSpec
    noise_sigma: float = 0.1
    feature_downsample: int = 16
    meta: dict = field(default_factory=dict)

    @property
    def n_classes(self):
        return len(self.class_names)

    @property
    def background(self):
        return self.prototypes[-1]

    def text_prototypes(self):
        return TextPrototypes(self.prototypes[:-1], list(self.class_names))

    def feature_camera(self, v):
        return self.cameras[v].scaled(self.feature_downsample)

    def to_dict(self):
        return {
            "boxes": [b.to_dict() for b in self.boxes],
            "prototypes": self.prototypes.tolist(),
            "class_names": list(self.class_names),
            "cameras": [c.to_dict() for c in self.cameras],
            "grid": self.grid.to_dict(),
            "noise_sigma": self.noise_sigma,
            "feature_downsample": self.feature_downsample,
            **self.meta,
        }

    @classmethod
    def from_dict(cls, d):
        known = {"boxes", "prototypes", "class_names", "cameras", "grid", "noise_sigma", "feature_downsample"}
        return cls(
            [Box(np.array(b["min"]), np.array(b["max"]), b["class"]) for b in d["boxes"]],
            np.array(d["prototypes"]), list(d["class_names"]),
            [Camera.from_dict(c) for c in d["cameras"]], GridSpec.from_dict(d["grid"]),
            d["noise_sigma"], d["feature_downsample"], {k: v for k, v in d.items() if k not in known})

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def random_prototypes(n, C, rng):
    p = rng.normal(size=(n, C))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def make_scene(seed=0, C=32, n_views=2, image_size=(384, 640), focal=None, grid=None,
               noise_sigma=0.1, feature_downsample=16, class_names=DEFAULT_CLASSES,
               slab_half=4, cam_distance=(3.0, 3.5), cam_height=(3.5, 4.0), face_offset=0.0,
               box_size=(3, 5), box_height=(2, 3)):
    """Ground slab plus one box per further class, snapped to the voxel lattice.

    ``slab_half`` is the slab half-width and ``box_size``/``box_height`` the
    inclusive box footprint/height ranges, all in voxels.  ``face_offset`` (in
    voxels) shifts every box face off the voxel boundaries; 0.5 puts faces on
    voxel-center planes.  Cameras sit on a ring around the scene center
    looking down at it.
    """
    rng = np.random.default_rng(seed)
    grid = grid or GridSpec()
    vs = grid.voxel
    H, W = image_size
    focal = focal or 1.1 * W
    off = face_offset * vs
    z0 = grid.lo[2]
    center = 0.5 * (np.asarray(grid.lo[:2]) + np.asarray(grid.hi[:2]))
    half = slab_half * vs
    top = z0 + vs - off
    boxes = [Box(np.array([center[0] - half + off, center[1] - half + off, z0]),
                 np.array([center[0] + half - off, center[1] + half - off, top]), 0)]
    used = []
    for cls in range(1, len(class_names)):
        for _ in range(100):
            size = rng.integers(box_size[0], box_size[1] + 1, size=2) * vs
            height = rng.integers(box_height[0], box_height[1] + 1) * vs
            pos = center + np.round(rng.uniform(-half + vs, half - vs - size) / vs) * vs
            lo = np.array([pos[0] + off, pos[1] + off, top])
            hi = np.array([pos[0] + size[0] - off, pos[1] + size[1] - off, top + height])
            if all(np.any(lo[:2] >= u[1][:2] + vs) or np.any(hi[:2] <= u[0][:2] - vs) for u in used):
                break
        used.append((lo, hi))
        boxes.append(Box(lo, hi, cls))
    target = np.array([center[0], center[1], z0 + 0.5])
    az0 = rng.uniform(0, 2 * np.pi)
    cams = []
    for v in range(n_views):
        az = az0 + 2 * np.pi * v / n_views + rng.uniform(-0.2, 0.2)
        dist = rng.uniform(*cam_distance)
        eye = target + np.array([dist * np.cos(az), dist * np.sin(az), rng.uniform(*cam_height)])
        cams.append(Camera.look_at(eye, target, focal, focal, W, H))
    protos = random_prototypes(len(class_names) + 1, C, rng)
    return SyntheticScene(boxes, protos, list(class_names), cams, grid, noise_sigma,
                          feature_downsample, meta={"seed": int(seed)})


def ray_box_hits(origins, dirs, lo, hi):
    """Slab test.  Returns (t_near, hit) with t_near the entry parameter."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
    hit = (tmax >= tmin) & (tmax > 0)
    return np.where(tmin > 0, tmin, tmax), hit


def camera_rays(cam):
    """World-space ray origins/directions through pixel centers.

    Directions have unit camera-space z, so the ray parameter is z-depth.
    """
    pix = pixel_centers(cam.width, cam.height)
    d_cam = np.stack([(pix[:, 0] - cam.cx) / cam.fx, (pix[:, 1] - cam.cy) / cam.fy,
                      np.ones(len(pix))], axis=1)
    dirs = d_cam @ cam.rotation
    origins = np.broadcast_to(cam.center(), dirs.shape)
    return origins, dirs


def oracle_render(scene, cam, rng=None):
    """(features HxWxC, depth HxW with 0 = invalid, class map HxW with 255 = sky)."""
    origins, dirs = camera_rays(cam)
    n = len(dirs)
    depth = np.full(n, np.inf)
    cls = np.full(n, IGNORE, dtype=np.int64)
    for box in scene.boxes:
        t, hit = ray_box_hits(origins, dirs, box.lo, box.hi)
        closer = hit & (t < depth)
        depth[closer] = t[closer]
        cls[closer] = box.cls
    sky = cls == IGNORE
    protos = scene.prototypes[np.where(sky, len(scene.prototypes) - 1, cls)]
    if scene.noise_sigma > 0:
        rng = np.random.default_rng(0) if rng is None else rng
        protos = protos + rng.normal(0.0, scene.noise_sigma, size=protos.shape)
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    depth[sky] = 0.0
    H, W = cam.height, cam.width
    return protos.reshape(H, W, -1), depth.reshape(H, W), cls.reshape(H, W)


def render_views(scene, seed=0):
    """Oracle outputs for every camera at feature resolution."""
    rng = np.random.default_rng(seed)
    out = []
    for v in range(len(scene.cameras)):
        out.append(oracle_render(scene, scene.feature_camera(v), rng))
    return out


def box_overlap_fraction(box, spec):
    """Fraction of every voxel covered by ``box`` (product of 1-D overlaps)."""
    fr = []
    for k, n in enumerate(spec.dims):
        v0 = spec.lo[k] + np.arange(n) * spec.voxel
        ov = np.clip(np.minimum(v0 + spec.voxel, box.hi[k]) - np.maximum(v0, box.lo[k]), 0, None)
        fr.append(ov / spec.voxel)
    return fr[0][:, None, None] * fr[1][None, :, None] * fr[2][None, None, :]


def ground_truth_grid(scene):
    """Voxels at least half covered by a box take its class; later boxes win."""
    classes = np.full(scene.grid.dims, EMPTY, dtype=np.uint8)
    for box in scene.boxes:
        # tolerance keeps exact half-overlaps stable under rounding
        classes[box_overlap_fraction(box, scene.grid) >= 0.5 - 1e-9] = box.cls
    return OccupancyGrid(scene.grid, classes, scene.n_classes)
