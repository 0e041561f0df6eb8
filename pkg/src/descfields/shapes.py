"""Procedural shape families with exact signed-distance oracles.

Each family composes primitive SDFs (min-union / max-intersection), which
keeps the field 1-Lipschitz and sign-exact everywhere; union creases may
underestimate true distance, which is the documented inexact region.

Primitives are written against the dual-mode autodiff namespace so the same
code evaluates on plain arrays (rendering, success checks) and on Tensors
(descriptor-field gradients).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import _kernels
from .se3 import Pose, PointCloud, random_rotation
from .util import seed_stream

TASKS = ("mug_on_rack", "bowl_on_mug", "bottle_in_container")
FAMILIES = ("mug", "rack", "bowl", "bottle", "container", "table")

TASK_FAMILIES = {
    "mug_on_rack": ("rack", "mug"),
    "bowl_on_mug": ("mug", "bowl"),
    "bottle_in_container": ("container", "bottle"),
}

TABLE_REGION = 0.25  # parent/child placement range on the table (m)


# ---------------------------------------------------------------------------
# primitive SDFs (points: (...,3) array or Tensor; return (...,))


def sd_sphere(p, r, center=(0.0, 0.0, 0.0)):
    q = p - np.asarray(center, dtype=np.float64)
    return ad.norm_last(q) - r


def sd_box(p, half, center=(0.0, 0.0, 0.0)):
    q = ad.abs_(p - np.asarray(center, dtype=np.float64)) - np.asarray(half, dtype=np.float64)
    outside = ad.norm_last(ad.relu(q))
    inside = ad.minimum(ad.max_last(q), 0.0)
    return outside + inside


def sd_cylinder(p, r, z0, z1):
    """Capped cylinder along +z between heights z0 < z1."""
    zc = 0.5 * (z0 + z1)
    hh = 0.5 * (z1 - z0)
    dr = ad.norm_last(ad.getitem(p, (Ellipsis, slice(0, 2)))) - r
    dz = ad.abs_(ad.getitem(p, (Ellipsis, 2)) - zc) - hh
    outside = ad.hypot(ad.relu(dr), ad.relu(dz))
    inside = ad.minimum(ad.maximum(dr, dz), 0.0)
    return outside + inside


def sd_capsule(p, a, b, r):
    """Capsule around segment a-b with radius r."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ab = b - a
    denom = float(ab @ ab)
    pa = p - a
    h = ad.clip(ad.dot_last(pa, ab) / denom, 0.0, 1.0)
    return ad.norm_last(pa - ad.scale_last(ab, h)) - r


def sd_torus(p, ring_r, tube_r, center=(0.0, 0.0, 0.0), normal="z"):
    """Torus with ring radius ring_r and tube radius tube_r.

    normal picks the axis perpendicular to the ring plane ("y" gives the
    vertical handle ring used by mugs).
    """
    q = p - np.asarray(center, dtype=np.float64)
    if normal == "z":
        u, v, wax = 0, 1, 2
    elif normal == "y":
        u, v, wax = 0, 2, 1
    else:
        u, v, wax = 1, 2, 0
    ring = ad.norm_last(ad.getitem(q, (Ellipsis, [u, v]))) - ring_r
    return ad.hypot(ring, ad.getitem(q, (Ellipsis, wax))) - tube_r


def sd_union(*ds):
    out = ds[0]
    for d in ds[1:]:
        out = ad.minimum(out, d)
    return out


def sd_subtract(d, cut):
    """Subtract region `cut` from region `d` (max(d, -cut))."""
    return ad.maximum(d, ad.neg(cut))


# ---------------------------------------------------------------------------
# fused value+gradient kernels (pure numpy, mirror the taped compositions;
# branch conventions match ad.maximum/minimum/relu so both paths agree)


def _fg_sphere(p, r, center=(0.0, 0.0, 0.0)):
    q = p - np.asarray(center)
    n = np.sqrt(np.einsum("ij,ij->i", q, q) + 1e-300)
    return n - r, q / n[:, None]


def _fg_box(p, half, center=(0.0, 0.0, 0.0)):
    d = p - np.asarray(center)
    q = np.abs(d) - np.asarray(half)
    sgn = np.sign(d)
    qp = np.maximum(q, 0.0) * (q > 0)
    out_n = np.sqrt(np.einsum("ij,ij->i", qp, qp) + 1e-300)
    mx = q.max(axis=1)
    s = out_n * (mx > 0) + np.minimum(mx, 0.0)
    grad = np.where((mx > 0)[:, None], sgn * qp / out_n[:, None], 0.0)
    inside = mx <= 0
    if inside.any():
        rows = np.where(inside)[0]
        amax = np.argmax(q[rows], axis=1)
        g_in = np.zeros((len(rows), 3))
        g_in[np.arange(len(rows)), amax] = sgn[rows, amax]
        grad[rows] = g_in
    return s, grad


def _fg_cylinder(p, r, z0, z1):
    zc, hh = 0.5 * (z0 + z1), 0.5 * (z1 - z0)
    r2d = np.sqrt(np.einsum("ij,ij->i", p[:, :2], p[:, :2]) + 1e-300)
    dr = r2d - r
    pz = p[:, 2] - zc
    dz = np.abs(pz) - hh
    rp, zp = np.maximum(dr, 0.0), np.maximum(dz, 0.0)
    L = np.sqrt(rp * rp + zp * zp + 1e-300)
    outside = (dr > 0) | (dz > 0)
    s = np.where(outside, L, np.minimum(np.maximum(dr, dz), 0.0))
    grad = np.empty_like(p)
    radial = p[:, :2] / r2d[:, None]
    # outside: gradient of hypot(relu(dr), relu(dz)); inside: max(dr, dz) branch
    co = np.where(outside, rp / L, (dr >= dz).astype(np.float64))
    cz = np.where(outside, zp / L, (dr < dz).astype(np.float64))
    grad[:, :2] = radial * co[:, None]
    grad[:, 2] = np.sign(pz) * cz
    return s, grad


def _fg_capsule(p, a, b, r):
    a = np.asarray(a)
    b = np.asarray(b)
    ab = b - a
    denom = float(ab @ ab)
    pa = p - a
    u = pa @ ab / denom
    h = np.clip(u, 0.0, 1.0)
    e = pa - h[:, None] * ab
    n = np.sqrt(np.einsum("ij,ij->i", e, e) + 1e-300)
    eh = e / n[:, None]
    interior = ((u >= 0.0) & (u <= 1.0)).astype(np.float64)
    grad = eh - (interior * (eh @ ab) / denom)[:, None] * ab
    return n - r, grad


def _fg_torus(p, ring_r, tube_r, center=(0.0, 0.0, 0.0), normal="z"):
    q = p - np.asarray(center)
    if normal == "z":
        u, v, wax = 0, 1, 2
    elif normal == "y":
        u, v, wax = 0, 2, 1
    else:
        u, v, wax = 1, 2, 0
    r2d = np.sqrt(q[:, u] ** 2 + q[:, v] ** 2 + 1e-300)
    ring = r2d - ring_r
    L = np.sqrt(ring * ring + q[:, wax] ** 2 + 1e-300)
    grad = np.empty_like(p)
    cu = ring / L / r2d
    grad[:, u] = q[:, u] * cu
    grad[:, v] = q[:, v] * cu
    grad[:, wax] = q[:, wax] / L
    return L - tube_r, grad


def _fg_union(parts):
    """parts: list of (s, grad); min combine, first-wins ties (ad.minimum)."""
    s, grad = parts[0]
    s = s.copy()
    grad = grad.copy()
    for s2, g2 in parts[1:]:
        take = s2 < s
        s[take] = s2[take]
        grad[take] = g2[take]
    return s, grad


def _fg_subtract(d, cut):
    s1, g1 = d
    s2, g2 = cut
    take = -s2 > s1  # ad.maximum keeps the first argument on ties
    s = np.where(take, -s2, s1)
    grad = np.where(take[:, None], -g2, g1)
    return s, grad


def _fg_max(d1, d2):
    s1, g1 = d1
    s2, g2 = d2
    take = s2 > s1
    return np.where(take, s2, s1), np.where(take[:, None], g2, g1)


def _fg_mug(p, q):
    hollow = _fg_subtract(
        _fg_cylinder(p, q["body_r"], 0.0, q["height"]),
        _fg_cylinder(p, q["body_r"] - q["wall"], q["wall"], q["height"] + 0.01))
    handle = _fg_torus(p, q["handle_r"], q["handle_tube"],
                       center=(q["body_r"] + q["handle_r"] * 0.55, 0.0, 0.55 * q["height"]),
                       normal="y")
    return _fg_union([hollow, handle])


def _fg_rack(p, q):
    base = _fg_box(p, (q["base_x"], q["base_y"], q["base_h"] / 2),
                   center=(0.0, 0.0, q["base_h"] / 2))
    post = _fg_cylinder(p, q["post_r"], 0.0, q["post_h"])
    p0, d = _rack_peg(q)
    peg = _fg_capsule(p, p0, p0 + d * q["peg_len"], q["peg_r"])
    return _fg_union([base, post, peg])


def _fg_bowl(p, q):
    shell = _fg_subtract(_fg_sphere(p, q["radius"]),
                         _fg_sphere(p, q["radius"] - q["wall"]))
    plane = (p[:, 2].copy(), np.broadcast_to([0.0, 0.0, 1.0], p.shape).copy())
    return _fg_max(shell, plane)


def _fg_bottle(p, q):
    r = q["body_r"]
    body = _fg_capsule(p, (0.0, 0.0, r), (0.0, 0.0, q["body_h"] - r), r)
    neck = _fg_cylinder(p, q["neck_r_frac"] * r, q["body_h"] - r,
                        q["body_h"] + q["neck_h"])
    return _fg_union([body, neck])


def _fg_container(p, q):
    outer = _fg_box(p, (q["half_x"], q["half_y"], q["height"] / 2),
                    center=(0.0, 0.0, q["height"] / 2))
    cavity = _fg_box(p, (q["half_x"] - q["wall"], q["half_y"] - q["wall"], q["height"] / 2),
                     center=(0.0, 0.0, q["wall"] + q["height"] / 2))
    return _fg_subtract(outer, cavity)


def _fg_table(p, q):
    return _fg_box(p, (q["half_xy"], q["half_xy"], q["thickness"] / 2),
                   center=(0.0, 0.0, -q["thickness"] / 2))


_FUSED_SDFS = {
    "mug": _fg_mug,
    "rack": _fg_rack,
    "bowl": _fg_bowl,
    "bottle": _fg_bottle,
    "container": _fg_container,
    "table": _fg_table,
}


# ---------------------------------------------------------------------------
# shape families


def _mug_params(rng):
    return {
        "body_r": rng.uniform(0.030, 0.045),
        "height": rng.uniform(0.070, 0.100),
        "wall": rng.uniform(0.0035, 0.0050),
        "handle_r": rng.uniform(0.018, 0.026),
        "handle_tube": rng.uniform(0.0040, 0.0060),
    }


def _mug_sdf(p, q):
    body = sd_cylinder(p, q["body_r"], 0.0, q["height"])
    cavity = sd_cylinder(p, q["body_r"] - q["wall"], q["wall"], q["height"] + 0.01)
    hollow = sd_subtract(body, cavity)
    handle = sd_torus(p, q["handle_r"], q["handle_tube"],
                      center=(q["body_r"] + q["handle_r"] * 0.55, 0.0, 0.55 * q["height"]),
                      normal="y")
    return sd_union(hollow, handle)


def _mug_landmarks(q):
    hc = np.array([q["body_r"] + q["handle_r"] * 0.55, 0.0, 0.55 * q["height"]])
    return {
        "up_axis": np.array([0.0, 0.0, 1.0]),
        "rim_center": np.array([0.0, 0.0, q["height"]]),
        "rim_inner_r": q["body_r"] - q["wall"],
        "rim_outer_r": q["body_r"],
        "handle_center": hc,
        "handle_normal": np.array([0.0, 1.0, 0.0]),
        "handle_ring_r": q["handle_r"],
        "handle_tube_r": q["handle_tube"],
    }


def _rack_params(rng):
    return {
        "base_x": rng.uniform(0.065, 0.085),
        "base_y": rng.uniform(0.050, 0.070),
        "base_h": 0.012,
        "post_r": rng.uniform(0.009, 0.013),
        "post_h": rng.uniform(0.16, 0.22),
        "peg_r": rng.uniform(0.0055, 0.0085),
        "peg_len": rng.uniform(0.075, 0.100),
        "peg_tilt": rng.uniform(np.deg2rad(12.0), np.deg2rad(28.0)),
        "peg_height": rng.uniform(0.68, 0.82),
    }


def _rack_peg(q):
    base = np.array([q["post_r"] * 0.4, 0.0, q["peg_height"] * q["post_h"]])
    d = np.array([np.cos(q["peg_tilt"]), 0.0, np.sin(q["peg_tilt"])])
    return base, d


def _rack_sdf(p, q):
    base = sd_box(p, (q["base_x"], q["base_y"], q["base_h"] / 2),
                  center=(0.0, 0.0, q["base_h"] / 2))
    post = sd_cylinder(p, q["post_r"], 0.0, q["post_h"])
    p0, d = _rack_peg(q)
    peg = sd_capsule(p, p0, p0 + d * q["peg_len"], q["peg_r"])
    return sd_union(base, post, peg)


def _rack_landmarks(q):
    p0, d = _rack_peg(q)
    return {
        "up_axis": np.array([0.0, 0.0, 1.0]),
        "peg_base": p0,
        "peg_dir": d,
        "peg_len": q["peg_len"],
        "peg_r": q["peg_r"],
    }


def _bowl_params(rng):
    return {
        "radius": rng.uniform(0.052, 0.075),
        "wall": rng.uniform(0.0035, 0.0050),
    }


def _bowl_sdf(p, q):
    shell = sd_subtract(sd_sphere(p, q["radius"]), sd_sphere(p, q["radius"] - q["wall"]))
    # keep the lower half (opening points up); local origin is the sphere center
    return ad.maximum(shell, ad.getitem(p, (Ellipsis, 2)))


def _bowl_landmarks(q):
    return {
        "up_axis": np.array([0.0, 0.0, 1.0]),
        "outer_r": q["radius"],
        "base_point": np.array([0.0, 0.0, -q["radius"]]),
    }


def _bottle_params(rng):
    return {
        "body_r": rng.uniform(0.020, 0.030),
        "body_h": rng.uniform(0.100, 0.150),
        "neck_r_frac": rng.uniform(0.35, 0.50),
        "neck_h": rng.uniform(0.020, 0.035),
    }


def _bottle_sdf(p, q):
    r = q["body_r"]
    body = sd_capsule(p, (0.0, 0.0, r), (0.0, 0.0, q["body_h"] - r), r)
    neck = sd_cylinder(p, q["neck_r_frac"] * r, q["body_h"] - r, q["body_h"] + q["neck_h"])
    return sd_union(body, neck)


def _bottle_landmarks(q):
    return {
        "up_axis": np.array([0.0, 0.0, 1.0]),
        "base_point": np.array([0.0, 0.0, 0.0]),
        "body_r": q["body_r"],
        "top": np.array([0.0, 0.0, q["body_h"] + q["neck_h"]]),
    }


def _container_params(rng):
    return {
        "half_x": rng.uniform(0.055, 0.080),
        "half_y": rng.uniform(0.055, 0.080),
        "height": rng.uniform(0.055, 0.090),
        "wall": 0.005,
    }


def _container_sdf(p, q):
    outer = sd_box(p, (q["half_x"], q["half_y"], q["height"] / 2),
                   center=(0.0, 0.0, q["height"] / 2))
    cavity = sd_box(p, (q["half_x"] - q["wall"], q["half_y"] - q["wall"], q["height"] / 2),
                    center=(0.0, 0.0, q["wall"] + q["height"] / 2))
    return sd_subtract(outer, cavity)


def _container_landmarks(q):
    return {
        "up_axis": np.array([0.0, 0.0, 1.0]),
        "floor_center": np.array([0.0, 0.0, q["wall"]]),
        "cavity_half_x": q["half_x"] - q["wall"],
        "cavity_half_y": q["half_y"] - q["wall"],
    }


def _table_params(rng):
    return {"half_xy": 0.45, "thickness": 0.02}


def _table_sdf(p, q):
    return sd_box(p, (q["half_xy"], q["half_xy"], q["thickness"] / 2),
                  center=(0.0, 0.0, -q["thickness"] / 2))


def _table_landmarks(q):
    return {"up_axis": np.array([0.0, 0.0, 1.0]),
            "surface_center": np.array([0.0, 0.0, 0.0])}


_FAMILY_DEFS = {
    "mug": (_mug_params, _mug_sdf, _mug_landmarks),
    "rack": (_rack_params, _rack_sdf, _rack_landmarks),
    "bowl": (_bowl_params, _bowl_sdf, _bowl_landmarks),
    "bottle": (_bottle_params, _bottle_sdf, _bottle_landmarks),
    "container": (_container_params, _container_sdf, _container_landmarks),
    "table": (_table_params, _table_sdf, _table_landmarks),
}

# local z offset that puts the upright shape's lowest point at z = 0
def _rest_z(family, params, scale):
    if family == "bowl":
        return params["radius"] * scale
    return 0.0


@dataclass(eq=False)
class ShapeInstance:
    """A procedural shape: family + sampled params, posed and scaled in world."""

    family: str
    params: dict
    pose: Pose = field(default_factory=Pose.identity)
    scale: float = 1.0

    def __post_init__(self):
        if self.family not in _FAMILY_DEFS:
            raise ValueError(f"unknown family {self.family!r}")

    def sdf_local(self, pts):
        return _FAMILY_DEFS[self.family][1](pts, self.params)

    def sdf(self, pts):
        """Signed distance in world frame; dual-mode over (...,3) points."""
        R, t = self.pose.rotation, self.pose.translation
        local = ad.matmul(pts - t, R) / self.scale
        return ad.mul(self.sdf_local(local), self.scale)

    def sdf_with_grad(self, pts, use_numba=True):
        """Value and analytic gradient in one pass (world frame)."""
        pts = np.asarray(pts, dtype=np.float64)
        R, t = self.pose.rotation, self.pose.translation
        local = (pts - t) @ R / self.scale
        if use_numba and _kernels.HAVE_NUMBA:
            s, g = _kernels.fused_sdf_grad(self.family, self.params, local)
        else:
            s, g = _FUSED_SDFS[self.family](local, self.params)
        return s * self.scale, g @ R.T

    def sdf_grad(self, pts):
        return self.sdf_with_grad(pts)[1]

    def landmarks_local(self) -> dict:
        return _FAMILY_DEFS[self.family][2](self.params)

    def landmark_point(self, name) -> np.ndarray:
        """World coordinates of a named local point landmark."""
        p = self.landmarks_local()[name]
        return self.pose.rotation @ (self.scale * p) + self.pose.translation

    def landmark_dir(self, name) -> np.ndarray:
        return self.pose.rotation @ self.landmarks_local()[name]

    def length(self, name) -> float:
        """A named scalar landmark scaled to world units."""
        return float(self.landmarks_local()[name]) * self.scale

    @property
    def bounding_radius(self) -> float:
        grid = _local_bound_points(self.family, self.params)
        return float(np.max(np.linalg.norm(grid, axis=1))) * self.scale

    @property
    def rest_z(self) -> float:
        return _rest_z(self.family, self.params, self.scale)

    def at_pose(self, pose: Pose) -> "ShapeInstance":
        return replace(self, pose=pose)

    def transformed(self, T: Pose) -> "ShapeInstance":
        return replace(self, pose=T.compose(self.pose))

    def to_json(self) -> dict:
        return {"family": self.family,
                "params": {k: float(v) for k, v in self.params.items()},
                "pose": self.pose.to_json(),
                "scale": self.scale}

    @staticmethod
    def from_json(obj) -> "ShapeInstance":
        return ShapeInstance(obj["family"], dict(obj["params"]),
                             Pose.from_json(obj["pose"]), float(obj["scale"]))


def _local_bound_points(family, params):
    q = params
    if family == "mug":
        r = q["body_r"] + 2 * q["handle_r"]
        return np.array([[r, r, q["height"]], [-r, -r, 0.0]])
    if family == "rack":
        reach = q["peg_len"] + q["post_r"]
        return np.array([[q["base_x"] + reach, q["base_y"], q["post_h"]],
                         [-q["base_x"] - reach, -q["base_y"], 0.0]])
    if family == "bowl":
        r = q["radius"]
        return np.array([[r, r, 0.0], [-r, -r, -r]])
    if family == "bottle":
        r = q["body_r"]
        return np.array([[r, r, q["body_h"] + q["neck_h"]], [-r, -r, 0.0]])
    if family == "container":
        return np.array([[q["half_x"], q["half_y"], q["height"]],
                         [-q["half_x"], -q["half_y"], 0.0]])
    return np.array([[q["half_xy"], q["half_xy"], 0.0],
                     [-q["half_xy"], -q["half_xy"], -q["thickness"]]])


def make_shape(family: str, seed: int) -> ShapeInstance:
    """Deterministically sample a shape instance of the given family."""
    if family not in _FAMILY_DEFS:
        raise ValueError(f"unknown family {family!r}")
    rng = seed_stream(seed, "shape", family)
    params = _FAMILY_DEFS[family][0](rng)
    return ShapeInstance(family, params)


# ---------------------------------------------------------------------------
# point cloud rendering


def _project_to_surface(inst, pts, iters=12, tol=1e-9):
    """Slide points onto the zero level set along the SDF gradient."""
    pts = np.array(pts, dtype=np.float64)
    for _ in range(iters):
        s = inst.sdf(pts)
        if np.max(np.abs(s)) < tol:
            break
        g = inst.sdf_grad(pts)
        gn = np.linalg.norm(g, axis=1, keepdims=True)
        pts = pts - (s / np.maximum(gn[:, 0], 1e-9))[:, None] * g / np.maximum(gn, 1e-9)
    return pts


def _bound_box(inst):
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    corners = _local_bound_points(inst.family, inst.params)
    lo_l, hi_l = corners.min(axis=0), corners.max(axis=0)
    for cx in (lo_l[0], hi_l[0]):
        for cy in (lo_l[1], hi_l[1]):
            for cz in (lo_l[2], hi_l[2]):
                w = inst.pose.rotation @ (inst.scale * np.array([cx, cy, cz])) + inst.pose.translation
                lo = np.minimum(lo, w)
                hi = np.maximum(hi, w)
    return lo, hi


def _surface_samples(inst, n, rng, max_rounds=40):
    lo, hi = _bound_box(inst)
    pad = 0.05 * np.max(hi - lo)
    out = []
    got = 0
    for _ in range(max_rounds):
        cand = rng.uniform(lo - pad, hi + pad, size=(max(4 * n, 256), 3))
        proj = _project_to_surface(inst, cand)
        ok = np.abs(inst.sdf(proj)) < 1e-6
        proj = proj[ok]
        out.append(proj)
        got += len(proj)
        if got >= n:
            break
    pts = np.concatenate(out, axis=0)
    if len(pts) < n:
        raise RuntimeError(f"surface sampling starved for {inst.family}")
    idx = rng.choice(len(pts), size=n, replace=False)
    return pts[idx]


def _visible_mask(inst, pts, view_dir, t_max=None, max_steps=256):
    """Orthographic visibility: march from each point toward the camera."""
    d = np.asarray(view_dir, dtype=np.float64)
    nd = np.linalg.norm(d)
    if nd < 1e-12:
        raise ValueError("degenerate view direction")
    d = d / nd
    if t_max is None:
        t_max = 4.0 * inst.bounding_radius + 0.5
    start = 5e-4
    t = np.full(len(pts), start)
    alive = np.ones(len(pts), dtype=bool)        # still marching
    visible = np.zeros(len(pts), dtype=bool)
    for _ in range(max_steps):
        if not alive.any():
            break
        x = pts[alive] - t[alive, None] * d
        s = inst.sdf(x)
        hit = s < 1e-6
        esc = t[alive] > t_max
        idx = np.where(alive)[0]
        visible[idx[esc & ~hit]] = True
        alive[idx[hit | esc]] = False
        step = np.maximum(s, 2e-4)
        t[idx[~(hit | esc)]] += step[~(hit | esc)]
    return visible


def render_cloud(inst: ShapeInstance, n_points: int, view="full",
                 view_dir=None, seed: int = 0) -> PointCloud:
    """Sample the shape surface; single_view keeps only camera-visible points.

    view: "full" or "single_view" (view_dir = direction from camera toward
    the scene). Deterministic in seed.
    """
    if n_points < 16:
        raise ValueError("n_points must be >= 16")
    rng = seed_stream(seed, "render", inst.family, view)
    if view == "full":
        pts = _surface_samples(inst, n_points, rng)
        return PointCloud(pts, source_id=inst.family)
    if view != "single_view":
        raise ValueError(f"unknown view {view!r}")
    if view_dir is None:
        raise ValueError("single_view requires view_dir")
    surplus = _surface_samples(inst, 6 * n_points, rng)
    mask = _visible_mask(inst, surplus, view_dir)
    kept = surplus[mask]
    if len(kept) < 16:
        raise RuntimeError("single_view rendering kept too few points")
    if len(kept) >= n_points:
        idx = rng.choice(len(kept), size=n_points, replace=False)
    else:
        idx = rng.choice(len(kept), size=n_points, replace=True)
    return PointCloud(kept[idx], source_id=inst.family)


# ---------------------------------------------------------------------------
# scenes and demonstrations


@dataclass(eq=False)
class KeypointLabel:
    point: np.ndarray
    demo_index: int

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64).reshape(3)


@dataclass(eq=False)
class SceneSample:
    parent: ShapeInstance
    child: ShapeInstance
    parent_cloud: PointCloud
    child_cloud: PointCloud
    gt_relation: Pose
    pose_regime: str
    task: str
    seed: int


def _yaw_pose(rng, rest_z, region=TABLE_REGION):
    yaw = rng.uniform(0, 2 * np.pi)
    c, s = np.cos(yaw), np.sin(yaw)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    t = np.array([rng.uniform(-region, region), rng.uniform(-region, region), rest_z])
    return Pose(R, t)


def _rotation_aligning(a, b):
    """Minimal rotation taking unit vector a to unit vector b."""
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    c = float(a @ b)
    if c > 1.0 - 1e-12:
        return np.eye(3)
    if c < -1.0 + 1e-12:
        # pick any axis orthogonal to a
        ax = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(ax) < 1e-6:
            ax = np.cross(a, [0.0, 1.0, 0.0])
        ax /= np.linalg.norm(ax)
        return rot_about(ax, np.pi)
    axis = np.cross(a, b)
    s = np.linalg.norm(axis)
    axis = axis / s
    return rot_about(axis, np.arctan2(s, c))


def rot_about(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def goal_child_pose(task: str, parent: ShapeInstance, child: ShapeInstance) -> Pose:
    """Closed-form relation-satisfying world pose for the child."""
    if task == "mug_on_rack":
        p0 = parent.landmark_point("peg_base")
        d = parent.landmark_dir("peg_dir")
        peg_len = parent.length("peg_len")
        peg_r = parent.length("peg_r")
        hang_at = p0 + 0.60 * peg_len * d
        # orient: handle ring normal onto peg axis, then spin about the peg
        # to raise the mug's up-axis as much as possible
        y_local = child.landmarks_local()["handle_normal"]
        R0 = _rotation_aligning(y_local, d)
        z_world = np.array([0.0, 0.0, 1.0])
        v = R0 @ child.landmarks_local()["up_axis"]
        a_coef = float(v @ z_world - (v @ d) * (d @ z_world))
        b_coef = float(np.cross(d, v) @ z_world)
        phi = np.arctan2(b_coef, a_coef)
        R_c = rot_about(d, phi) @ R0
        # let the ring rest on top of the peg
        ring_r = child.length("handle_ring_r")
        tube_r = child.length("handle_tube_r")
        drop = max(ring_r - tube_r - peg_r, 0.0)
        down = -(z_world - (z_world @ d) * d)
        dn = np.linalg.norm(down)
        down = down / dn if dn > 1e-9 else np.array([0.0, 0.0, -1.0])
        ring_target = hang_at + drop * down
        hc = child.landmarks_local()["handle_center"] * child.scale
        t_c = ring_target - R_c @ hc
        return Pose(R_c, t_c)
    if task == "bowl_on_mug":
        rim_c = parent.landmark_point("rim_center")
        ri = parent.length("rim_inner_r")
        R_bowl = child.length("outer_r")
        if R_bowl <= ri + 1e-6:
            raise ValueError("bowl too small to rest on this mug")
        z_c = rim_c[2] + np.sqrt(R_bowl ** 2 - ri ** 2)
        # local origin of the bowl is its sphere center
        return Pose(np.eye(3), np.array([rim_c[0], rim_c[1], z_c]))
    if task == "bottle_in_container":
        floor_c = parent.landmark_point("floor_center")
        up = parent.landmark_dir("up_axis")
        # containers are placed upright; put the bottle base at the floor center
        R_c = _rotation_aligning(np.array([0.0, 0.0, 1.0]), up)
        return Pose(R_c, floor_c)
    raise ValueError(f"unknown task {task!r}")


def interaction_point(task: str, parent: ShapeInstance, child: ShapeInstance) -> np.ndarray:
    """The analytic task-relevant point on the parent (keypoint oracle)."""
    if task == "mug_on_rack":
        p0 = parent.landmark_point("peg_base")
        d = parent.landmark_dir("peg_dir")
        return p0 + 0.60 * parent.length("peg_len") * d
    if task == "bowl_on_mug":
        return parent.landmark_point("rim_center")
    if task == "bottle_in_container":
        return parent.landmark_point("floor_center")
    raise ValueError(f"unknown task {task!r}")


def sample_scene(task: str, regime: str, seed: int, n_cloud: int = 1500) -> SceneSample:
    """Procedural scene: posed parent/child, rendered clouds, analytic gt."""
    if task not in TASK_FAMILIES:
        raise ValueError(f"unknown task {task!r}")
    if regime not in ("upright", "arbitrary"):
        raise ValueError(f"unknown regime {regime!r}")
    pf, cf = TASK_FAMILIES[task]
    rng = seed_stream(seed, "scene", task, regime)
    parent = make_shape(pf, int(rng.integers(2 ** 31)))
    child = make_shape(cf, int(rng.integers(2 ** 31)))
    if task == "bowl_on_mug":
        # geometric feasibility: bowl must be wider than the mug rim
        q = dict(child.params)
        q["radius"] = max(q["radius"], parent.params["body_r"] + 0.010)
        child = replace(child, params=q)
    parent = parent.at_pose(_yaw_pose(rng, parent.rest_z))
    # child placed clear of the parent
    for _ in range(64):
        if regime == "upright":
            pose_c = _yaw_pose(rng, child.rest_z)
        else:
            R = random_rotation(rng)
            t = np.array([rng.uniform(-TABLE_REGION, TABLE_REGION),
                          rng.uniform(-TABLE_REGION, TABLE_REGION),
                          child.bounding_radius + rng.uniform(0.0, 0.05)])
            pose_c = Pose(R, t)
        gap = np.linalg.norm(pose_c.translation[:2] - parent.pose.translation[:2])
        if gap > 1.1 * (parent.bounding_radius + child.bounding_radius):
            break
    child = child.at_pose(pose_c)
    goal = goal_child_pose(task, parent, child)
    gt_relation = goal.compose(child.pose.inverse())
    parent_cloud = render_cloud(parent, n_cloud, seed=int(rng.integers(2 ** 31)))
    child_cloud = render_cloud(child, n_cloud, seed=int(rng.integers(2 ** 31)))
    return SceneSample(parent, child, parent_cloud, child_cloud,
                       gt_relation, regime, task, seed)


# ---------------------------------------------------------------------------
# SDF regression dataset


def normalized_instance(inst: ShapeInstance) -> tuple[ShapeInstance, float]:
    """Rescale so the shape fits a unit bounding box centered at the origin."""
    corners = _local_bound_points(inst.family, inst.params)
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    extent = float(np.max(hi - lo))
    center = 0.5 * (lo + hi)
    s = 1.0 / extent
    norm = ShapeInstance(inst.family, inst.params,
                         Pose(np.eye(3), -s * center), scale=s)
    return norm, s


def generate_sdf_dataset(n_shapes: int, m_points: int, family: str = "mug",
                         seed: int = 0, n_cloud: int = 300):
    """Per-shape (cloud, query points, exact signed distances), unit-box scale.

    Queries mix uniform ball samples with near-surface Gaussian offsets so
    at least 40% land within 0.05 of the boundary.
    """
    if n_shapes < 1:
        raise ValueError("n_shapes >= 1")
    samples = []
    for i in range(n_shapes):
        rng = seed_stream(seed, "sdfdata", family, i)
        inst = make_shape(family, int(rng.integers(2 ** 31)))
        norm, _ = normalized_instance(inst)
        n_near = m_points // 2
        n_far = m_points - n_near
        surf = _surface_samples(norm, n_near, rng)
        near = surf + rng.normal(0.0, 0.015, size=surf.shape)
        u = rng.standard_normal((n_far, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        far = u * (0.6 * rng.uniform(0, 1, n_far)[:, None] ** (1 / 3))
        queries = np.concatenate([near, far], axis=0)
        dists = norm.sdf(queries)
        cloud = render_cloud(norm, n_cloud, seed=int(rng.integers(2 ** 31)))
        samples.append({"shape": norm, "cloud": cloud, "queries": queries,
                        "dists": np.asarray(dists)})
    return samples
