"""Procedural shape families with exactly tracked landmarks.

Each family builds a triangle mesh from a few parts (boxes, cylinders,
cones, a swept tube) whose dimensions are drawn per model. Landmarks are
defined parametrically on a named part, so they follow every deformation
exactly and carry the index of the face they lie on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corrset import SYMMETRY_MODES, Dataset, dataset_from_dict
from .geometry import Mesh, write_obj

FAMILIES = ("tables", "rockets", "mugs")


@dataclass(frozen=True)
class Landmark:
    name: str
    part: str
    position: np.ndarray
    face: int


@dataclass(frozen=True)
class SynthModel:
    mesh: Mesh
    parts: dict  # part name -> (bbox_lo, bbox_hi, face_start, face_stop)
    landmarks: tuple[Landmark, ...]

    def landmark(self, name: str) -> Landmark:
        return next(lm for lm in self.landmarks if lm.name == name)


class _Builder:
    def __init__(self):
        self.verts: list[np.ndarray] = []
        self.faces: list[np.ndarray] = []
        self.parts: dict = {}
        self._nv = 0
        self._nf = 0
        self._marks: list[tuple[str, str, np.ndarray]] = []

    def add(self, name, v, f):
        v = np.asarray(v, dtype=np.float64)
        f = np.asarray(f, dtype=np.int64) + self._nv
        self.parts[name] = (v.min(axis=0), v.max(axis=0), self._nf, self._nf + len(f))
        self.verts.append(v)
        self.faces.append(f)
        self._nv += len(v)
        self._nf += len(f)

    def mark(self, name, part, xyz):
        self._marks.append((name, part, np.asarray(xyz, dtype=np.float64)))

    def build(self, model_id: str) -> SynthModel:
        mesh = Mesh(np.concatenate(self.verts), np.concatenate(self.faces), model_id)
        lms = tuple(Landmark(n, p, x, _locate_face(mesh, self.parts[p], x)) for n, p, x in self._marks)
        return SynthModel(mesh, self.parts, lms)


def _locate_face(mesh: Mesh, part, p) -> int:
    _, _, f0, f1 = part
    tri = mesh.vertices[mesh.faces[f0:f1]]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    v0, v1, v2 = b - a, c - a, p - a
    d00 = np.einsum("ij,ij->i", v0, v0)
    d01 = np.einsum("ij,ij->i", v0, v1)
    d11 = np.einsum("ij,ij->i", v1, v1)
    d20 = np.einsum("ij,ij->i", v2, v0)
    d21 = np.einsum("ij,ij->i", v2, v1)
    den = d00 * d11 - d01 * d01
    v = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    u = 1.0 - v - w
    bary = np.stack([u, v, w], axis=1)
    outside = np.clip(-bary, 0, None).sum(axis=1)
    recon = np.einsum("ij,ijk->ik", bary, tri)
    resid = np.linalg.norm(recon - p, axis=1) + outside
    i = int(np.argmin(resid))
    if resid[i] > 1e-9:
        raise RuntimeError(f"landmark {p} is not on its part (residual {resid[i]:.2e})")
    return f0 + i


# ---------------------------------------------------------------------------
# primitives


def _quads(quads):
    return [t for a, b, c, d in quads for t in ((a, b, c), (a, c, d))]


def box(lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    v = np.array([[(hi if (i >> k) & 1 else lo)[k] for k in range(3)] for i in range(8)])
    f = _quads([(0, 4, 6, 2), (1, 3, 7, 5), (0, 1, 5, 4), (2, 6, 7, 3), (0, 2, 3, 1), (4, 5, 7, 6)])
    return v, f


def _ring(r, z, seg, cx=0.0, cy=0.0):
    th = 2 * np.pi * np.arange(seg) / seg
    return np.stack([cx + r * np.cos(th), cy + r * np.sin(th), np.full(seg, z)], axis=1)


def ring_point(r, z, k, seg):
    th = 2 * np.pi * k / seg
    return np.array([r * np.cos(th), r * np.sin(th), z])


def cylinder(r, z0, z1, seg=32, r_top=None):
    """Closed cylinder (or frustum when ``r_top`` differs) about the z axis; cap centers are the last two vertices."""
    r_top = r if r_top is None else r_top
    v = np.concatenate([_ring(r, z0, seg), _ring(r_top, z1, seg), [[0, 0, z0], [0, 0, z1]]])
    cb, ct = 2 * seg, 2 * seg + 1
    f = []
    for k in range(seg):
        n = (k + 1) % seg
        f += _quads([(k, n, seg + n, seg + k)])
        f += [(cb, n, k), (ct, seg + k, seg + n)]
    return v, f


def cone(r, z0, z1, seg=32):
    v = np.concatenate([_ring(r, z0, seg), [[0, 0, z0], [0, 0, z1]]])
    cb, tip = seg, seg + 1
    f = []
    for k in range(seg):
        n = (k + 1) % seg
        f += [(cb, n, k), (k, n, tip)]
    return v, f


def arc_tube(cx, cz, radius, half, seg=12):
    """Square tube swept along the right half circle in the xz plane."""
    phis = np.linspace(-np.pi / 2, np.pi / 2, seg + 1)
    v = []
    for phi in phis:
        rad = np.array([np.cos(phi), 0.0, np.sin(phi)])
        c = np.array([cx, 0.0, cz]) + radius * rad
        y = np.array([0.0, 1.0, 0.0])
        v += [c - half * rad - half * y, c + half * rad - half * y,
              c + half * rad + half * y, c - half * rad + half * y]
    f = []
    for i in range(seg):
        a, b = 4 * i, 4 * (i + 1)
        for s in range(4):
            t = (s + 1) % 4
            f += _quads([(a + s, a + t, b + t, b + s)])
    f += _quads([(0, 3, 2, 1), (4 * seg, 4 * seg + 1, 4 * seg + 2, 4 * seg + 3)])
    return np.array(v), f


def _rot90z(v, k):
    """Rotate points by k quarter turns about z using exact coordinate swaps."""
    v = np.array(v, dtype=np.float64)
    for _ in range(k % 4):
        v = np.stack([-v[..., 1], v[..., 0], v[..., 2]], axis=-1)
    return v


# ---------------------------------------------------------------------------
# families
#
# Each family returns (model, landmark order, central pairs, rotational orbits).


def _table(rng, model_id):
    w = rng.uniform(1.2, 2.0)
    d = rng.uniform(0.6, 1.2)
    tt = rng.uniform(0.04, 0.10)
    h = rng.uniform(0.6, 1.1)
    lt = rng.uniform(0.05, 0.12)
    inset = rng.uniform(0.0, 0.15)
    lx, ly = w / 2 - inset - lt / 2, d / 2 - inset - lt / 2
    b = _Builder()
    b.add("top", *box([-w / 2, -d / 2, h - tt], [w / 2, d / 2, h]))
    legs = {"FL": (-1, -1), "FR": (1, -1), "BR": (1, 1), "BL": (-1, 1)}
    for name, (sx, sy) in legs.items():
        cx, cy = sx * lx, sy * ly
        b.add(f"leg_{name}", *box([cx - lt / 2, cy - lt / 2, 0.0], [cx + lt / 2, cy + lt / 2, h - tt]))
    b.mark("top_center", "top", [0, 0, h])
    for name, (sx, sy) in legs.items():
        b.mark(f"foot_{name}", f"leg_{name}", [sx * lx, sy * ly, 0.0])
        b.mark(f"corner_{name}", "top", [sx * w / 2, sy * d / 2, h])
        b.mark(f"legtop_{name}", f"leg_{name}", [sx * (lx + lt / 2), sy * (ly + lt / 2), h - tt])
    b.mark("edge_front", "top", [0, -d / 2, h])
    b.mark("edge_back", "top", [0, d / 2, h])
    b.mark("underside_center", "top", [0, 0, h - tt])
    order = ["top_center", "foot_FL", "corner_FR", "legtop_BR", "edge_front", "foot_BR", "corner_BL",
             "legtop_FL", "foot_FR", "foot_BL", "corner_FL", "corner_BR", "edge_back", "legtop_FR",
             "legtop_BL", "underside_center"]
    central = [("foot_FL", "foot_BR"), ("foot_FR", "foot_BL"), ("corner_FL", "corner_BR"),
               ("corner_FR", "corner_BL"), ("legtop_FL", "legtop_BR"), ("legtop_FR", "legtop_BL"),
               ("edge_front", "edge_back")]
    # a rectangular top only has the half-turn symmetry
    rotational = [tuple(p) for p in central]
    return b.build(model_id), order, central, rotational


def _rocket(rng, model_id, seg=32):
    r = rng.uniform(0.12, 0.22)
    length = rng.uniform(1.2, 2.0)
    nose = rng.uniform(0.3, 0.6)
    span = rng.uniform(0.15, 0.35)
    fin_h = rng.uniform(0.2, 0.45)
    fin_t = 0.02
    noz = rng.uniform(0.05, 0.15)
    z0, z1 = noz, noz + length
    b = _Builder()
    b.add("nozzle", *cylinder(0.6 * r, 0.0, z0, seg))
    b.add("body", *cylinder(r, z0, z1, seg))
    b.add("nose", *cone(r, z1, z1 + nose, seg))
    for k in range(4):
        v, f = box([0.95 * r, -fin_t / 2, z0], [r + span, fin_t / 2, z0 + fin_h])
        b.add(f"fin_{k}", _rot90z(v, k), f)
    b.mark("nose_tip", "nose", [0, 0, z1 + nose])
    b.mark("nozzle_center", "nozzle", [0, 0, 0])
    for k in range(4):
        b.mark(f"fin_tip_{k}", f"fin_{k}", _rot90z([r + span, 0, z0], k))
        b.mark(f"fin_top_{k}", f"fin_{k}", _rot90z([r + span, 0, z0 + fin_h], k))
        b.mark(f"shoulder_{k}", "body", ring_point(r, z1, k * seg // 4, seg))
        b.mark(f"body_mid_{k}", "body", ring_point(r, (z0 + z1) / 2, k * seg // 4, seg))
    b.mark("nozzle_rim_0", "nozzle", ring_point(0.6 * r, 0.0, 0, seg))
    order = ["nose_tip", "nozzle_center", "fin_tip_0", "shoulder_0", "fin_top_0", "body_mid_1",
             "fin_tip_2", "shoulder_2", "fin_tip_1", "fin_tip_3", "fin_top_2", "body_mid_3",
             "fin_top_1", "fin_top_3", "shoulder_1", "shoulder_3", "body_mid_0", "body_mid_2",
             "nozzle_rim_0"]
    central = [(f"{n}_{k}", f"{n}_{k + 2}") for n in ("fin_tip", "fin_top", "shoulder", "body_mid")
               for k in (0, 1)]
    rotational = [tuple(f"{n}_{k}" for k in range(4)) for n in ("fin_tip", "fin_top", "shoulder", "body_mid")]
    return b.build(model_id), order, central, rotational


def _mug(rng, model_id, seg=32):
    # Tapered body and a handle set high on the wall: neither a flip about the
    # handle axis nor one about the vertical axis maps the shape onto itself.
    r = rng.uniform(0.3, 0.4)
    r_top = r * rng.uniform(1.2, 1.35)
    h = rng.uniform(0.7, 1.1)
    zt = h * rng.uniform(0.8, 0.88)
    zb = h * rng.uniform(0.4, 0.5)
    half = rng.uniform(0.025, 0.05)
    rad = (zt - zb) / 2
    cz = (zt + zb) / 2
    cx = r + (r_top - r) * cz / h
    b = _Builder()
    b.add("body", *cylinder(r, 0.0, h, seg, r_top))
    b.add("handle", *arc_tube(cx, cz, rad, half))
    b.mark("handle_top", "handle", [cx, 0, zt + half])
    b.mark("base_center", "body", [0, 0, 0])
    q = seg // 4
    rims = {"handle": 0, "left": q, "opposite": 2 * q, "right": 3 * q}
    for name, k in rims.items():
        b.mark(f"rim_{name}", "body", ring_point(r_top, h, k, seg))
        b.mark(f"base_rim_{name}", "body", ring_point(r, 0.0, k, seg))
    b.mark("handle_outer", "handle", [cx + rad + half, 0, cz])
    b.mark("handle_bottom", "handle", [cx, 0, zb - half])
    b.mark("top_center", "body", [0, 0, h])
    b.mark("wall_mid_opposite", "body", ring_point((r + r_top) / 2, h / 2, 2 * q, seg))
    order = ["handle_top", "base_center", "rim_handle", "handle_outer", "rim_opposite", "handle_bottom",
             "top_center", "rim_left", "base_rim_handle", "rim_right", "base_rim_opposite",
             "wall_mid_opposite", "base_rim_left", "base_rim_right"]
    central = [("rim_handle", "rim_opposite"), ("rim_left", "rim_right"),
               ("base_rim_handle", "base_rim_opposite"), ("base_rim_left", "base_rim_right")]
    rotational = [tuple(f"rim_{n}" for n in rims), tuple(f"base_rim_{n}" for n in rims)]
    return b.build(model_id), order, central, rotational


_FAMILY_FN = {"tables": _table, "rockets": _rocket, "mugs": _mug}


def generate_model(family: str, rng: np.random.Generator, model_id: str):
    """One deformed instance: (SynthModel, landmark order, central pairs, rotational orbits)."""
    if family not in _FAMILY_FN:
        raise ValueError(f"unknown family {family!r}; valid families: {', '.join(FAMILIES)}")
    return _FAMILY_FN[family](rng, model_id)


def landmark_groups(order, central, rotational, symmetry_mode: str) -> list[list[str]]:
    """Landmarks merged into hyperpoint groups for a symmetry mode, in landmark order."""
    parent = {n: n for n in order}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    links = []
    if symmetry_mode in ("central", "both"):
        links += central
    if symmetry_mode in ("rotational", "both"):
        links += rotational
    for group in links:
        for other in group[1:]:
            parent[find(other)] = find(group[0])
    groups: dict[str, list[str]] = {}
    for n in order:
        groups.setdefault(find(n), []).append(n)
    return sorted(groups.values(), key=lambda g: order.index(g[0]))


def synthesize_category(family: str, n_models: int, n_sets: int, seed: int = 0, out_dir=None,
                        symmetry_mode: str = "none") -> Dataset:
    """Generate a category and optionally write its OBJ meshes and annotation JSON.

    Returns the normalized Dataset that parse_dataset would read back from
    the written files.
    """
    if family not in _FAMILY_FN:
        raise ValueError(f"unknown family {family!r}; valid families: {', '.join(FAMILIES)}")
    if n_models < 3:
        raise ValueError("n_models must be >= 3")
    if n_sets < 2:
        raise ValueError("n_sets must be >= 2")
    if symmetry_mode not in SYMMETRY_MODES:
        raise ValueError(f"unknown symmetry_mode {symmetry_mode!r}")

    rng = np.random.default_rng(seed)
    models = [generate_model(family, rng, f"{family}_{i:03d}") for i in range(n_models)]
    _, order, central, rotational = models[0]
    groups = landmark_groups(order, central, rotational, symmetry_mode)
    if n_sets > len(groups):
        raise ValueError(f"{family} offers {len(groups)} sets under symmetry_mode={symmetry_mode}, asked for {n_sets}")
    groups = groups[:n_sets]

    doc = {"category": family, "symmetry_mode": symmetry_mode,
           "models": [{"id": m.mesh.model_id, "mesh": f"meshes/{m.mesh.model_id}.obj"} for m, *_ in models],
           "sets": []}
    for sid, group in enumerate(groups):
        entries = []
        for m, *_ in models:
            pts = []
            for name in group:
                lm = m.landmark(name)
                pts.append({"xyz": [float(x) for x in lm.position], "face": lm.face, "uv": None, "rgb": None})
            entries.append({"model": m.mesh.model_id, "points": pts})
        doc["sets"].append({"set_id": sid, "entries": entries, "landmarks": group})

    raw = {m.mesh.model_id: m.mesh for m, *_ in models}
    if out_dir is not None:
        out = Path(out_dir)
        (out / "meshes").mkdir(parents=True, exist_ok=True)
        for mid, mesh in raw.items():
            write_obj(mesh, out / "meshes" / f"{mid}.obj")
        (out / "annotations.json").write_text(json.dumps(doc, indent=1))
        manifest = {"family": family, "n_models": n_models, "n_sets": n_sets, "seed": seed,
                    "symmetry_mode": symmetry_mode, "annotations": "annotations.json",
                    "meshes": [f"meshes/{mid}.obj" for mid in raw]}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return dataset_from_dict(doc, raw)
