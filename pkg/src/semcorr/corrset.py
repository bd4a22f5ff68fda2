"""Correspondence-set annotations: data model, JSON I/O and dataset utilities.

A category is a list of models plus a list of correspondence sets. Each set
holds at most one hyperpoint per model; a hyperpoint groups the symmetric
copies of one semantic point on that model.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import DATASET_RADIUS, DistanceMatrix, Mesh, PointCloud, load_mesh, unit_sphere_transform, write_obj

SYMMETRY_MODES = ("none", "central", "rotational", "both")
ATTACH_TOLERANCE = 0.05


class SchemaError(ValueError):
    pass


class AttachmentError(ValueError):
    pass


@dataclass(frozen=True)
class SemanticPoint:
    model_id: str
    position: tuple[float, float, float]
    face_index: int | None = None
    uv: tuple[float, float] | None = None
    color: tuple[float, float, float] | None = None
    cloud_index: int | None = None


@dataclass(frozen=True)
class Hyperpoint:
    members: tuple[SemanticPoint, ...]

    def __post_init__(self):
        if not self.members:
            raise SchemaError("hyperpoint needs at least one member")
        if len({m.model_id for m in self.members}) != 1:
            raise SchemaError("hyperpoint members must share a model")

    @property
    def model_id(self) -> str:
        return self.members[0].model_id

    @property
    def cloud_indices(self) -> list[int]:
        if any(m.cloud_index is None for m in self.members):
            raise AttachmentError(f"hyperpoint on {self.model_id} is not attached to a cloud")
        return [m.cloud_index for m in self.members]


@dataclass(frozen=True)
class CorrespondenceSet:
    set_id: int
    entries: dict  # model_id -> Hyperpoint

    def __post_init__(self):
        if len(self.entries) < 2:
            raise SchemaError(f"correspondence set {self.set_id} spans fewer than 2 models")
        for mid, h in self.entries.items():
            if h.model_id != mid:
                raise SchemaError(f"set {self.set_id}: entry key {mid} does not match its points")


@dataclass(frozen=True)
class Dataset:
    category: str
    models: tuple[str, ...]
    sets: tuple[CorrespondenceSet, ...]
    symmetry_mode: str = "none"
    meshes: dict = field(default_factory=dict, compare=False)  # model_id -> normalized Mesh
    mesh_paths: dict = field(default_factory=dict)  # model_id -> path relative to the JSON

    def __post_init__(self):
        if self.symmetry_mode not in SYMMETRY_MODES:
            raise SchemaError(f"unknown symmetry_mode {self.symmetry_mode!r}")
        known = set(self.models)
        if len(known) != len(self.models):
            raise SchemaError("duplicate model id")
        ids = [s.set_id for s in self.sets]
        if len(set(ids)) != len(ids):
            raise SchemaError("duplicate set_id")
        for s in self.sets:
            for mid, h in s.entries.items():
                if mid not in known:
                    raise SchemaError(f"set {s.set_id} references unknown model {mid!r}")
                if self.symmetry_mode == "none" and len(h.members) != 1:
                    raise SchemaError(f"set {s.set_id}: hyperpoint on {mid} but symmetry_mode is none")

    def set_by_id(self, set_id: int) -> CorrespondenceSet:
        for s in self.sets:
            if s.set_id == set_id:
                return s
        raise KeyError(set_id)

    def points_on(self, model_id: str) -> list[SemanticPoint]:
        """All annotated points on one model, in set order."""
        return [m for s in self.sets if model_id in s.entries for m in s.entries[model_id].members]

    def restrict(self, model_ids) -> "Dataset":
        """Sub-dataset on `model_ids`; sets left with fewer than 2 models are dropped."""
        keep = [m for m in self.models if m in set(model_ids)]
        ks = set(keep)
        sets = []
        for s in self.sets:
            e = {k: v for k, v in s.entries.items() if k in ks}
            if len(e) >= 2:
                sets.append(CorrespondenceSet(s.set_id, e))
        return Dataset(self.category, tuple(keep), tuple(sets), self.symmetry_mode,
                       {k: self.meshes[k] for k in keep if k in self.meshes},
                       {k: self.mesh_paths[k] for k in keep if k in self.mesh_paths})


@dataclass(frozen=True)
class Split:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def __getitem__(self, name):
        return getattr(self, name)

    def to_json(self) -> str:
        return json.dumps({"train": list(self.train), "val": list(self.val), "test": list(self.test)}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Split":
        d = json.loads(text)
        return cls(tuple(d["train"]), tuple(d["val"]), tuple(d["test"]))


# ---------------------------------------------------------------------------
# JSON (de)serialization


def _opt_tuple(v, n, what):
    if v is None:
        return None
    if not isinstance(v, (list, tuple)) or len(v) != n:
        raise SchemaError(f"{what} must be a list of {n} numbers")
    return tuple(float(x) for x in v)


def dataset_from_dict(doc: dict, meshes_raw: dict) -> Dataset:
    """Build a normalized Dataset from a parsed annotation document and raw meshes.

    Meshes are centered and scaled into a sphere of diameter 1; positions are
    mapped through the same transform as their mesh.
    """
    for key in ("category", "symmetry_mode", "models", "sets"):
        if key not in doc:
            raise SchemaError(f"annotation document lacks {key!r}")
    models = tuple(str(m["id"]) for m in doc["models"])
    paths = {str(m["id"]): m["mesh"] for m in doc["models"]}
    xforms, meshes = {}, {}
    for mid in models:
        raw = meshes_raw[mid]
        c, s = unit_sphere_transform(raw.vertices)
        s = s / DATASET_RADIUS
        if np.abs(c).max() < 1e-12 and abs(s - 1.0) < 1e-12:
            # already normalized (e.g. written by write_dataset): keep it bit-exact
            c, s = np.zeros(3), 1.0
        xforms[mid] = (c, s)
        meshes[mid] = Mesh((raw.vertices - c) / s, raw.faces, mid)

    sets = []
    for sdoc in doc["sets"]:
        sid = int(sdoc["set_id"])
        entries = {}
        for edoc in sdoc["entries"]:
            mid = str(edoc["model"])
            if mid not in xforms:
                raise SchemaError(f"set {sid} references unknown model {mid!r}")
            if mid in entries:
                raise SchemaError(f"set {sid} has two entries on model {mid!r}")
            c, s = xforms[mid]
            members = []
            for p in edoc["points"]:
                xyz = np.asarray(_opt_tuple(p["xyz"], 3, "xyz"))
                face = p.get("face")
                if face is not None and not 0 <= int(face) < len(meshes[mid].faces):
                    raise SchemaError(f"set {sid}: face index {face} invalid for model {mid!r}")
                pos = tuple(float(x) for x in (xyz - c) / s)
                members.append(SemanticPoint(mid, pos, None if face is None else int(face),
                                             _opt_tuple(p.get("uv"), 2, "uv"),
                                             _opt_tuple(p.get("rgb"), 3, "rgb")))
            entries[mid] = Hyperpoint(tuple(members))
        sets.append(CorrespondenceSet(sid, entries))
    return Dataset(str(doc["category"]), models, tuple(sets), str(doc["symmetry_mode"]), meshes, paths)


def parse_dataset(path, geometry_dir=None) -> Dataset:
    path = Path(path)
    geometry_dir = Path(geometry_dir) if geometry_dir is not None else path.parent
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: invalid JSON: {e}") from None
    raw = {}
    for m in doc.get("models", []):
        mpath = geometry_dir / m["mesh"]
        if not mpath.exists():
            raise SchemaError(f"mesh file for model {m['id']!r} not found: {mpath}")
        raw[str(m["id"])] = load_mesh(mpath, str(m["id"]))
    return dataset_from_dict(doc, raw)


def dataset_to_dict(ds: Dataset, raw_positions: dict | None = None) -> dict:
    """Annotation document. `raw_positions` maps (set_id, model_id) -> list of xyz in file units."""
    sets = []
    for s in ds.sets:
        entries = []
        for mid, h in s.entries.items():
            pts = []
            for i, m in enumerate(h.members):
                xyz = raw_positions[(s.set_id, mid)][i] if raw_positions else m.position
                pts.append({"xyz": [float(x) for x in xyz], "face": m.face_index,
                            "uv": None if m.uv is None else list(m.uv),
                            "rgb": None if m.color is None else list(m.color)})
            entries.append({"model": mid, "points": pts})
        sets.append({"set_id": s.set_id, "entries": entries})
    return {"category": ds.category, "symmetry_mode": ds.symmetry_mode,
            "models": [{"id": m, "mesh": ds.mesh_paths.get(m, f"{m}.obj")} for m in ds.models],
            "sets": sets}


def write_dataset(ds: Dataset, out_dir, name: str = "annotations.json") -> Path:
    """Write normalized meshes and annotations; parse_dataset reads them back."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for m in ds.models:
        rel = ds.mesh_paths.get(m, f"{m}.obj")
        (out_dir / rel).parent.mkdir(parents=True, exist_ok=True)
        write_obj(ds.meshes[m], out_dir / rel)
        paths[m] = rel
    ds = replace(ds, mesh_paths=paths)
    target = out_dir / name
    target.write_text(json.dumps(dataset_to_dict(ds), indent=1))
    return target


# ---------------------------------------------------------------------------
# clouds


def pinned_for_model(ds: Dataset, model_id: str):
    """Positions and faces of a model's annotated points, de-duplicated, in set order."""
    pos, faces, seen = [], [], set()
    for p in ds.points_on(model_id):
        if p.position in seen:
            continue
        seen.add(p.position)
        pos.append(p.position)
        faces.append(-1 if p.face_index is None else p.face_index)
    return np.array(pos, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64)


def attach_to_cloud(ds: Dataset, clouds: dict, tolerance: float = ATTACH_TOLERANCE) -> Dataset:
    """Give every semantic point the index of its cloud point (pinned slot, else nearest)."""
    trees = {}
    lookup = {}
    for mid in ds.models:
        if mid not in clouds:
            raise AttachmentError(f"no cloud for model {mid!r}")
        c = clouds[mid]
        trees[mid] = cKDTree(c.points)
        lookup[mid] = {tuple(c.points[i]): i for i in c.pinned}

    def attach(p: SemanticPoint) -> SemanticPoint:
        idx = lookup[p.model_id].get(p.position)
        if idx is None:
            d, idx = trees[p.model_id].query(p.position)
            if d > tolerance:
                raise AttachmentError(
                    f"point {p.position} on {p.model_id!r} is {d:.4f} from its cloud (limit {tolerance})")
        return replace(p, cloud_index=int(idx))

    sets = tuple(
        CorrespondenceSet(s.set_id, {mid: Hyperpoint(tuple(attach(m) for m in h.members))
                                     for mid, h in s.entries.items()})
        for s in ds.sets)
    return replace(ds, sets=sets)


def resolve_hyperpoint(h: Hyperpoint, rng: np.random.Generator) -> SemanticPoint:
    if len(h.members) == 1:
        return h.members[0]
    return h.members[int(rng.integers(len(h.members)))]


def split_models(ds: Dataset, seed: int = 0) -> Split:
    n = len(ds.models)
    if n < 3:
        raise ValueError(f"need at least 3 models to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    ids = [ds.models[i] for i in order]
    n_val = max(1, math.floor(0.15 * n))
    n_test = max(1, math.floor(0.15 * n))
    n_train = n - n_val - n_test
    return Split(tuple(ids[:n_train]), tuple(ids[n_train:n_train + n_val]), tuple(ids[n_train + n_val:]))


def annotated_geodesics(ds: Dataset, graphs: dict, geodesics_fn=None) -> dict:
    """Per-model distance matrices with every annotated cloud point as a source."""
    from .geometry import geodesics_from

    geodesics_fn = geodesics_fn or geodesics_from
    out = {}
    for mid in ds.models:
        src = sorted({i for h in _hyperpoints_on(ds, mid) for i in h.cloud_indices})
        if src:
            out[mid] = geodesics_fn(graphs[mid], src)
    return out


def _hyperpoints_on(ds: Dataset, mid: str):
    return [s.entries[mid] for s in ds.sets if mid in s.entries]


def _hyper_mean(dm: DistanceMatrix, a: Hyperpoint, b: Hyperpoint) -> float:
    vals = [dm(i, j) for i in a.cloud_indices for j in b.cloud_indices]
    return math.fsum(vals) / len(vals)


def set_distance(ci: CorrespondenceSet, cj: CorrespondenceSet, geodesics: dict, models=None) -> float:
    """Mean geodesic distance between two sets over the models carrying both.

    Hyperpoints contribute the mean over their member pairs. `models`
    optionally restricts which models are averaged over.
    """
    shared = [m for m in ci.entries if m in cj.entries and (models is None or m in models)]
    if not shared:
        raise ValueError(f"no model carries both set {ci.set_id} and set {cj.set_id}")
    return math.fsum(_hyper_mean(geodesics[m], ci.entries[m], cj.entries[m]) for m in shared) / len(shared)


def set_distance_table(ds: Dataset, geodesics: dict, models=None) -> dict:
    """{(set_i, set_j): d} for every ordered pair of distinct sets sharing a model."""
    table = {}
    for a in range(len(ds.sets)):
        for b in range(a + 1, len(ds.sets)):
            ci, cj = ds.sets[a], ds.sets[b]
            try:
                d = set_distance(ci, cj, geodesics, models)
            except ValueError:
                continue
            table[(ci.set_id, cj.set_id)] = d
            table[(cj.set_id, ci.set_id)] = d
    return table


def crop_partial(cloud: PointCloud, keep_fraction: float, seed: int = 0, center_index: int | None = None) -> PointCloud:
    """Remove the ball of points nearest a random seed point.

    The ball grows until round((1 - keep_fraction) * N) points are gone. Pinned
    indices are remapped onto the surviving points.
    """
    if not 0.0 < keep_fraction < 1.0:
        raise ValueError(f"keep_fraction must lie in (0, 1), got {keep_fraction}")
    n = len(cloud)
    if center_index is None:
        center_index = int(np.random.default_rng(seed).integers(n))
    n_remove = int(round((1.0 - keep_fraction) * n))
    d = np.linalg.norm(cloud.points - cloud.points[center_index], axis=1)
    order = np.lexsort((np.arange(n), d))
    keep = np.sort(order[n_remove:])
    new_index = np.full(n, -1)
    new_index[keep] = np.arange(len(keep))
    pinned = tuple(int(new_index[i]) for i in cloud.pinned if new_index[i] >= 0)
    src = None if cloud.source_face is None else cloud.source_face[keep]
    return PointCloud(cloud.points[keep], cloud.model_id, src, pinned, cloud.origin_index[keep])
