"""Rigid registration of two objects of a category through their embeddings.

Pipeline: embedding correspondences (mutual nearest neighbours) -> RANSAC
over 3-point Kabsch solves -> ICP refinement. Because the coordinate
network is not rotation invariant, the target is embedded under a grid of
24 candidate de-rotations and the hypothesis with the most inliers wins.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud


class RegistrationError(ValueError):
    pass


@dataclass(frozen=True)
class RigidTransform:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def is_valid(self, tol: float = 1e-9) -> bool:
        return (np.abs(self.R.T @ self.R - np.eye(3)).max() < tol
                and abs(np.linalg.det(self.R) - 1.0) < tol)


@dataclass(frozen=True)
class PerturbationLevel:
    name: str
    max_angle: float  # degrees
    max_translation: float


LEVELS = {
    "easy": PerturbationLevel("easy", 10.0, 0.1),
    "medium": PerturbationLevel("medium", 20.0, 0.3),
    "hard": PerturbationLevel("hard", 45.0, 0.5),
}


def axis_angle(axis, angle_rad) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle_rad) * k + (1 - math.cos(angle_rad)) * (k @ k)


def perturb(cloud: PointCloud, level: PerturbationLevel, rng: np.random.Generator):
    """Random rigid motion within the level's bounds; returns (moved cloud, ground truth)."""
    axis = rng.normal(size=3)
    angle = math.radians(rng.uniform(0.0, level.max_angle))
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    t = direction * level.max_translation * rng.random() ** (1.0 / 3.0)
    gt = RigidTransform(axis_angle(axis, angle), t)
    moved = PointCloud(gt.apply(cloud.points), cloud.model_id, cloud.source_face, cloud.pinned, cloud.origin_index)
    return moved, gt


# ---------------------------------------------------------------------------
# Procrustes


def kabsch(a: np.ndarray, b: np.ndarray) -> RigidTransform:
    """Least-squares rotation and translation taking rows of ``a`` onto ``b``."""
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    h = (a - ca).T @ (b - cb)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, cb - r @ ca)


def _kabsch_batch(a: np.ndarray, b: np.ndarray):
    """Batched Kabsch for (I, n, 3) point sets."""
    ca, cb = a.mean(axis=1, keepdims=True), b.mean(axis=1, keepdims=True)
    h = np.einsum("inj,ink->ijk", a - ca, b - cb)
    u, _, vt = np.linalg.svd(h)
    v = np.swapaxes(vt, 1, 2)
    d = np.sign(np.linalg.det(v @ np.swapaxes(u, 1, 2)))
    d[d == 0] = 1.0
    u = u.copy()
    u[:, :, 2] *= d[:, None]
    r = v @ np.swapaxes(u, 1, 2)
    t = cb[:, 0] - np.einsum("ijk,ik->ij", r, ca[:, 0])
    return r, t


def registration_errors(estimated: RigidTransform, ground_truth: RigidTransform) -> tuple[float, float]:
    """(rotation error in degrees, translation error)."""
    c = (np.trace(estimated.R @ ground_truth.R.T) - 1.0) / 2.0
    rot = math.degrees(math.acos(min(1.0, max(-1.0, c))))
    return rot, float(np.linalg.norm(estimated.t - ground_truth.t))


# ---------------------------------------------------------------------------
# correspondences


_BLOCK = 256


def mutual_nearest(src_emb: np.ndarray, tgt_emb: np.ndarray) -> np.ndarray:
    """(K, 2) index pairs that are each other's nearest neighbour in embedding space."""
    if len(src_emb) == 0 or len(tgt_emb) == 0:
        raise RegistrationError("empty cloud")
    src_emb = np.asarray(src_emb, dtype=np.float64)
    tgt_emb = np.asarray(tgt_emb, dtype=np.float64)
    sn = np.einsum("ij,ij->i", src_emb, src_emb)
    tn = np.einsum("ij,ij->i", tgt_emb, tgt_emb)
    fwd = np.empty(len(src_emb), dtype=np.int64)
    back = np.zeros(len(tgt_emb), dtype=np.int64)
    best = np.full(len(tgt_emb), np.inf)
    # Row blocks keep the column scan cache-friendly; a later block only
    # takes over a column on a strictly smaller distance, so ties keep the
    # lowest index just like a single argmin.
    for lo in range(0, len(src_emb), _BLOCK):
        d2 = sn[lo:lo + _BLOCK, None] + tn[None, :] - 2.0 * (src_emb[lo:lo + _BLOCK] @ tgt_emb.T)
        fwd[lo:lo + _BLOCK] = np.argmin(d2, axis=1)
        arg = np.argmin(d2, axis=0)
        val = d2[arg, np.arange(len(tgt_emb))]
        better = val < best
        best[better] = val[better]
        back[better] = arg[better] + lo
    src_idx = np.flatnonzero(back[fwd] == np.arange(len(src_emb)))
    return np.stack([src_idx, fwd[src_idx]], axis=1)


def embedding_correspondences(src: PointCloud, tgt: PointCloud, model) -> np.ndarray:
    """Mutual nearest neighbours between the embeddings of two clouds."""
    _require_inductive(model)
    return mutual_nearest(model.embed_cloud(src), model.embed_cloud(tgt))


def _require_inductive(model):
    if getattr(model, "kind", None) != "coord_mlp":
        raise RegistrationError(
            f"registration needs a coord_mlp model to embed moved clouds, got {getattr(model, 'kind', model)!r}")


# ---------------------------------------------------------------------------
# RANSAC and ICP


@dataclass(frozen=True)
class RansacResult:
    transform: RigidTransform
    inlier_count: int
    inliers: np.ndarray  # boolean mask over correspondences


def _triangle_area(p):
    return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)


def ransac_align(corr, src, tgt, iterations: int = 1000, inlier_threshold: float = 0.05,
                 rng: np.random.Generator | None = None, min_area: float = 1e-9) -> RansacResult:
    """Best rigid transform by inlier count over random 3-correspondence samples.

    Collinear samples are discarded and replaced. The winner is refit on its
    inliers.
    """
    corr = np.asarray(corr, dtype=np.int64).reshape(-1, 2)
    if len(corr) < 3:
        raise RegistrationError(f"RANSAC needs at least 3 correspondences, got {len(corr)}")
    rng = rng or np.random.default_rng(0)
    a = np.asarray(getattr(src, "points", src), dtype=np.float64)[corr[:, 0]]
    b = np.asarray(getattr(tgt, "points", tgt), dtype=np.float64)[corr[:, 1]]

    samples, attempts = [], 0
    need = iterations
    while need > 0 and attempts < 10 * iterations:
        draw = rng.integers(0, len(corr), size=(need, 3))
        attempts += need
        distinct = (draw[:, 0] != draw[:, 1]) & (draw[:, 1] != draw[:, 2]) & (draw[:, 0] != draw[:, 2])
        ok = distinct & (_triangle_area(a[draw]) > min_area) & (_triangle_area(b[draw]) > min_area)
        samples.append(draw[ok])
        need -= int(ok.sum())
    samples = np.concatenate(samples)
    if len(samples) == 0:
        raise RegistrationError("every RANSAC sample was degenerate (collinear)")

    best = (-1, None)
    thr2 = inlier_threshold ** 2
    for start in range(0, len(samples), 256):
        s = samples[start:start + 256]
        r, t = _kabsch_batch(a[s], b[s])
        moved = np.matmul(a[None], np.swapaxes(r, 1, 2)) + t[:, None, :]
        counts = (np.sum((moved - b[None]) ** 2, axis=2) < thr2).sum(axis=1)
        i = int(np.argmax(counts))
        if counts[i] > best[0]:
            best = (int(counts[i]), RigidTransform(r[i], t[i]))

    def inlier_mask(tf):
        return np.sum((tf.apply(a) - b) ** 2, axis=1) < thr2

    tf = best[1]
    mask = inlier_mask(tf)
    if mask.sum() >= 3:
        refit = kabsch(a[mask], b[mask])
        refit_mask = inlier_mask(refit)
        if refit_mask.sum() >= mask.sum():
            tf, mask = refit, refit_mask
    return RansacResult(tf, int(mask.sum()), mask)


@dataclass(frozen=True)
class IcpResult:
    transform: RigidTransform
    iterations: int
    residuals: tuple  # RMS nearest-neighbour distance per iteration


def icp_refine(src, tgt, initial: RigidTransform | None = None, max_iters: int = 50,
               tolerance: float = 1e-6) -> IcpResult:
    """Point-to-point ICP from ``initial``.

    The residual is the RMS nearest-neighbour distance, which cannot increase
    between iterations; a step that would increase it is not taken.
    """
    a = np.asarray(getattr(src, "points", src), dtype=np.float64)
    b = np.asarray(getattr(tgt, "points", tgt), dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise RegistrationError("empty cloud")
    tree = cKDTree(b)
    tf = initial or RigidTransform.identity()
    residuals = []
    prev_tf = tf
    for it in range(1, max_iters + 1):
        d, j = tree.query(tf.apply(a))
        res = float(np.sqrt(np.mean(d ** 2)))
        if residuals and res > residuals[-1]:
            tf = prev_tf
            it -= 1
            break
        residuals.append(res)
        if res <= tolerance or (len(residuals) > 1 and residuals[-2] - res < tolerance):
            break
        prev_tf = tf
        tf = kabsch(a, b[j])
    return IcpResult(tf, it, tuple(residuals))


# ---------------------------------------------------------------------------
# full pipeline


def octahedral_rotations() -> list[np.ndarray]:
    """The 24 proper rotations mapping the coordinate axes onto themselves (identity first)."""
    out = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            m = np.zeros((3, 3))
            for row, (col, s) in enumerate(zip(perm, signs)):
                m[row, col] = s
            if np.linalg.det(m) > 0:
                out.append(m)
    return out


@dataclass(frozen=True)
class RegistrationResult:
    estimated: RigidTransform
    ground_truth: RigidTransform | None
    rot_error: float
    trans_error: float
    inlier_count: int
    hypothesis: int = 0


def register(src: PointCloud, tgt: PointCloud, model, rng: np.random.Generator | None = None,
             ground_truth: RigidTransform | None = None, iterations: int = 1000,
             inlier_threshold: float = 0.05, rounds: int = 3, hypotheses=None,
             icp_iters: int = 50, icp_tolerance: float = 1e-6) -> RegistrationResult:
    """Estimate the transform taking ``src`` onto ``tgt`` from embedding matches.

    Each de-rotation hypothesis starts from centroid alignment, embeds the
    target mapped back into the source frame, and re-estimates for
    ``rounds`` RANSAC passes. The hypothesis with the most inliers (lowest
    index on ties) is refined with ICP.
    """
    _require_inductive(model)
    rng = rng or np.random.default_rng(0)
    hypotheses = octahedral_rotations() if hypotheses is None else hypotheses
    src_emb = model.embed_cloud(src)
    c_src, c_tgt = src.points.mean(axis=0), tgt.points.mean(axis=0)

    best = (-1, None, -1)
    for h, g in enumerate(hypotheses):
        tf = RigidTransform(g, c_tgt - g @ c_src)
        inliers = 0
        for _ in range(rounds):
            back = tf.inverse().apply(tgt.points)
            corr = mutual_nearest(src_emb, model.forward(back))
            if len(corr) < 3:
                break
            try:
                res = ransac_align(corr, src, tgt, iterations, inlier_threshold, rng)
            except RegistrationError:
                break
            tf, inliers = res.transform, res.inlier_count
        if inliers > best[0]:
            best = (inliers, tf, h)

    inliers, tf, h = best
    if icp_iters > 0:
        tf = icp_refine(src, tgt, tf, icp_iters, icp_tolerance).transform
    rot, trans = (registration_errors(tf, ground_truth) if ground_truth is not None else (math.nan, math.nan))
    return RegistrationResult(tf, ground_truth, rot, trans, inliers, h)
