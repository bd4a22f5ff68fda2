"""Point embeddings trained with a pull loss and a geodesic-consistency push loss.

Two embedding models share one small interface (``params``, ``embed``,
``embed_cloud``, ``backward``):

* ``FreeTable``: one free vector per sampled point per model (transductive).
* ``CoordMLP``: a 3 -> 64 -> 64 -> D tanh network of the point coordinates.

Losses return their value together with a gradient dict keyed like
``model.params``, so the optimizer never needs autodiff.
"""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .corrset import Dataset, resolve_hyperpoint, set_distance_table

KINDS = ("free_table", "coord_mlp")


class PointRef(NamedTuple):
    model_id: str
    index: int  # index into the model's sampled cloud
    xyz: tuple


class EmbeddingError(ValueError):
    pass


class FreeTable:
    kind = "free_table"

    def __init__(self, tables: dict):
        self.params = {f"table:{m}": np.asarray(t, dtype=np.float64) for m, t in tables.items()}
        dims = {t.shape[1] for t in self.params.values()}
        if len(dims) != 1:
            raise EmbeddingError("all tables must share one dimension")
        self.dimension = dims.pop()

    @classmethod
    def init(cls, sizes: dict, dimension: int = 128, rng=None, scale: float = 0.01):
        rng = rng or np.random.default_rng(0)
        return cls({m: rng.uniform(-scale, scale, size=(n, dimension)) for m, n in sizes.items()})

    @property
    def models(self) -> list[str]:
        return [k.split(":", 1)[1] for k in self.params]

    def _table(self, model_id):
        try:
            return self.params[f"table:{model_id}"]
        except KeyError:
            raise EmbeddingError(f"free table has no rows for model {model_id!r}") from None

    def embed(self, refs) -> np.ndarray:
        out = np.empty((len(refs), self.dimension))
        for i, r in enumerate(refs):
            t = self._table(r.model_id)
            if not 0 <= r.index < len(t):
                raise EmbeddingError(f"row {r.index} out of range for model {r.model_id!r}")
            out[i] = t[r.index]
        return out

    def embed_cloud(self, cloud) -> np.ndarray:
        t = self._table(cloud.model_id)
        if len(t) <= cloud.origin_index.max():
            raise EmbeddingError(f"cloud of {cloud.model_id!r} is larger than its table")
        return t[cloud.origin_index]

    def backward(self, refs, grad_e: np.ndarray) -> dict:
        """Gradients for the tables touched by ``refs``; absent tables have zero gradient."""
        grads = {}
        for r, g in zip(refs, grad_e):
            key = f"table:{r.model_id}"
            if key not in grads:
                grads[key] = np.zeros_like(self.params[key])
            grads[key][r.index] += g
        return grads


class CoordMLP:
    kind = "coord_mlp"
    hidden = 64

    def __init__(self, params: dict):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.dimension = self.params["W3"].shape[1]

    @classmethod
    def init(cls, dimension: int = 128, rng=None):
        rng = rng or np.random.default_rng(0)
        h = cls.hidden
        p = {}
        for name, (fan_in, fan_out) in {"1": (3, h), "2": (h, h), "3": (h, dimension)}.items():
            bound = 1.0 / math.sqrt(fan_in)
            p["W" + name] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            p["b" + name] = rng.uniform(-bound, bound, size=fan_out)
        return cls(p)

    def _forward(self, x):
        p = self.params
        h1 = np.tanh(x @ p["W1"] + p["b1"])
        h2 = np.tanh(h1 @ p["W2"] + p["b2"])
        return h1, h2, h2 @ p["W3"] + p["b3"]

    def forward(self, xyz) -> np.ndarray:
        return self._forward(np.asarray(xyz, dtype=np.float64).reshape(-1, 3))[2]

    def embed(self, refs) -> np.ndarray:
        if any(r.xyz is None for r in refs):
            raise EmbeddingError("coord_mlp needs xyz on every point reference")
        return self.forward(np.array([r.xyz for r in refs], dtype=np.float64))

    def embed_cloud(self, cloud) -> np.ndarray:
        return self.forward(cloud.points)

    def backward(self, refs, grad_e: np.ndarray) -> dict:
        p = self.params
        x = np.array([r.xyz for r in refs], dtype=np.float64)
        h1, h2, _ = self._forward(x)
        d2 = (grad_e @ p["W3"].T) * (1.0 - h2 ** 2)
        d1 = (d2 @ p["W2"].T) * (1.0 - h1 ** 2)
        return {"W3": h2.T @ grad_e, "b3": grad_e.sum(axis=0),
                "W2": h1.T @ d2, "b2": d2.sum(axis=0),
                "W1": x.T @ d1, "b1": d1.sum(axis=0)}


def make_model(kind: str, dimension: int = 128, cloud_sizes: dict | None = None, rng=None):
    if kind == "free_table":
        if cloud_sizes is None:
            raise EmbeddingError("free_table needs the cloud size of every model")
        return FreeTable.init(cloud_sizes, dimension, rng)
    if kind == "coord_mlp":
        return CoordMLP.init(dimension, rng)
    raise EmbeddingError(f"unknown model kind {kind!r}; expected one of {KINDS}")


# ---------------------------------------------------------------------------
# batches and losses


@dataclass
class PairBatch:
    refs: list  # unique PointRefs
    pos: np.ndarray  # (P, 2) indices into refs
    pos_sets: np.ndarray  # (P,)
    neg: np.ndarray  # (Q, 2)
    neg_sets: np.ndarray  # (Q, 2)
    margins: np.ndarray  # (Q,) set distances d(C_i, C_j)

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=np.int64).reshape(-1, 2)
        self.neg = np.asarray(self.neg, dtype=np.int64).reshape(-1, 2)
        self.pos_sets = np.asarray(self.pos_sets, dtype=np.int64).reshape(-1)
        self.neg_sets = np.asarray(self.neg_sets, dtype=np.int64).reshape(-1, 2)
        self.margins = np.asarray(self.margins, dtype=np.float64).reshape(-1)
        if len(self.margins) != len(self.neg):
            raise ValueError("one margin per negative pair")
        if np.any(self.margins <= 0):
            raise ValueError("negative-pair margins must be positive")
        if len(self.neg_sets) and np.any(self.neg_sets[:, 0] == self.neg_sets[:, 1]):
            raise ValueError("negative pairs must come from different sets")

    @property
    def n_keep(self) -> int:
        """Hard negatives to keep: as many as there are positive pairs."""
        return min(len(self.pos), len(self.neg))

    def with_negatives(self, keep: np.ndarray) -> "PairBatch":
        return PairBatch(self.refs, self.pos, self.pos_sets, self.neg[keep], self.neg_sets[keep], self.margins[keep])


@dataclass(frozen=True)
class LossReport:
    pull: float
    push: float
    total: float
    lam: float
    active_negatives: int


def _pair_terms(emb, pairs):
    diff = emb[pairs[:, 0]] - emb[pairs[:, 1]]
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return diff, dist


def _unit(diff, dist):
    # subgradient 0 at coincident embeddings
    safe = np.where(dist > 0, dist, 1.0)
    return np.where((dist > 0)[:, None], diff / safe[:, None], 0.0)


def _scatter(n, pairs, g):
    out = np.zeros((n, g.shape[1]))
    np.add.at(out, pairs[:, 0], g)
    np.add.at(out, pairs[:, 1], -g)
    return out


def pull_terms(emb, pos):
    """Pull loss value and its gradient w.r.t. the embedding rows."""
    if len(pos) == 0:
        raise ValueError("pull loss needs at least one positive pair")
    diff, dist = _pair_terms(emb, pos)
    value = float(np.sum(dist) / len(pos))
    return value, _scatter(len(emb), pos, _unit(diff, dist) / len(pos))


def push_terms(emb, neg, margins):
    """Hinge push loss value, gradient w.r.t. embedding rows, active pair count."""
    if len(neg) == 0:
        raise ValueError("push loss needs at least one negative pair")
    diff, dist = _pair_terms(emb, neg)
    hinge = margins - dist
    active = hinge > 0
    value = float(np.sum(np.where(active, hinge, 0.0)) / len(neg))
    g = -_unit(diff, dist) * (active / len(neg))[:, None]
    return value, _scatter(len(emb), neg, g), int(active.sum())


def _scale_grads(grads, s):
    return {k: s * v for k, v in grads.items()}


def pull_loss(batch: PairBatch, model):
    emb = model.embed(batch.refs)
    value, ge = pull_terms(emb, batch.pos)
    return value, model.backward(batch.refs, ge)


def push_loss(batch: PairBatch, model):
    emb = model.embed(batch.refs)
    value, ge, active = push_terms(emb, batch.neg, batch.margins)
    return value, model.backward(batch.refs, ge), active


def total_loss(batch: PairBatch, model, lam: float = 1.0):
    """Pull + lam * push with the matching gradient. A batch without negatives has zero push."""
    emb = model.embed(batch.refs)
    pull, ge = pull_terms(emb, batch.pos)
    push, active = 0.0, 0
    if len(batch.neg):
        push, ge_push, active = push_terms(emb, batch.neg, batch.margins)
        ge = ge + lam * ge_push
    report = LossReport(pull, push, pull + lam * push, lam, active)
    return report, model.backward(batch.refs, ge)


def mine_hard_negatives(batch: PairBatch, model, n_keep: int | None = None) -> PairBatch:
    """Keep the n_keep negatives with the smallest embedding distance (stable on ties)."""
    n_keep = batch.n_keep if n_keep is None else n_keep
    if n_keep > len(batch.neg):
        raise ValueError(f"n_keep={n_keep} exceeds the {len(batch.neg)} candidates")
    if n_keep == len(batch.neg):
        return batch
    _, dist = _pair_terms(model.embed(batch.refs), batch.neg)
    keep = np.sort(np.argsort(dist, kind="stable")[:n_keep])
    return batch.with_negatives(keep)


def make_batch(ds: Dataset, margins: dict, rng: np.random.Generator, model_ids=None,
               batch_models: int = 4, pool=None, same_model_negatives: bool = False) -> PairBatch:
    """Positive and candidate negative pairs among a handful of models.

    Without ``model_ids``, ``batch_models`` models are drawn from ``pool``
    (default: every model). Each hyperpoint is resolved to one random member
    for the whole batch. Positives are all cross-model pairs within a set;
    negative candidates are all pairs across two sets that have a margin.
    """
    if model_ids is None:
        pool = list(ds.models if pool is None else pool)
        k = min(batch_models, len(pool))
        model_ids = [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]
    model_ids = list(model_ids)

    refs, slot = [], {}  # (set_id, model) -> ref index
    for mid in model_ids:
        carried = [s for s in ds.sets if mid in s.entries]
        if not carried:
            raise EmbeddingError(f"model {mid!r} has no annotations")
        for s in carried:
            p = resolve_hyperpoint(s.entries[mid], rng)
            if p.cloud_index is None:
                raise EmbeddingError(f"point on {mid!r} is not attached to a cloud")
            slot[(s.set_id, mid)] = len(refs)
            refs.append(PointRef(mid, p.cloud_index, p.position))

    pos, pos_sets = [], []
    for s in ds.sets:
        on = [m for m in model_ids if (s.set_id, m) in slot]
        for a in range(len(on)):
            for b in range(a + 1, len(on)):
                pos.append((slot[(s.set_id, on[a])], slot[(s.set_id, on[b])]))
                pos_sets.append(s.set_id)

    neg, neg_sets, marg = [], [], []
    for a in range(len(ds.sets)):
        for b in range(a + 1, len(ds.sets)):
            si, sj = ds.sets[a].set_id, ds.sets[b].set_id
            m = margins.get((si, sj))
            if m is None or m <= 0:
                continue
            for mp in model_ids:
                if (si, mp) not in slot:
                    continue
                for mq in model_ids:
                    if (sj, mq) not in slot or (same_model_negatives and mp != mq):
                        continue
                    neg.append((slot[(si, mp)], slot[(sj, mq)]))
                    neg_sets.append((si, sj))
                    marg.append(m)
    return PairBatch(refs, pos, pos_sets, neg, neg_sets, marg)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class TrainConfig:
    kind: str = "free_table"
    dimension: int = 128
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_models: int = 4
    lr_decay: float = 0.9
    decay_every: int = 10
    lam: float = 1.0
    epochs: int = 100
    seed: int = 0
    eval_every: int = 10
    same_model_negatives: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if not (self.lr > 0 and 0 < self.beta1 < 1 and 0 < self.beta2 < 1 and self.eps > 0):
            raise ValueError("learning rate and moment rates must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.decay_every)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(model, grads: dict, state: AdamState, config: TrainConfig, epoch: int = 0):
    """One bias-corrected Adam update of ``model.params`` in place."""
    for k, g in grads.items():
        if k not in model.params or g.shape != model.params[k].shape:
            raise ValueError(f"gradient {k!r} does not match the model parameters")
    state.t += 1
    lr = config.lr_at(epoch)
    c1 = 1.0 - config.beta1 ** state.t
    c2 = 1.0 - config.beta2 ** state.t
    for k, p in model.params.items():
        g = grads.get(k)  # absent means zero
        if g is None and k not in state.m:
            continue  # zero moments and zero gradient: nothing moves
        m = state.m.setdefault(k, np.zeros_like(p))
        v = state.v.setdefault(k, np.zeros_like(p))
        m *= config.beta1
        v *= config.beta2
        if g is not None:
            m += (1.0 - config.beta1) * g
            v += (1.0 - config.beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return model, state


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class StepRecord:
    epoch: int
    step: int
    pull: float
    push: float
    total: float
    active_negatives: int
    lr: float


@dataclass
class TrainResult:
    model: object
    history: list
    val_history: list  # (epoch, val mGE)
    best_epoch: int
    margins: dict


def train(ds: Dataset, clouds: dict, geodesics: dict, config: TrainConfig, fit_models=None,
          val_models=None, log=None) -> TrainResult:
    """Minibatch training; keeps the parameter snapshot with the lowest validation mGE.

    ``fit_models`` are the models batches are drawn from and the margins are
    averaged over. ``val_models`` (optional) drive snapshot selection.
    """
    from .metrics import mge

    fit_models = list(ds.models if fit_models is None else fit_models)
    rng = np.random.default_rng(config.seed)
    if config.kind == "free_table":
        model = make_model("free_table", config.dimension, {m: len(clouds[m]) for m in ds.models}, rng)
    else:
        model = make_model(config.kind, config.dimension, rng=rng)
    margins = set_distance_table(ds, geodesics, models=set(fit_models))
    state = AdamState()
    n_chunks = max(1, math.ceil(len(fit_models) / config.batch_models))
    history, val_history = [], []
    best = (math.inf, -1, None)
    val_ds = ds.restrict(val_models) if val_models else None
    if val_ds is not None and not val_ds.sets:
        val_ds = None

    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(fit_models))
        for chunk in np.array_split(order, n_chunks):
            batch = make_batch(ds, margins, rng, [fit_models[i] for i in chunk],
                               same_model_negatives=config.same_model_negatives)
            if len(batch.pos) == 0:
                continue
            batch = mine_hard_negatives(batch, model)
            report, grads = total_loss(batch, model, config.lam)
            adam_step(model, grads, state, config, epoch)
            history.append(StepRecord(epoch, step, report.pull, report.push, report.total,
                                      report.active_negatives, config.lr_at(epoch)))
            step += 1
        last = epoch == config.epochs - 1
        if val_ds is not None and ((epoch + 1) % config.eval_every == 0 or last):
            err = mge(model, val_ds, clouds, geodesics=geodesics).mge
            val_history.append((epoch, err))
            if err < best[0]:
                best = (err, epoch, copy.deepcopy(model.params))
        if log is not None and ((epoch + 1) % config.eval_every == 0 or last):
            r = history[-1] if history else None
            log(f"epoch {epoch + 1}/{config.epochs} total={r.total if r else float('nan'):.4f}")

    best_epoch = config.epochs - 1
    if best[2] is not None:
        model.params = best[2]
        best_epoch = best[1]
    return TrainResult(model, history, val_history, best_epoch, margins)


def mean_pairwise_distance(emb: np.ndarray) -> float:
    """Mean Euclidean distance over all unordered pairs of rows."""
    n = len(emb)
    if n < 2:
        return 0.0
    i, j = np.triu_indices(n, 1)
    return float(np.linalg.norm(emb[i] - emb[j], axis=1).mean())


def annotated_embeddings(model, ds: Dataset) -> np.ndarray:
    refs = [PointRef(p.model_id, p.cloud_index, p.position) for m in ds.models for p in ds.points_on(m)]
    return model.embed(refs)


# ---------------------------------------------------------------------------
# serialization


def save_model(model, path) -> Path:
    """JSON header at ``path`` plus a little-endian float64 blob beside it."""
    path = Path(path)
    blob = path.with_suffix(".bin")
    layout, offset, chunks = [], 0, []
    for name in sorted(model.params):
        a = np.ascontiguousarray(model.params[name], dtype="<f8")
        layout.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        chunks.append(a.tobytes())
    header = {"kind": model.kind, "dimension": int(model.dimension),
              "models": model.models if isinstance(model, FreeTable) else [],
              "blob": blob.name, "params": layout}
    path.write_text(json.dumps(header, indent=1))
    blob.write_bytes(b"".join(chunks))
    return path


def load_model(path):
    path = Path(path)
    header = json.loads(path.read_text())
    data = np.frombuffer((path.parent / header["blob"]).read_bytes(), dtype="<f8")
    params = {}
    for entry in header["params"]:
        size = int(np.prod(entry["shape"]))
        params[entry["name"]] = data[entry["offset"]:entry["offset"] + size].reshape(entry["shape"]).copy()
    if header["kind"] == "free_table":
        return FreeTable({k.split(":", 1)[1]: v for k, v in params.items()})
    if header["kind"] == "coord_mlp":
        return CoordMLP(params)
    raise EmbeddingError(f"unknown model kind {header['kind']!r} in {path}")


def write_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "step", "pull", "push", "total", "active_negatives", "lr"])
        for r in history:
            w.writerow([r.epoch, r.step, f"{r.pull:.17g}", f"{r.push:.17g}", f"{r.total:.17g}",
                        r.active_negatives, f"{r.lr:.17g}"])


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
