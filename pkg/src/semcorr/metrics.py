"""Mean Geodesic Error, mean Euclidean Error and the random-embedding baseline.

For every correspondence set and every ordered pair of its points (p, q) on
different models, the point x of q's model whose embedding is nearest to
f(p) is retrieved, and the geodesic (or straight-line) distance between q
and x is the error of that pair.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .corrset import Dataset, annotated_geodesics


@dataclass(frozen=True)
class PairError:
    set_id: int
    source_model: str
    target_model: str
    retrieved: int  # retrieved cloud index on the target (first source member)
    geodesic: float
    euclidean: float


@dataclass
class EvalReport:
    category: str
    mge: float
    mge_literal: float  # divided by N_sets * N_models**2
    mee: float
    pair_count: int
    per_set: dict = field(default_factory=dict)
    per_set_counts: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["per_set"] = {str(k): v for k, v in self.per_set.items()}
        d["per_set_counts"] = {str(k): v for k, v in self.per_set_counts.items()}
        return json.dumps(d, indent=1)

    CSV_HEADER = ("category", "mge", "mge_literal_denominator", "mee", "pair_count")

    def csv_row(self) -> list:
        return [self.category, f"{self.mge:.9g}", f"{self.mge_literal:.9g}", f"{self.mee:.9g}", self.pair_count]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_HEADER)
        w.writerow(self.csv_row())
        return buf.getvalue()


def cloud_embeddings(model, clouds: dict, models) -> dict:
    """Embeddings of every cloud point; ``model`` may already be a dict of arrays."""
    if isinstance(model, dict):
        missing = [m for m in models if m not in model]
        if missing:
            raise ValueError(f"missing embeddings for models {missing}")
        return {m: np.asarray(model[m], dtype=np.float64) for m in models}
    return {m: model.embed_cloud(clouds[m]) for m in models}


def nearest_embedding(table: np.ndarray, query: np.ndarray) -> int:
    """Index of the row nearest to ``query``; ties go to the lowest index."""
    d = table - query
    return int(np.argmin(np.einsum("ij,ij->i", d, d)))


def retrieval_errors(emb: dict, ds: Dataset, clouds: dict, geodesics: dict | None) -> list[PairError]:
    """Per-pair retrieval errors in set order, then source model, then target model.

    A hyperpoint source contributes the mean over its members; a hyperpoint
    target scores the closest of its members.
    """
    out = []
    for s in ds.sets:
        on = [m for m in ds.models if m in s.entries]
        for mp in on:
            sources = s.entries[mp].cloud_indices
            for mq in on:
                if mq == mp:
                    continue
                targets = s.entries[mq].cloud_indices
                pts = clouds[mq].points
                geo, euc, first = [], [], None
                for i in sources:
                    x = nearest_embedding(emb[mq], emb[mp][i])
                    first = x if first is None else first
                    if geodesics is not None:
                        geo.append(min(float(geodesics[mq](t, x)) for t in targets))
                    euc.append(min(float(np.linalg.norm(pts[t] - pts[x])) for t in targets))
                g = math.fsum(geo) / len(geo) if geo else math.nan
                out.append(PairError(s.set_id, mp, mq, first, g, math.fsum(euc) / len(euc)))
    return out


def _report(ds: Dataset, errors: list[PairError]) -> EvalReport:
    if not errors:
        raise ValueError("no evaluable pairs: every set needs points on at least two models")
    per_set, counts = {}, {}
    for s in ds.sets:
        vals = [e.geodesic for e in errors if e.set_id == s.set_id]
        if vals:
            per_set[s.set_id] = math.fsum(vals) / len(vals)
            counts[s.set_id] = len(vals)
    total = math.fsum(e.geodesic for e in errors)
    n = len(errors)
    literal = total / (len(ds.sets) * len(ds.models) ** 2)
    mee_value = math.fsum(e.euclidean for e in errors) / n
    return EvalReport(ds.category, total / n, literal, mee_value, n, per_set, counts)


def _prepare(ds: Dataset, models):
    if models is not None:
        ds = ds.restrict(models)
    if not ds.models:
        raise ValueError("empty evaluation split")
    return ds


def mge(model, ds: Dataset, clouds: dict, graphs: dict | None = None, geodesics: dict | None = None,
        models=None) -> EvalReport:
    """Mean Geodesic Error over ``models`` (default: all) of ``ds``.

    ``mge`` divides by the number of evaluated pairs; ``mge_literal`` by
    N_sets * N_models**2.
    """
    ds = _prepare(ds, models)
    if geodesics is None:
        if graphs is None:
            raise ValueError("mge needs graphs or precomputed geodesics")
        geodesics = annotated_geodesics(ds, graphs)
    emb = cloud_embeddings(model, clouds, ds.models)
    return _report(ds, retrieval_errors(emb, ds, clouds, geodesics))


def mee(model, ds: Dataset, clouds: dict, models=None) -> float:
    """Mean Euclidean Error: the mGE procedure with straight-line distances."""
    ds = _prepare(ds, models)
    emb = cloud_embeddings(model, clouds, ds.models)
    errors = retrieval_errors(emb, ds, clouds, None)
    if not errors:
        raise ValueError("no evaluable pairs")
    return math.fsum(e.euclidean for e in errors) / len(errors)


def random_embeddings(clouds: dict, models, rng, dimension: int = 128) -> dict:
    return {m: rng.uniform(-1.0, 1.0, size=(len(clouds[m]), dimension)) for m in models}


def random_baseline(ds: Dataset, clouds: dict, graphs: dict | None = None, trials: int = 1, seed: int = 0,
                    geodesics: dict | None = None, models=None, dimension: int = 128) -> EvalReport:
    """mGE of i.i.d. uniform(-1, 1) embeddings, averaged over ``trials``."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    ds = _prepare(ds, models)
    if geodesics is None:
        geodesics = annotated_geodesics(ds, graphs)
    rng = np.random.default_rng(seed)
    reports = [mge(random_embeddings(clouds, ds.models, rng, dimension), ds, clouds, geodesics=geodesics)
               for _ in range(trials)]
    mean = lambda xs: math.fsum(xs) / len(xs)  # noqa: E731
    per_set = {k: mean([r.per_set[k] for r in reports]) for k in reports[0].per_set}
    return EvalReport(ds.category, mean([r.mge for r in reports]), mean([r.mge_literal for r in reports]),
                      mean([r.mee for r in reports]), reports[0].pair_count, per_set, reports[0].per_set_counts)


def oracle_embeddings(ds: Dataset, clouds: dict, models=None) -> dict:
    """One-hot embedding per set on annotated points, zero elsewhere."""
    models = ds.models if models is None else models
    index = {s.set_id: i for i, s in enumerate(ds.sets)}
    out = {}
    for m in models:
        e = np.zeros((len(clouds[m]), len(ds.sets)))
        for s in ds.sets:
            if m in s.entries:
                e[s.entries[m].cloud_indices, index[s.set_id]] = 1.0
        out[m] = e
    return out


@dataclass(frozen=True)
class PartialMatch:
    set_id: int
    partial_model: str
    complete_model: str
    partial_index: int  # index into the cropped cloud
    retrieved: int  # index into the complete cloud
    error: float  # geodesic error using the cropped cloud's embeddings
    uncropped_error: float  # same annotated point embedded from the full cloud


def partial_matching(model, ds: Dataset, clouds: dict, geodesics: dict, pairs, keep_fraction: float,
                     seed: int = 0) -> list[PartialMatch]:
    """Retrieve complete-object points for the annotated points that survive a crop.

    ``pairs`` lists (partial model, complete model). The partial model's cloud
    is cropped by ``crop_partial`` (seeded per pair) and embedded as is; each
    surviving annotated point whose set also lives on the complete model is
    matched to its embedding-nearest complete point and scored by geodesic
    distance to the closest annotated member there.
    """
    from .corrset import crop_partial

    out = []
    for k, (mp, mq) in enumerate(pairs):
        if mp == mq:
            raise ValueError(f"partial and complete model must differ, got {mp!r} twice")
        full = clouds[mp]
        part = crop_partial(full, keep_fraction, seed=seed + k)
        where = np.full(len(full), -1)
        where[part.origin_index] = np.arange(len(part))
        emb_part = model.embed_cloud(part)
        emb_full = model.embed_cloud(full)
        emb_q = model.embed_cloud(clouds[mq])
        for s in ds.sets:
            if mp not in s.entries or mq not in s.entries:
                continue
            targets = s.entries[mq].cloud_indices
            for i in s.entries[mp].cloud_indices:
                j = int(where[i])
                if j < 0:
                    continue
                x = nearest_embedding(emb_q, emb_part[j])
                x0 = nearest_embedding(emb_q, emb_full[i])
                err = min(float(geodesics[mq](t, x)) for t in targets)
                err0 = min(float(geodesics[mq](t, x0)) for t in targets)
                out.append(PartialMatch(s.set_id, mp, mq, j, x, err, err0))
    return out
