"""Glue shared by the CLI and the acceptance runs: sample, attach, measure."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .corrset import Dataset, annotated_geodesics, attach_to_cloud, pinned_for_model
from .geometry import build_graph, sample_cloud


@dataclass
class Prepared:
    dataset: Dataset  # attached to the clouds
    clouds: dict
    graphs: dict
    geodesics: dict


def prepare(ds: Dataset, n_points: int = 2048, k: int = 8, seed: int = 0, threads: int = 1) -> Prepared:
    """Sample one cloud per model with its annotations pinned, build graphs and geodesics.

    Model i is sampled with seed ``seed + i`` so results do not depend on
    ``threads``.
    """

    def one(item):
        i, mid = item
        pos, faces = pinned_for_model(ds, mid)
        cloud = sample_cloud(ds.meshes[mid], n_points, pos, seed=seed + i, pinned_faces=faces)
        return mid, cloud, build_graph(cloud, k)

    items = list(enumerate(ds.models))
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            done = list(ex.map(one, items))
    else:
        done = [one(it) for it in items]
    clouds = {mid: c for mid, c, _ in done}
    graphs = {mid: g for mid, _, g in done}
    attached = attach_to_cloud(ds, clouds)
    return Prepared(attached, clouds, graphs, annotated_geodesics(attached, graphs))
