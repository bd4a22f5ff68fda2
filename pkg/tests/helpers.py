"""Test helpers shared by the unit and acceptance suites."""

from scipy import sparse

from semcorr.geometry import SurfaceGraph


def graph_from_weights(n, edges):
    i, j, w = zip(*edges)
    a = sparse.coo_matrix((w, (i, j)), shape=(n, n)).tocsr()
    return SurfaceGraph(n, a.maximum(a.T).tocsr())


def random_connected_graph(rng, n, extra, dyadic=True):
    """Random spanning tree plus ``extra`` chords; dyadic weights make every path sum exact."""
    edges = {}
    order = rng.permutation(n)
    for a in range(1, n):
        u, v = int(order[a]), int(order[rng.integers(a)])
        edges[(min(u, v), max(u, v))] = None
    for _ in range(extra):
        u, v = rng.integers(n, size=2)
        if u != v:
            edges[(min(u, v), max(u, v))] = None
    out = []
    for (u, v) in edges:
        w = rng.integers(1, 2 ** 20) / 2 ** 20 if dyadic else rng.uniform(0.01, 1.0)
        out.append((u, v, float(w)))
    return graph_from_weights(n, out)
