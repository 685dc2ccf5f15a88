"""Pure numpy versions of the hot kernels. Used when the extension is unavailable."""

import numpy as np


def furthest_sampling(coords, k, start):
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    n = coords.shape[0]
    out = np.empty(k, dtype=np.int64)
    out[0] = start
    mind = ((coords - coords[start]) ** 2).sum(axis=1)
    for s in range(1, k):
        # argmax returns the first maximum, i.e. the lowest index on ties
        nxt = int(np.argmax(mind))
        out[s] = nxt
        np.minimum(mind, ((coords - coords[nxt]) ** 2).sum(axis=1), out=mind)
    return out


def group_points(idx, dims, max_points):
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    dx, dy, _ = (int(d) for d in dims)
    keys = idx[:, 2] * (dx * dy) + idx[:, 1] * dx + idx[:, 0]
    order = np.argsort(keys, kind="stable")
    skeys = keys[order]
    uniq, first, counts = np.unique(skeys, return_index=True, return_counts=True)
    n_vox = uniq.shape[0]
    group = np.repeat(np.arange(n_vox), counts)
    rank = np.arange(skeys.shape[0]) - first[group]
    keep = rank < max_points
    table = np.full((n_vox, max_points), -1, dtype=np.int64)
    table[group[keep], rank[keep]] = order[keep]
    coords = idx[order[first]]
    return coords, table, np.minimum(counts, max_points).astype(np.int64)
