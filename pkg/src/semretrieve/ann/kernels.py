"""Graph-traversal kernels for the layered small-world index.

Hot loops live here, written in nopython style over flat arrays so the same
source runs under numba's ``@njit`` or as plain Python (see
:mod:`semretrieve.accel`). Both paths execute identical float32 arithmetic in
identical order, so graphs and search results are bit-identical across them.

Distances are ``1 - dot`` over unit-norm float32 vectors (cosine). Heaps are
manual array-based binary heaps; the result set is a max-heap keyed on
negated distance. ``allowed`` is an optional uint8 membership mask: nodes
outside it are traversed but never admitted to the result set (size-0 mask
means no filter).
"""

import numpy as np

from ..accel import njit

EMPTY_MASK = np.empty(0, dtype=np.uint8)
DESCENT_BEAM = 8  # entry candidates carried through the upper layers


@njit(cache=True)
def _dist(vectors, i, q):
    s = np.float32(0.0)
    for d in range(q.shape[0]):
        s += vectors[i, d] * q[d]
    return np.float32(1.0) - s


@njit(cache=True)
def _dist_pair(vectors, i, j):
    s = np.float32(0.0)
    for d in range(vectors.shape[1]):
        s += vectors[i, d] * vectors[j, d]
    return np.float32(1.0) - s


@njit(cache=True)
def _heap_push(heap_d, heap_i, size, d, i):
    heap_d[size] = d
    heap_i[size] = i
    j = size
    while j > 0:
        parent = (j - 1) >> 1
        if heap_d[parent] <= heap_d[j]:
            break
        heap_d[parent], heap_d[j] = heap_d[j], heap_d[parent]
        heap_i[parent], heap_i[j] = heap_i[j], heap_i[parent]
        j = parent
    return size + 1


@njit(cache=True)
def _heap_pop(heap_d, heap_i, size):
    top_d = heap_d[0]
    top_i = heap_i[0]
    size -= 1
    heap_d[0] = heap_d[size]
    heap_i[0] = heap_i[size]
    j = 0
    while True:
        left = 2 * j + 1
        right = left + 1
        smallest = j
        if left < size and heap_d[left] < heap_d[smallest]:
            smallest = left
        if right < size and heap_d[right] < heap_d[smallest]:
            smallest = right
        if smallest == j:
            break
        heap_d[smallest], heap_d[j] = heap_d[j], heap_d[smallest]
        heap_i[smallest], heap_i[j] = heap_i[j], heap_i[smallest]
        j = smallest
    return top_d, top_i, size


@njit(cache=True)
def _sort_by_dist(dists, ids):
    """Stable in-place insertion sort ascending by distance (small arrays)."""
    for a in range(1, dists.shape[0]):
        d = dists[a]
        i = ids[a]
        b = a - 1
        while b >= 0 and dists[b] > d:
            dists[b + 1] = dists[b]
            ids[b + 1] = ids[b]
            b -= 1
        dists[b + 1] = d
        ids[b + 1] = i


@njit(cache=True)
def _search_layer(vectors, adj, cnt, q, entry_ids, ef, allowed):
    n = vectors.shape[0]
    use_filter = allowed.shape[0] != 0
    visited = np.zeros(n, np.uint8)

    cand_d = np.empty(n + entry_ids.shape[0], np.float32)
    cand_i = np.empty(n + entry_ids.shape[0], np.int64)
    cn = 0
    res_d = np.empty(ef + 1, np.float32)  # keyed on -distance
    res_i = np.empty(ef + 1, np.int64)
    rn = 0

    for e in range(entry_ids.shape[0]):
        node = entry_ids[e]
        if visited[node]:
            continue
        visited[node] = 1
        d = _dist(vectors, node, q)
        cn = _heap_push(cand_d, cand_i, cn, d, node)
        if not use_filter or allowed[node]:
            rn = _heap_push(res_d, res_i, rn, -d, node)
            if rn > ef:
                _, _, rn = _heap_pop(res_d, res_i, rn)

    while cn > 0:
        d, node, cn = _heap_pop(cand_d, cand_i, cn)
        if rn >= ef and d > -res_d[0]:
            break
        for t in range(cnt[node]):
            neighbor = adj[node, t]
            if visited[neighbor]:
                continue
            visited[neighbor] = 1
            dn = _dist(vectors, neighbor, q)
            if rn < ef or dn < -res_d[0]:
                cn = _heap_push(cand_d, cand_i, cn, dn, neighbor)
                if not use_filter or allowed[neighbor]:
                    rn = _heap_push(res_d, res_i, rn, -dn, neighbor)
                    if rn > ef:
                        _, _, rn = _heap_pop(res_d, res_i, rn)

    out_d = np.empty(rn, np.float32)
    out_i = np.empty(rn, np.int64)
    j = rn - 1
    while rn > 0:
        nd, ni, rn = _heap_pop(res_d, res_i, rn)
        out_d[j] = -nd
        out_i[j] = ni
        j -= 1
    return out_d, out_i


@njit(cache=True)
def _select_neighbors(vectors, cand_d, cand_i, n, max_links, keep_pruned):
    """Diversity-pruned neighbor selection over distance-sorted candidates.

    A candidate is kept unless it sits closer to an already-kept neighbor
    than to the base point. With ``keep_pruned`` (used when re-pruning an
    overfull node's edges), remaining slots are back-filled with the nearest
    rejected candidates so existing nodes keep their degree — this preserves
    layer-0 connectivity.
    """
    selected = np.empty(max_links, np.int64)
    ns = 0
    rejected = np.empty(n, np.int64)
    nr = 0
    for t in range(n):
        if ns >= max_links:
            break
        keep = True
        for s in range(ns):
            if _dist_pair(vectors, cand_i[t], selected[s]) < cand_d[t]:
                keep = False
                break
        if keep:
            selected[ns] = cand_i[t]
            ns += 1
        else:
            rejected[nr] = cand_i[t]
            nr += 1
    if keep_pruned:
        j = 0
        while ns < max_links and j < nr:
            selected[ns] = rejected[j]
            ns += 1
            j += 1
    return selected, ns


@njit(cache=True)
def build_graph(vectors, levels, max_links, ef_construction):
    """Insert all points in index order; returns (adjacency, counts, entry, top).

    ``adjacency`` is int64 [n_layers, n, 2*max_links]; layer 0 may use the
    full width, upper layers at most ``max_links``. Deterministic given the
    level assignments.
    """
    n = vectors.shape[0]
    n_layers = int(levels.max()) + 1
    cap0 = 2 * max_links
    adj = np.full((n_layers, n, cap0), -1, np.int64)
    cnt = np.zeros((n_layers, n), np.int64)
    entry = 0
    top = int(levels[0])

    for i in range(1, n):
        level = int(levels[i])
        q = vectors[i]
        entry_ids = np.empty(1, np.int64)
        entry_ids[0] = entry
        lc = top
        while lc > level:
            _, entry_ids = _search_layer(
                vectors, adj[lc], cnt[lc], q, entry_ids, DESCENT_BEAM, EMPTY_MASK
            )
            lc -= 1
        lc = min(level, top)
        while lc >= 0:
            cap = cap0 if lc == 0 else max_links
            found_d, found_i = _search_layer(
                vectors, adj[lc], cnt[lc], q, entry_ids, ef_construction, EMPTY_MASK
            )
            selected, ns = _select_neighbors(
                vectors, found_d, found_i, found_i.shape[0], max_links, True
            )
            for s in range(ns):
                adj[lc, i, cnt[lc, i]] = selected[s]
                cnt[lc, i] += 1
            for s in range(ns):
                nb = selected[s]
                if cnt[lc, nb] < cap:
                    adj[lc, nb, cnt[lc, nb]] = i
                    cnt[lc, nb] += 1
                else:
                    nn = cnt[lc, nb]
                    cd = np.empty(nn + 1, np.float32)
                    ci = np.empty(nn + 1, np.int64)
                    for t in range(nn):
                        ci[t] = adj[lc, nb, t]
                        cd[t] = _dist_pair(vectors, nb, ci[t])
                    ci[nn] = i
                    cd[nn] = _dist_pair(vectors, nb, i)
                    _sort_by_dist(cd, ci)
                    re_sel, re_ns = _select_neighbors(vectors, cd, ci, nn + 1, cap, True)
                    for t in range(re_ns):
                        adj[lc, nb, t] = re_sel[t]
                    for t in range(re_ns, cap0):
                        adj[lc, nb, t] = -1
                    cnt[lc, nb] = re_ns
            entry_ids = found_i
            lc -= 1

        if level > top:
            top = level
            entry = i
    return adj, cnt, entry, top


@njit(cache=True)
def search_graph(vectors, adj, cnt, entry, top, q, ef, allowed):
    """Beam-descend the upper layers, then run the ef search at layer 0.

    A small fixed beam at the upper layers (rather than a single greedy
    walker) makes the layer-0 entry robust on clustered data. Returns
    (distances, node ids) ascending by distance, at most ``ef`` hits.
    """
    entry_ids = np.empty(1, np.int64)
    entry_ids[0] = entry
    for lc in range(top, 0, -1):
        _, entry_ids = _search_layer(
            vectors, adj[lc], cnt[lc], q, entry_ids, DESCENT_BEAM, EMPTY_MASK
        )
    return _search_layer(vectors, adj[0], cnt[0], q, entry_ids, ef, allowed)
