"""Thinning and skeleton-graph analysis.

A skeleton is a boolean array of the same shape as its source mask. The
graph view groups pixels of degree != 2 into nodes (8-connected clusters of
such pixels form a single node) and the degree-2 chains between them into
edges.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi

from .imaging import InvalidInputError, check_mask

# P2..P9, clockwise from north
_RING = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))
_EIGHT = np.ones((3, 3), dtype=bool)
SQRT2 = math.sqrt(2.0)

ENDPOINT = "endpoint"
BRANCH = "branch"
CROSSING = "crossing"
ISOLATED = "isolated"


class EmptyGraphError(ValueError):
    pass


# --- thinning --------------------------------------------------------------------

def _ring_arrays(padded: np.ndarray) -> list[np.ndarray]:
    h, w = padded.shape
    return [padded[1 + dr:h - 1 + dr, 1 + dc:w - 1 + dc] for dr, dc in _RING]


def _zs_candidates(padded: np.ndarray, step: int) -> np.ndarray:
    ring = [a.astype(np.uint8) for a in _ring_arrays(padded)]
    b = sum(ring)
    seq = ring + ring[:1]
    a = sum(((seq[i] == 0) & (seq[i + 1] == 1)).astype(np.uint8) for i in range(8))
    p2, _, p4, _, p6, _, p8, _ = ring
    if step == 0:
        side = (p2 * p4 * p6 == 0) & (p4 * p6 * p8 == 0)
    else:
        side = (p2 * p4 * p8 == 0) & (p2 * p6 * p8 == 0)
    return padded[1:-1, 1:-1] & (b >= 2) & (b <= 6) & (a == 1) & side


def _zs_ok(padded: np.ndarray, r: int, c: int, step: int) -> bool:
    n = [padded[r + dr, c + dc] for dr, dc in _RING]
    b = sum(n)
    if b < 2 or b > 6:
        return False
    if sum((not n[i]) and n[(i + 1) % 8] for i in range(8)) != 1:
        return False
    p2, _, p4, _, p6, _, p8, _ = n
    if step == 0:
        return not (p2 and p4 and p6) and not (p4 and p6 and p8)
    return not (p2 and p4 and p8) and not (p2 and p6 and p8)


def _c8_arrays(ring: list[np.ndarray]) -> np.ndarray:
    """Yokoi connectivity number for 8-connected foreground."""
    x = [1 - a for a in ring]
    return sum(x[k] - x[k] * x[(k + 1) % 8] * x[(k + 2) % 8] for k in (0, 2, 4, 6))


def _staircase_ok(padded: np.ndarray, r: int, c: int) -> bool:
    n = [int(padded[r + dr, c + dc]) for dr, dc in _RING]
    return sum(n) >= 2 and _c8_arrays(n) == 1


def _remove_staircases(padded: np.ndarray) -> None:
    while True:
        ring = [a.astype(np.int8) for a in _ring_arrays(padded)]
        cand = padded[1:-1, 1:-1] & (sum(ring) >= 2) & (_c8_arrays(ring) == 1)
        removed = False
        for r, c in zip(*np.nonzero(cand)):
            if _staircase_ok(padded, r + 1, c + 1):
                padded[r + 1, c + 1] = False
                removed = True
        if not removed:
            return


def thin(mask: np.ndarray) -> np.ndarray:
    """Zhang-Suen thinning to a fixpoint, then removal of redundant staircase pixels.

    Deletion candidates are found in parallel per sub-iteration. Candidates
    with another candidate in their 8-neighbourhood are re-verified one at a
    time in raster order; plain parallel deletion erases 2x2 blocks and some
    two-pixel diagonals, which would change the component count. The final
    pass deletes non-end pixels that are simple for 8-connectivity, which
    Zhang-Suen leaves at diagonal steps.
    """
    padded = np.pad(check_mask(mask), 1)
    while True:
        changed = False
        for step in (0, 1):
            cand = _zs_candidates(padded, step)
            if not cand.any():
                continue
            cp = np.pad(cand, 1)
            crowd = sum(a.astype(np.uint8) for a in _ring_arrays(cp))
            lone = cand & (crowd == 0)
            padded[1:-1, 1:-1] &= ~lone
            for r, c in zip(*np.nonzero(cand & ~lone)):
                if _zs_ok(padded, r + 1, c + 1, step):
                    padded[r + 1, c + 1] = False
            changed = True
        if not changed:
            _remove_staircases(padded)
            return padded[1:-1, 1:-1].copy()


def neighbor_count(skel: np.ndarray) -> np.ndarray:
    skel = check_mask(skel)
    counts = ndi.convolve(skel.astype(np.int32), _EIGHT.astype(np.int32), mode="constant") - skel
    return np.where(skel, counts, 0)


# --- graph -----------------------------------------------------------------------

@dataclass
class Node:
    id: int
    pixels: list[tuple[int, int]]
    degree: int = 0

    @property
    def kind(self) -> str:
        if self.degree == 0:
            return ISOLATED
        if self.degree == 1:
            return ENDPOINT
        if self.degree == 3:
            return BRANCH
        if self.degree >= 4:
            return CROSSING
        # two incidences on a cluster, e.g. a thick bend remnant
        return BRANCH

    @property
    def anchor(self) -> tuple[int, int]:
        return min(self.pixels)


@dataclass
class Edge:
    """Ordered pixel chain. ``pixels`` starts on a pixel of node ``u`` and ends on one of ``v``.

    For a node-free cycle ``u == v == -1`` and the chain is closed (first
    pixel repeated last).
    """

    u: int
    v: int
    pixels: np.ndarray

    @property
    def arc_length(self) -> float:
        return polyline_arc_length(self.pixels)

    @property
    def interior(self) -> np.ndarray:
        return self.pixels[1:-1]


@dataclass
class SkeletonGraph:
    shape: tuple[int, int]
    nodes: list[Node] = field(default_factory=list)
    edges: list[Edge] = field(default_factory=list)

    def kinds(self) -> list[str]:
        return [n.kind for n in self.nodes]

    def count(self, kind: str) -> int:
        return sum(n.kind == kind for n in self.nodes)

    @property
    def endpoints(self) -> list[Node]:
        return [n for n in self.nodes if n.kind == ENDPOINT]

    def incident(self, node_id: int) -> list[int]:
        return [i for i, e in enumerate(self.edges) for end in (e.u, e.v) if end == node_id]


def polyline_arc_length(points) -> float:
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        return 0.0
    return float(np.hypot(*np.diff(pts, axis=0).T).sum())


def _neighbors(pix: tuple[int, int], pixset) -> list[tuple[int, int]]:
    r, c = pix
    return sorted((r + dr, c + dc) for dr, dc in _RING if (r + dr, c + dc) in pixset)


def graphify(skel: np.ndarray, merge_distance: float = 0.0) -> SkeletonGraph:
    """Build the node/edge graph of a skeleton.

    ``merge_distance > 0`` contracts edges shorter than that between two
    non-endpoint nodes into a single node, so two branch points a few pixels
    apart (the usual thinning result at a thick X) read as one crossing.
    """
    skel = check_mask(skel)
    deg = neighbor_count(skel)
    pixset = set(zip(*map(lambda a: a.tolist(), np.nonzero(skel))))
    node_mask = skel & (deg != 2)

    labels, n = ndi.label(node_mask, structure=_EIGHT)
    owner: dict[tuple[int, int], int] = {}
    for r, c in zip(*np.nonzero(labels)):
        owner[(int(r), int(c))] = int(labels[r, c]) - 1
    # degree-2 pixels whose two neighbours sit in one cluster close a triangle: absorb them
    grew = True
    while grew:
        grew = False
        for p in sorted(pixset - owner.keys()):
            nb = _neighbors(p, pixset)
            if len(nb) == 2 and nb[0] in owner and nb[1] in owner and owner[nb[0]] == owner[nb[1]]:
                owner[p] = owner[nb[0]]
                grew = True

    clusters: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for p, k in owner.items():
        clusters[k].append(p)
    edges: list[tuple[int, int, list]] = []
    visited: set[tuple[int, int]] = set()
    for k in range(n):
        for start in sorted(clusters[k]):
            for q in _neighbors(start, pixset):
                if q in owner:
                    continue
                if q in visited:
                    continue
                chain = [start, q]
                visited.add(q)
                prev, cur = start, q
                while True:
                    # every non-node pixel has exactly two neighbours
                    (nxt,) = [p for p in _neighbors(cur, pixset) if p != prev]
                    chain.append(nxt)
                    if nxt in owner:
                        edges.append((k, owner[nxt], chain))
                        break
                    visited.add(nxt)
                    prev, cur = cur, nxt

    cycles = []
    rest = pixset - visited - owner.keys()
    while rest:
        start = min(rest)
        ring = [start]
        rest.discard(start)
        cur = start
        while True:
            nxt = [p for p in _neighbors(cur, pixset) if p in rest]
            if not nxt:
                break
            cur = nxt[0]
            rest.discard(cur)
            ring.append(cur)
        ring.append(start)
        cycles.append(ring)

    graph = _assemble(skel.shape, clusters, edges, cycles)
    if merge_distance > 0:
        graph = _contract(graph, merge_distance)
    return graph


def _assemble(shape, clusters, edges, cycles) -> SkeletonGraph:
    order = sorted(range(len(clusters)), key=lambda k: min(clusters[k]))
    remap = {old: new for new, old in enumerate(order)}
    nodes = [Node(id=i, pixels=sorted(clusters[old])) for i, old in enumerate(order)]
    out = []
    for u, v, chain in edges:
        out.append(Edge(remap[u], remap[v], np.asarray(chain, dtype=np.int64)))
    for ring in cycles:
        out.append(Edge(-1, -1, np.asarray(ring, dtype=np.int64)))
    for e in out:
        if e.u >= 0:
            nodes[e.u].degree += 1
            nodes[e.v].degree += 1
    return SkeletonGraph(tuple(shape), nodes, out)


def _contract(graph: SkeletonGraph, merge_distance: float) -> SkeletonGraph:
    parent = list(range(len(graph.nodes)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    kinds = graph.kinds()
    absorbed = set()
    for i, e in enumerate(graph.edges):
        if e.u < 0 or e.u == e.v:
            continue
        if kinds[e.u] == ENDPOINT or kinds[e.v] == ENDPOINT:
            continue
        if e.arc_length <= merge_distance:
            parent[find(e.u)] = find(e.v)
            absorbed.add(i)
    if not absorbed:
        return graph
    clusters: dict[int, list] = {}
    for node in graph.nodes:
        clusters.setdefault(find(node.id), []).extend(node.pixels)
    for i in absorbed:
        e = graph.edges[i]
        clusters[find(e.u)].extend(map(tuple, e.interior.tolist()))
    keys = list(clusters)
    index = {k: j for j, k in enumerate(keys)}
    edges, cycles = [], []
    for i, e in enumerate(graph.edges):
        if i in absorbed:
            continue
        if e.u < 0:
            cycles.append([tuple(p) for p in e.pixels.tolist()])
        else:
            edges.append((index[find(e.u)], index[find(e.v)], [tuple(p) for p in e.pixels.tolist()]))
    return _assemble(graph.shape, [sorted(set(clusters[k])) for k in keys], edges, cycles)


# --- pruning ---------------------------------------------------------------------

def prune(skel: np.ndarray, min_spur: float = 8.0) -> np.ndarray:
    """Remove endpoint spurs shorter than ``min_spur`` (arc length), re-thinning until stable.

    At a junction whose incident edges are all short spurs the two longest
    are kept, so a component never vanishes.
    """
    if min_spur < 0:
        raise InvalidInputError("min_spur must be >= 0")
    skel = check_mask(skel).copy()
    if min_spur == 0:
        return skel
    while True:
        graph = graphify(skel)
        kinds = graph.kinds()
        spurs: dict[int, list[Edge]] = {}
        for e in graph.edges:
            if e.u < 0 or e.u == e.v:
                continue
            ku, kv = kinds[e.u], kinds[e.v]
            if (ku == ENDPOINT) == (kv == ENDPOINT):
                continue
            junction = e.v if ku == ENDPOINT else e.u
            spurs.setdefault(junction, []).append(e)
        removed = False
        for junction, cands in sorted(spurs.items()):
            short = [e for e in cands if e.arc_length < min_spur]
            if not short:
                continue
            keep = graph.nodes[junction].degree - len(short)
            if keep < 2:
                short = sorted(short, key=lambda e: (e.arc_length, min(map(tuple, e.pixels.tolist()))))
                short = short[: max(0, len(short) - (2 - keep))]
            for e in short:
                pix = e.pixels[:-1] if kinds[e.u] == ENDPOINT else e.pixels[1:]
                skel[pix[:, 0], pix[:, 1]] = False
                removed = True
        if not removed:
            return skel
        skel = thin(skel)


# --- paths -----------------------------------------------------------------------

@dataclass
class CapillaryPath:
    points: np.ndarray  # (N, 2) int (row, col)

    @property
    def arc_length(self) -> float:
        return polyline_arc_length(self.points)

    @property
    def chord_length(self) -> float:
        a, b = self.points[0], self.points[-1]
        return float(math.hypot(*(b - a)))

    def __len__(self) -> int:
        return len(self.points)


def _bridge(a: tuple, b: tuple, pixels: set) -> list[tuple[int, int]]:
    """Shortest 8-connected route from ``a`` to ``b`` inside a node cluster (both inclusive)."""
    if a == b:
        return [a]
    prev = {a: None}
    queue = deque([a])
    while queue:
        cur = queue.popleft()
        if cur == b:
            break
        for nb in _neighbors(cur, pixels):
            if nb not in prev:
                prev[nb] = cur
                queue.append(nb)
    route = [b]
    while route[-1] != a:
        route.append(prev[route[-1]])
    return route[::-1]


def _trail_points(graph: SkeletonGraph, trail: list[tuple[int, bool]]) -> np.ndarray:
    pts: list[tuple[int, int]] = []
    for idx, forward in trail:
        chain = [tuple(p) for p in graph.edges[idx].pixels.tolist()]
        if not forward:
            chain = chain[::-1]
        if pts:
            node_end = graph.edges[idx].u if forward else graph.edges[idx].v
            link = _bridge(pts[-1], chain[0], set(graph.nodes[node_end].pixels))
            pts.extend(link[1:])
            chain = chain[1:]
        pts.extend(chain)
    return np.asarray(pts, dtype=np.int64)


def _open_cycle(pixels: np.ndarray) -> CapillaryPath:
    ring = [tuple(p) for p in pixels.tolist()]
    if ring[0] == ring[-1]:
        ring = ring[:-1]
    k = ring.index(min(ring))
    ring = ring[k:] + ring[:k]
    # walk toward the lexicographically smaller neighbour first
    if len(ring) > 2 and ring[-1] < ring[1]:
        ring = [ring[0]] + ring[1:][::-1]
    ring.append(ring[0])
    return CapillaryPath(np.asarray(ring, dtype=np.int64))


def main_path(graph: SkeletonGraph, max_expansions: int = 200_000) -> CapillaryPath:
    """Longest endpoint-to-endpoint trail through the graph.

    Edges are used at most once, nodes may repeat (a crossing node is
    passed twice by a loop whose limbs cross). Ties go to the trail whose
    starting endpoint has the smaller (row, col). A graph without endpoints
    yields its longest cycle opened at the smallest pixel.
    """
    if not graph.edges and not graph.nodes:
        raise EmptyGraphError("empty skeleton graph")
    ends = sorted(graph.endpoints, key=lambda n: n.anchor)
    if not ends:
        loops = [e for e in graph.edges if e.u == e.v]
        if loops:
            best = max(loops, key=lambda e: (round(e.arc_length, 9), [-x for x in min(map(tuple, e.pixels.tolist()))]))
            return _open_cycle(best.pixels)
        node = graph.nodes[0]
        return CapillaryPath(np.asarray([node.anchor], dtype=np.int64))

    adj: dict[int, list[tuple[int, int, bool]]] = {n.id: [] for n in graph.nodes}
    lengths = [e.arc_length for e in graph.edges]
    for i, e in enumerate(graph.edges):
        if e.u < 0:
            continue
        adj[e.u].append((i, e.v, True))
        if e.u != e.v:
            adj[e.v].append((i, e.u, False))
        else:
            adj[e.u].append((i, e.u, False))

    end_ids = {n.id for n in ends}
    best: tuple | None = None
    budget = [max_expansions]

    def better(length, start, stop, trail):
        nonlocal best
        key = (-round(length, 9), graph.nodes[start].anchor, graph.nodes[stop].anchor)
        if best is None or key < best[0]:
            best = (key, list(trail))

    def dfs(node, start, used, trail, length):
        budget[0] -= 1
        if budget[0] < 0:
            return
        if node in end_ids and node != start:
            better(length, start, node, trail)
            return
        for idx, other, fwd in adj[node]:
            if idx in used:
                continue
            used.add(idx)
            trail.append((idx, fwd))
            dfs(other, start, used, trail, length + lengths[idx])
            trail.pop()
            used.discard(idx)

    for start in ends:
        dfs(start.id, start.id, set(), [], 0.0)
    if best is None:
        # lone endpoint (e.g. a single pixel): degenerate one-point path
        return CapillaryPath(np.asarray([ends[0].anchor], dtype=np.int64))
    return CapillaryPath(_trail_points(graph, best[1]))


def tortuosity(path: CapillaryPath) -> float:
    """Arc length over chord length; ``inf`` for closed paths."""
    chord = path.chord_length
    if chord == 0:
        return math.inf
    return path.arc_length / chord
