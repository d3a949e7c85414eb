"""Graph containers, TU Dortmund ingestion and synthetic graph generators."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


class IngestionError(FileNotFoundError):
    pass


class FormatError(ValueError):
    pass


class SpecError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Graph:
    id: int
    features: np.ndarray
    adjacency: np.ndarray
    directed: bool = False
    label: int | None = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        a = np.asarray(self.adjacency)
        if x.ndim != 2 or a.ndim != 2:
            raise SpecError("features and adjacency must be matrices")
        n = a.shape[0]
        if n < 1 or a.shape != (n, n):
            raise SpecError(f"adjacency must be square with n >= 1, got {a.shape}")
        if x.shape[0] != n:
            raise SpecError(f"features have {x.shape[0]} rows for {n} nodes")
        if not np.isin(a, (0, 1)).all():
            raise SpecError("adjacency entries must be 0 or 1")
        a = a.astype(np.int8)
        if not self.directed and not np.array_equal(a, a.T):
            raise SpecError("undirected graph with asymmetric adjacency")
        x.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "adjacency", a)

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def with_features(self, features: np.ndarray) -> Graph:
        return Graph(self.id, features, self.adjacency, self.directed, self.label)

    def num_edges(self) -> int:
        a = self.adjacency
        if self.directed:
            return int(a.sum())
        return int((np.triu(a, 1).sum()) + np.trace(a))


@dataclass
class GraphSet:
    graphs: list[Graph]
    feature_dim: int
    num_classes: int | None = None
    name: str = ""

    def __post_init__(self):
        ids = [g.id for g in self.graphs]
        if len(set(ids)) != len(ids):
            raise SpecError("graph ids must be unique")
        for g in self.graphs:
            if g.feature_dim != self.feature_dim:
                raise SpecError(f"graph {g.id} has feature dim {g.feature_dim}, expected {self.feature_dim}")

    def __len__(self) -> int:
        return len(self.graphs)

    def __iter__(self) -> Iterator[Graph]:
        return iter(self.graphs)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return GraphSet(self.graphs[i], self.feature_dim, self.num_classes, self.name)
        return self.graphs[i]

    def subset(self, idx: Sequence[int]) -> GraphSet:
        return GraphSet([self.graphs[i] for i in idx], self.feature_dim, self.num_classes, self.name)

    def mean_nodes(self) -> float:
        return float(np.mean([g.n for g in self.graphs])) if self.graphs else 0.0


# TU Dortmund format ----------------------------------------------------------

def _read_ints(path: Path) -> list[list[int]]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([int(float(t)) for t in line.split(",")])
            except ValueError:
                raise FormatError(f"{path.name}:{lineno}: not an integer row: {line!r}") from None
    return rows


def load_tu_dataset(directory: str | Path, name: str, directed: bool = False,
                    use_node_attributes: bool = False) -> GraphSet:
    """Read a dataset in TU Dortmund plain-text layout.

    Node labels become one-hot features. Continuous node attributes are used
    when there are no labels, or appended when ``use_node_attributes`` is set.
    Unless ``directed`` is set, each listed edge is symmetrised (OR of both
    directions); duplicates collapse. Self-loops in the file are kept.
    """
    d = Path(directory)
    a_path = d / f"{name}_A.txt"
    ind_path = d / f"{name}_graph_indicator.txt"
    for p in (a_path, ind_path):
        if not p.exists():
            raise IngestionError(f"missing mandatory file {p.name} in {d}")

    indicator = [r[0] for r in _read_ints(ind_path)]
    num_nodes = len(indicator)
    edges = []
    for lineno, row in enumerate(_read_ints(a_path), 1):
        if len(row) != 2:
            raise FormatError(f"{a_path.name}:{lineno}: expected 2 ids, got {len(row)}")
        u, v = row
        if not (1 <= u <= num_nodes and 1 <= v <= num_nodes):
            raise FormatError(f"{a_path.name}:{lineno}: node id out of range 1..{num_nodes}")
        edges.append((u - 1, v - 1))

    gids = np.asarray(indicator, dtype=np.int64)
    if gids.size == 0:
        raise FormatError(f"{ind_path.name}: empty indicator")
    uniq = np.unique(gids)
    if uniq[0] != 1 or uniq[-1] != len(uniq):
        raise FormatError(f"{ind_path.name}: graph ids must run 1..G contiguously")
    if np.any(np.diff(gids) < 0):
        raise FormatError(f"{ind_path.name}: nodes must be grouped by graph")

    feats = []
    lab_path = d / f"{name}_node_labels.txt"
    att_path = d / f"{name}_node_attributes.txt"
    if lab_path.exists():
        labels = np.asarray([r[0] for r in _read_ints(lab_path)], dtype=np.int64)
        if labels.size != num_nodes:
            raise FormatError(f"{lab_path.name}: {labels.size} rows for {num_nodes} nodes")
        labels = labels - labels.min()
        onehot = np.zeros((num_nodes, int(labels.max()) + 1))
        onehot[np.arange(num_nodes), labels] = 1.0
        feats.append(onehot)
    if att_path.exists() and (use_node_attributes or not feats):
        att = np.loadtxt(att_path, delimiter=",", ndmin=2)
        if att.shape[0] != num_nodes:
            raise FormatError(f"{att_path.name}: {att.shape[0]} rows for {num_nodes} nodes")
        feats.append(att)
    x_all = np.concatenate(feats, axis=1) if feats else np.ones((num_nodes, 1))

    glab_path = d / f"{name}_graph_labels.txt"
    glabels = None
    if glab_path.exists():
        raw = [r[0] for r in _read_ints(glab_path)]
        if len(raw) != len(uniq):
            raise FormatError(f"{glab_path.name}: {len(raw)} labels for {len(uniq)} graphs")
        classes = sorted(set(raw))
        remap = {c: i for i, c in enumerate(classes)}
        glabels = [remap[c] for c in raw]

    starts = np.searchsorted(gids, uniq)
    ends = np.append(starts[1:], num_nodes)
    per_graph: list[list[tuple[int, int]]] = [[] for _ in uniq]
    for u, v in edges:
        gu, gv = gids[u] - 1, gids[v] - 1
        if gu != gv:
            raise FormatError(f"{a_path.name}: edge ({u + 1}, {v + 1}) crosses graphs")
        per_graph[gu].append((u, v))

    graphs = []
    for k, (s, e) in enumerate(zip(starts, ends)):
        n = int(e - s)
        adj = np.zeros((n, n), dtype=np.int8)
        for u, v in per_graph[k]:
            adj[u - s, v - s] = 1
        if not directed:
            adj = adj | adj.T
        graphs.append(Graph(k, x_all[s:e], adj, directed,
                            None if glabels is None else glabels[k]))
    return GraphSet(graphs, x_all.shape[1], None if glabels is None else len(set(glabels)), name)


def write_tu_dataset(gs: GraphSet, directory: str | Path, name: str) -> None:
    """Inverse of :func:`load_tu_dataset` for real-valued features (written as attributes)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    offset = 0
    with open(d / f"{name}_A.txt", "w") as fa, \
            open(d / f"{name}_graph_indicator.txt", "w") as fi, \
            open(d / f"{name}_node_attributes.txt", "w") as fx:
        for k, g in enumerate(gs.graphs):
            for u, v in zip(*np.nonzero(g.adjacency)):
                fa.write(f"{u + offset + 1}, {v + offset + 1}\n")
            for row in g.features:
                fi.write(f"{k + 1}\n")
                fx.write(", ".join(repr(float(t)) for t in row) + "\n")
            offset += g.n
    if all(g.label is not None for g in gs.graphs) and gs.graphs:
        with open(d / f"{name}_graph_labels.txt", "w") as fl:
            for g in gs.graphs:
                fl.write(f"{g.label}\n")


# features --------------------------------------------------------------------

def degree_one_hot_features(graph: Graph, max_degree: int) -> np.ndarray:
    deg = np.asarray(graph.adjacency, dtype=np.int64).sum(axis=1)
    deg = np.minimum(deg, max_degree)
    out = np.zeros((graph.n, max_degree + 1))
    out[np.arange(graph.n), deg] = 1.0
    return out


def directed_degree_features(graph: Graph, max_degree: int) -> np.ndarray:
    """One-hot out-degree concatenated with one-hot in-degree."""
    a = np.asarray(graph.adjacency, dtype=np.int64)
    out = np.zeros((graph.n, 2 * (max_degree + 1)))
    rows = np.arange(graph.n)
    out[rows, np.minimum(a.sum(axis=1), max_degree)] = 1.0
    out[rows, max_degree + 1 + np.minimum(a.sum(axis=0), max_degree)] = 1.0
    return out


def with_degree_features(gs: GraphSet, max_degree: int | None = None) -> GraphSet:
    """Replace features by degree one-hots; directed graphs get out- and in-degree blocks."""
    directed = any(g.directed for g in gs.graphs)
    if max_degree is None:
        max_degree = max(max(int(g.adjacency.sum(axis=1).max()), int(g.adjacency.sum(axis=0).max()))
                         for g in gs.graphs)
    encode = directed_degree_features if directed else degree_one_hot_features
    graphs = [g.with_features(encode(g, max_degree)) for g in gs.graphs]
    width = (2 if directed else 1) * (max_degree + 1)
    return GraphSet(graphs, width, gs.num_classes, gs.name)


# synthetic graphs ------------------------------------------------------------

SYNTHETIC_KINDS = ("axisymmetric", "centrosymmetric", "island", "directed-random", "erdos-renyi")


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str
    n: int
    edge_prob: float = 0.3
    seed: int = 0
    feature_dim: int = 8
    graph_id: int = 0


@dataclass(frozen=True)
class SymmetryInfo:
    """Node groups that topological symmetry forces onto identical embeddings."""
    axis: tuple[int, ...]
    pairs: tuple[tuple[int, int], ...] = field(default=())
    satellites: tuple[int, ...] = field(default=())

    def twin_groups(self) -> list[tuple[int, ...]]:
        groups = [tuple(p) for p in self.pairs]
        if len(self.satellites) >= 2:
            groups.append(tuple(self.satellites))
        return groups


def _orbit_features(rng: np.random.Generator, n_orbits: int, dim: int) -> np.ndarray:
    return rng.normal(size=(n_orbits, dim))


def make_synthetic(spec: SyntheticSpec) -> Graph:
    return make_synthetic_with_symmetry(spec)[0]


def make_synthetic_with_symmetry(spec: SyntheticSpec) -> tuple[Graph, SymmetryInfo | None]:
    """Generate a graph of ``spec.kind``; symmetric kinds also return their twin groups.

    Symmetric graphs are built so that paired nodes carry equal features and
    literally equal adjacency rows. Node 0.. are axis nodes, then the
    left/right members of each pair are interleaved.
    """
    if spec.kind not in SYNTHETIC_KINDS:
        raise SpecError(f"unknown synthetic kind {spec.kind!r}")
    if not 0.0 <= spec.edge_prob <= 1.0:
        raise SpecError("edge_prob must lie in [0, 1]")
    n = spec.n
    rng = np.random.default_rng(spec.seed)
    if spec.kind in ("axisymmetric", "centrosymmetric") and n < 2:
        raise SpecError(f"{spec.kind} graphs need n >= 2")
    if n < 1:
        raise SpecError("n must be positive")

    if spec.kind == "axisymmetric":
        n_pairs = max(1, (n - 1) // 2)
        n_axis = n - 2 * n_pairs
        orbit_of = list(range(n_axis))
        pairs = []
        for k in range(n_pairs):
            base = n_axis + 2 * k
            pairs.append((base, base + 1))
            orbit_of += [n_axis + k, n_axis + k]
        n_orb = n_axis + n_pairs
        # orbit-level adjacency; pairs are independent sets (rows equal + zero diagonal)
        q = np.triu((rng.random((n_orb, n_orb)) < spec.edge_prob).astype(np.int8), 1)
        q = q + q.T
        for k in range(n_axis, n_orb):
            q[k, k] = 0
        orbit_of = np.asarray(orbit_of)
        adj = q[np.ix_(orbit_of, orbit_of)].astype(np.int8)
        np.fill_diagonal(adj, 0)
        x = _orbit_features(rng, n_orb, spec.feature_dim)[orbit_of]
        g = Graph(spec.graph_id, x, adj)
        return g, SymmetryInfo(tuple(range(n_axis)), tuple(pairs))

    if spec.kind == "centrosymmetric":
        adj = np.zeros((n, n), dtype=np.int8)
        adj[0, 1:] = adj[1:, 0] = 1
        feats = _orbit_features(rng, 2, spec.feature_dim)
        x = np.vstack([feats[0:1], np.repeat(feats[1:2], n - 1, axis=0)])
        return Graph(spec.graph_id, x, adj), SymmetryInfo((0,), (), tuple(range(1, n)))

    if spec.kind == "island":
        adj = np.triu((rng.random((n, n)) < spec.edge_prob).astype(np.int8), 1)
        adj = adj + adj.T
        adj[-1, :] = adj[:, -1] = 0
        return Graph(spec.graph_id, rng.normal(size=(n, spec.feature_dim)), adj), None

    if spec.kind == "directed-random":
        # at most one direction per node pair
        mask = np.triu(rng.random((n, n)) < spec.edge_prob, 1)
        flip = rng.random((n, n)) < 0.5
        adj = np.zeros((n, n), dtype=np.int8)
        adj[mask & ~flip] = 1
        adj = adj + (mask & flip).T.astype(np.int8)
        g = Graph(spec.graph_id, np.ones((n, 1)), adj, directed=True)
        return g.with_features(directed_degree_features(g, n - 1)), None

    adj = np.triu((rng.random((n, n)) < spec.edge_prob).astype(np.int8), 1)
    adj = adj + adj.T
    return Graph(spec.graph_id, rng.normal(size=(n, spec.feature_dim)), adj), None


def is_topologically_symmetric(g: Graph, info: SymmetryInfo, atol: float = 0.0) -> bool:
    """Programmatic check: twins share features and adjacency rows."""
    for group in info.twin_groups():
        first = group[0]
        for other in group[1:]:
            if not np.allclose(g.features[first], g.features[other], atol=atol, rtol=0):
                return False
            if not np.array_equal(g.adjacency[first], g.adjacency[other]):
                return False
    return True


def special_structure_suite(seed: int = 0, feature_dim: int = 8) -> list[tuple[Graph, SymmetryInfo]]:
    """Four topologically symmetric, self-loop-free graphs sharing one feature width.

    The last graph has an axis node with no edges at all.
    """
    specs = [
        SyntheticSpec("axisymmetric", 5, 0.6, seed, feature_dim, 0),
        SyntheticSpec("centrosymmetric", 6, 1.0, seed + 1, feature_dim, 1),
        SyntheticSpec("axisymmetric", 9, 0.5, seed + 2, feature_dim, 2),
        SyntheticSpec("axisymmetric", 7, 0.5, seed + 3, feature_dim, 3),
    ]
    out = [make_synthetic_with_symmetry(s) for s in specs]
    g, info = out[3]
    adj = np.array(g.adjacency)
    adj[0, :] = adj[:, 0] = 0
    out[3] = (Graph(g.id, g.features, adj), info)
    return out  # type: ignore[return-value]


# sampling and splitting ------------------------------------------------------

def sample_subgraphs(host: Graph, count: int, size_range: tuple[int, int], seed: int,
                     start_id: int = 0) -> GraphSet:
    """Induced subgraphs grown breadth-first from random roots.

    Growth follows edges in either direction, so every sample is weakly
    connected whenever the host component is large enough; otherwise random
    extra nodes top it up.
    """
    lo, hi = size_range
    if lo < 1 or hi < lo:
        raise SpecError(f"bad size range {size_range}")
    if host.n < hi:
        raise SpecError(f"host has {host.n} nodes, need at least {hi}")
    rng = np.random.default_rng(seed)
    und = np.asarray(host.adjacency, dtype=bool)
    und = und | und.T
    nbrs = [np.flatnonzero(und[i]) for i in range(host.n)]
    graphs = []
    for k in range(count):
        size = int(rng.integers(lo, hi + 1))
        root = int(rng.integers(host.n))
        seen = {root}
        order = [root]
        queue = deque([root])
        while queue and len(order) < size:
            u = queue.popleft()
            for v in rng.permutation(nbrs[u]):
                v = int(v)
                if v not in seen:
                    seen.add(v)
                    order.append(v)
                    queue.append(v)
                    if len(order) == size:
                        break
        if len(order) < size:
            rest = np.setdiff1d(np.arange(host.n), order)
            order += [int(t) for t in rng.choice(rest, size - len(order), replace=False)]
        idx = np.sort(np.asarray(order))
        adj = host.adjacency[np.ix_(idx, idx)]
        graphs.append(Graph(start_id + k, host.features[idx], adj, host.directed, host.label))
    return GraphSet(graphs, host.feature_dim, None, f"{host.id}-subgraphs")


def split(gs: GraphSet, train_fraction: float, seed: int) -> tuple[GraphSet, GraphSet]:
    if not 0.0 < train_fraction < 1.0:
        raise SpecError("train_fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(len(gs))
    k = int(round(train_fraction * len(gs)))
    if len(gs) >= 2:
        k = min(max(k, 1), len(gs) - 1)
    return gs.subset(sorted(perm[:k])), gs.subset(sorted(perm[k:]))


# desk-scale stand-in for PROTEINS ---------------------------------------------

def protein_like_dataset(num_graphs: int = 1113, seed: int = 0) -> GraphSet:
    """Synthetic graphs with PROTEINS-like statistics.

    Each graph is a chain of secondary-structure elements (3 node types)
    folded as a random 3-D walk, with contacts between elements closer than
    0.9 and a few long-range contacts. Averages come out near 39.7 nodes and
    72.5 undirected edges, no self-loops. Class 1 graphs are smaller and
    richer in type-2 nodes; class 0 makes up roughly 59.6% of the set.
    """
    rng = np.random.default_rng(seed)
    graphs = []
    for k in range(num_graphs):
        label = int(rng.random() >= 0.596)
        mean_n = 40.0 if label == 0 else 25.0
        n = int(np.clip(round(rng.lognormal(math.log(mean_n), 0.55)), 4, 300))
        type_p = [0.45, 0.45, 0.10] if label == 0 else [0.35, 0.35, 0.30]
        types = rng.choice(3, size=n, p=type_p)
        steps = rng.normal(size=(n, 3))
        steps /= np.linalg.norm(steps, axis=1, keepdims=True)
        pos = np.cumsum(steps, axis=0)
        dist = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
        adj = (dist < 0.9).astype(np.int8)
        idx = np.arange(n)
        adj[idx[:-1], idx[1:]] = 1
        adj[idx[1:], idx[:-1]] = 1
        far = rng.random((n, n)) < 0.003 * (1 + (types[:, None] == 2) + (types[None, :] == 2))
        far = np.triu(far, 2)
        adj = adj | far | far.T
        np.fill_diagonal(adj, 0)
        x = np.zeros((n, 3))
        x[idx, types] = 1.0
        graphs.append(Graph(k, x, adj.astype(np.int8), False, label))
    return GraphSet(graphs, 3, 2, "PROTEINS-surrogate")
