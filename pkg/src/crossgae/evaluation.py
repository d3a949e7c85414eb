"""Reconstruction metrics: ROC-AUC, 1-WL test, exact match, branch divergence."""
from __future__ import annotations

import csv
import io
import itertools
import json
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from . import diffnum as dn
from .graphdata import Graph, GraphSet
from .models import GraphAutoencoder, branch_embeddings, encode, kernel_logits, predict_edges
from .training import reconstruction_target


def roc_auc(scores, labels) -> float | None:
    """Mann-Whitney AUC with ties counted as one half; ``None`` when one class is absent."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s, method="average")
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def graph_auc(logits, a: np.ndarray, directed: bool) -> float | None:
    """AUC over all entries (directed) or the upper triangle with diagonal (undirected)."""
    z = logits.data if isinstance(logits, dn.Tensor) else np.asarray(logits)
    a = np.asarray(a)
    if z.shape != a.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {a.shape}")
    if directed:
        return roc_auc(z.ravel(), a.ravel())
    iu = np.triu_indices(a.shape[0])
    return roc_auc(z[iu], a[iu])


def _adjacency(g) -> np.ndarray:
    return np.asarray(g.adjacency if isinstance(g, Graph) else g)


def wl_colors(adjs: list[np.ndarray], iterations: int | None = None) -> list[list[int]]:
    """Joint 1-WL refinement from uniform colours over several graphs.

    Runs until the partition of the disjoint union stops splitting, or for
    ``iterations`` rounds (default: the largest node count).
    """
    nbrs = [[np.flatnonzero(a[i]).tolist() for i in range(a.shape[0])] for a in adjs]
    colors = [[0] * a.shape[0] for a in adjs]
    rounds = iterations if iterations is not None else max(a.shape[0] for a in adjs)
    n_classes = 1
    for _ in range(rounds):
        sigs = [[(c[i], tuple(sorted(c[j] for j in nb[i]))) for i in range(len(c))]
                for c, nb in zip(colors, nbrs)]
        palette = {s: k for k, s in enumerate(sorted({s for sg in sigs for s in sg}))}
        colors = [[palette[s] for s in sg] for sg in sigs]
        if len(palette) == n_classes:
            break
        n_classes = len(palette)
    return colors


def wl_test(g1, g2, iterations: int | None = None) -> bool:
    """1-WL isomorphism test on structure only (node features ignored)."""
    for g in (g1, g2):
        if isinstance(g, Graph) and g.directed:
            raise ValueError("wl_test expects undirected graphs; use exact_match for directed ones")
    a1, a2 = _adjacency(g1), _adjacency(g2)
    if a1.shape != a2.shape:
        return False
    if not (np.array_equal(a1, a1.T) and np.array_equal(a2, a2.T)):
        raise ValueError("wl_test expects symmetric adjacency matrices")
    c1, c2 = wl_colors([a1, a2], iterations)
    return Counter(c1) == Counter(c2)


def isomorphic_brute_force(a1: np.ndarray, a2: np.ndarray) -> bool:
    """Exact isomorphism by trying every node permutation (small graphs only)."""
    a1, a2 = np.asarray(a1), np.asarray(a2)
    if a1.shape != a2.shape:
        return False
    n = a1.shape[0]
    if n > 9:
        raise ValueError("brute-force isomorphism is limited to n <= 9")
    if a1.sum() != a2.sum() or sorted(a1.sum(1)) != sorted(a2.sum(1)):
        return False
    for perm in itertools.permutations(range(n)):
        p = list(perm)
        if np.array_equal(a1[np.ix_(p, p)], a2):
            return True
    return False


def exact_match(a: np.ndarray, a_hat: np.ndarray) -> bool:
    a, a_hat = np.asarray(a), np.asarray(a_hat)
    if a.shape != a_hat.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {a_hat.shape}")
    return bool(np.array_equal(a, a_hat))


def cosine_divergence(p, q) -> np.ndarray:
    """Per-node cosine similarity of matching rows; NaN where a row has zero norm."""
    pv = p.data if isinstance(p, dn.Tensor) else np.asarray(p, dtype=np.float64)
    qv = q.data if isinstance(q, dn.Tensor) else np.asarray(q, dtype=np.float64)
    if pv.shape != qv.shape:
        raise ValueError(f"shape mismatch {pv.shape} vs {qv.shape}")
    norms = np.linalg.norm(pv, axis=1) * np.linalg.norm(qv, axis=1)
    dots = (pv * qv).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(norms > 0, dots / np.where(norms > 0, norms, 1.0), np.nan)


# reports ------------------------------------------------------------------------

@dataclass
class GraphResult:
    graph_id: int
    auc: float | None
    wl_pass: bool
    exact: bool
    diag_positive_rate: float


@dataclass
class ReconstructionReport:
    per_graph: list[GraphResult]
    mean_auc: float | None
    wl_pass_rate: float
    exact_rate: float
    diag_positive_rate: float

    def to_json(self) -> str:
        payload = {
            "aggregate": {"mean_auc": self.mean_auc, "wl_pass_rate": self.wl_pass_rate,
                          "exact_rate": self.exact_rate, "diag_positive_rate": self.diag_positive_rate},
            "per_graph": [asdict(r) for r in self.per_graph],
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["graph_id", "auc", "wl_pass", "exact", "diag_positive_rate"])
        for r in self.per_graph:
            w.writerow([r.graph_id, "" if r.auc is None else f"{r.auc:.10f}", int(r.wl_pass),
                        int(r.exact), f"{r.diag_positive_rate:.10f}"])
        return buf.getvalue()


def symmetric_logits(z: np.ndarray) -> np.ndarray:
    return 0.5 * (z + z.T)


def evaluate_graph(model: GraphAutoencoder, g: Graph, th: float = 0.5, self_loops: bool = True
                   ) -> tuple[GraphResult, np.ndarray, np.ndarray]:
    """Score one graph; also returns the P and Q embeddings."""
    target = reconstruction_target(g, self_loops)
    with dn.no_grad():
        p, q = branch_embeddings(model, encode(model, g), g.directed)
        z = kernel_logits(model, p, q).data
    diag_rate = float(np.mean(np.diag(z) > 0))
    if g.directed:
        pred = predict_edges(z, th)
        exact = exact_match(target, pred)
        res = GraphResult(g.id, graph_auc(z, target, True), exact, exact, diag_rate)
    else:
        zs = symmetric_logits(z)
        pred = predict_edges(zs, th)
        res = GraphResult(g.id, graph_auc(zs, target, False), wl_test(target, pred),
                          exact_match(target, pred), diag_rate)
    return res, p.data, q.data


def evaluate(model: GraphAutoencoder, gs: GraphSet, th: float = 0.5, self_loops: bool = True,
             workers: int = 1) -> ReconstructionReport:
    if len(gs) == 0:
        raise ValueError("cannot evaluate an empty graph set")

    def one(g):
        return evaluate_graph(model, g, th, self_loops)[0]

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            rows = list(ex.map(one, gs.graphs))
    else:
        rows = [one(g) for g in gs.graphs]
    aucs = [r.auc for r in rows if r.auc is not None]
    return ReconstructionReport(
        rows,
        float(np.mean(aucs)) if aucs else None,
        float(np.mean([r.wl_pass for r in rows])),
        float(np.mean([r.exact for r in rows])),
        float(np.mean([r.diag_positive_rate for r in rows])),
    )


def divergence_histogram(values: np.ndarray, bins: int = 20) -> str:
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    counts, edges = np.histogram(v, bins=bins, range=(-1.0, 1.0))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi", "count"])
    for lo, hi, c in zip(edges[:-1], edges[1:], counts):
        w.writerow([f"{lo:.4f}", f"{hi:.4f}", int(c)])
    return buf.getvalue()
