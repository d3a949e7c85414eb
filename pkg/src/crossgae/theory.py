"""Executable checks on what self- and cross-correlation decoders can express.

Sign systems ask for embeddings whose pairwise products take prescribed
signs. A hinge-margin search looks for witnesses; a few small cases have
closed-form impossibility certificates.
"""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .graphdata import Graph, SymmetryInfo, is_topologically_symmetric
from .models import predict_edges

MARGIN = 0.1
FEASIBLE = "feasible"
PRESUMED_INFEASIBLE = "presumed-infeasible"
PROVEN_INFEASIBLE = "proven-infeasible"


class SizeLimitError(ValueError):
    pass


@dataclass(frozen=True)
class ConstraintSystem:
    """Required sign of ``z_i . z_j`` (self) or ``p_i . q_j`` (cross).

    ``diagonal`` controls whether the ``i == j`` entries are constrained too.
    """
    signs: np.ndarray
    mode: str = "self"
    diagonal: bool = False

    def __post_init__(self):
        s = np.asarray(self.signs, dtype=np.int8)
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise ValueError("signs must be a square matrix")
        if not np.all(np.isin(s, (-1, 1))):
            raise ValueError("signs must be +1 or -1")
        if self.mode not in ("self", "cross"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "self" and not np.array_equal(s, s.T):
            raise ValueError("self-mode sign systems must be symmetric")
        s.setflags(write=False)
        object.__setattr__(self, "signs", s)

    @property
    def n(self) -> int:
        return self.signs.shape[0]

    def mask(self) -> np.ndarray:
        m = np.ones((self.n, self.n), dtype=bool)
        if not self.diagonal:
            np.fill_diagonal(m, False)
        return m

    @classmethod
    def from_adjacency(cls, a: np.ndarray, mode: str = "self", diagonal: bool = False) -> ConstraintSystem:
        return cls(np.where(np.asarray(a) > 0, 1, -1), mode, diagonal)


@dataclass
class Verdict:
    status: str
    witness: tuple[np.ndarray, np.ndarray] | None = None
    certificate: str | None = None

    @property
    def feasible(self) -> bool:
        return self.status == FEASIBLE


def verify_witness(cs: ConstraintSystem, p: np.ndarray, q: np.ndarray) -> bool:
    """Independent check that every constrained product has the required strict sign."""
    if cs.mode == "self" and not np.array_equal(p, q):
        return False
    n = cs.n
    for i in range(n):
        for j in range(n):
            if i == j and not cs.diagonal:
                continue
            dot = float(sum(a * b for a, b in zip(p[i], q[j])))
            if dot * cs.signs[i, j] <= 0:
                return False
    return True


def sign_product_identity(z1: float, z2: float, z3: float) -> tuple[float, float]:
    """Both sides of (z1 z2)(z1 z3)(z2 z3) = (z1 z2 z3)^2."""
    return (z1 * z2) * (z1 * z3) * (z2 * z3), (z1 * z2 * z3) ** 2


def certificate(cs: ConstraintSystem, d: int) -> str | None:
    """A closed-form reason the system has no solution, if one applies."""
    s, m = cs.signs, cs.mask()
    if cs.mode == "self" and cs.diagonal and np.any(np.diag(s) < 0):
        i = int(np.flatnonzero(np.diag(s) < 0)[0])
        return f"squared norm of node {i} cannot be negative"
    if d != 1:
        return None
    n = cs.n
    if cs.mode == "self":
        # scalar embeddings: the three pairwise products of a triple multiply to a square
        for i, j, k in itertools.combinations(range(n), 3):
            if s[i, j] * s[i, k] * s[j, k] < 0:
                return f"sign product over nodes ({i},{j},{k}) is negative"
        return None
    # scalar cross embeddings: (p_i q_j)(p_k q_l)(p_i q_l)(p_k q_j) is a square
    for i, k in itertools.combinations(range(n), 2):
        for j, l in itertools.combinations(range(n), 2):
            cells = [(i, j), (k, l), (i, l), (k, j)]
            if all(m[c] for c in cells) and np.prod([s[c] for c in cells]) < 0:
                return f"sign product over rows ({i},{k}) and columns ({j},{l}) is negative"
    return None


def _hinge_search(cs: ConstraintSystem, d: int, rng: np.random.Generator, steps: int,
                  lr: float) -> tuple[np.ndarray, np.ndarray] | None:
    s = cs.signs.astype(np.float64)
    m = cs.mask()
    p = rng.normal(size=(cs.n, d))
    q = p if cs.mode == "self" else rng.normal(size=(cs.n, d))
    for _ in range(steps):
        g = p @ q.T
        active = m & (s * g < MARGIN)
        if not active.any():
            return p.copy(), q.copy()
        coef = np.where(active, -s, 0.0)  # d loss / d g
        if cs.mode == "self":
            p = p - lr * (coef + coef.T) @ p
            q = p
        else:
            gp, gq = coef @ q, coef.T @ p
            p, q = p - lr * gp, q - lr * gq
    g = p @ q.T
    if not (m & (s * g < MARGIN)).any():
        return p.copy(), q.copy()
    return None


def brute_force_feasibility(cs: ConstraintSystem, d: int, trials: int = 50, seed: int = 0,
                            steps: int = 400, lr: float = 0.05) -> Verdict:
    """Search for a witness with random restarts; certify impossibility where a closed form exists."""
    if cs.n > 8 or d > 8 or d < 1:
        raise SizeLimitError(f"desk-scale limits are n <= 8 and 1 <= d <= 8, got n={cs.n}, d={d}")
    cert = certificate(cs, d)
    if cert is not None:
        return Verdict(PROVEN_INFEASIBLE, certificate=cert)
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        found = _hinge_search(cs, d, rng, steps, lr)
        if found is not None and verify_witness(cs, *found):
            return Verdict(FEASIBLE, witness=found)
    return Verdict(PRESUMED_INFEASIBLE)


def enumerate_sign_systems(n: int, mode: str = "self", diagonal: bool = False):
    """All symmetric sign matrices on ``n`` nodes, diagonal values included."""
    iu = np.triu_indices(n)
    for bits in itertools.product((1, -1), repeat=len(iu[0])):
        s = np.zeros((n, n), dtype=np.int8)
        s[iu] = bits
        s = s + np.triu(s, 1).T
        yield ConstraintSystem(s, mode, diagonal)


def _random_system(n: int, rng: np.random.Generator) -> np.ndarray:
    s = rng.choice(np.array([-1, 1], dtype=np.int8), size=(n, n))
    return np.triu(s) + np.triu(s, 1).T


@dataclass
class SweepRow:
    mode: str
    n: int
    d: int
    feasible_fraction: float
    cases: int


def dimension_sweep(n: int, cases: int = 64, seed: int = 0, trials: int = 20,
                    diagonal: bool = False) -> list[SweepRow]:
    """Feasible fraction per embedding width for self and cross decoding.

    Sign systems are enumerated exhaustively when there are at most ``cases``
    of them, otherwise sampled. A self witness is reused as ``P = Q = Z`` so
    cross feasibility never falls below self feasibility.
    """
    if n > 6:
        raise SizeLimitError("dimension_sweep is limited to n <= 6")
    free = n * (n + 1) // 2
    if 2 ** free <= cases:
        systems = [cs.signs for cs in enumerate_sign_systems(n)]
    else:
        rng = np.random.default_rng(seed)
        systems = [_random_system(n, rng) for _ in range(cases)]
    rows = []
    for d in range(1, n + 1):
        hits = {"self": 0, "cross": 0}
        for k, s in enumerate(systems):
            v_self = brute_force_feasibility(ConstraintSystem(s, "self", diagonal), d, trials, seed + k)
            hits["self"] += v_self.feasible
            cross = ConstraintSystem(s, "cross", diagonal)
            if v_self.feasible and verify_witness(cross, *v_self.witness):
                hits["cross"] += 1
            else:
                hits["cross"] += brute_force_feasibility(cross, d, trials, seed + k).feasible
        for mode in ("self", "cross"):
            rows.append(SweepRow(mode, n, d, hits[mode] / len(systems), len(systems)))
    return rows


def sweep_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "n", "d", "feasible_fraction", "cases"])
    for r in rows:
        w.writerow([r.mode, r.n, r.d, f"{r.feasible_fraction:.6f}", r.cases])
    return buf.getvalue()


# equal embeddings under symmetry ----------------------------------------------

def check_lemma_2_2(encoder_fn: Callable[[Graph], np.ndarray], g: Graph, info: SymmetryInfo,
                    th: float = 0.5, l2_scale: float = 1.0, atol: float = 1e-9) -> bool:
    """Twins get identical embeddings, and self kernels then predict their mutual edge.

    ``encoder_fn`` maps a graph to node embeddings. Both the inner product and
    the fixed L2 kernel ``C (1 - |z_i - z_j|^2)`` are checked.
    """
    if not is_topologically_symmetric(g, info):
        raise ValueError(f"graph {g.id} is not topologically symmetric under the given twins")
    z = np.asarray(encoder_fn(g), dtype=np.float64)
    if z.shape[0] != g.n:
        raise ValueError(f"encoder returned {z.shape[0]} rows for {g.n} nodes")
    inner = z @ z.T
    sq = np.sum(z * z, axis=1)
    l2 = l2_scale * (1.0 - (sq[:, None] + sq[None, :] - 2.0 * inner))
    pred_inner, pred_l2 = predict_edges(inner, th), predict_edges(l2, th)
    for group in info.twin_groups():
        for i, j in itertools.combinations(group, 2):
            if not np.allclose(z[i], z[j], atol=atol, rtol=atol):
                return False
            if not (pred_inner[i, j] and pred_l2[i, j]):
                return False
    return True


def self_kernel_certificates(logits: np.ndarray, info: SymmetryInfo, th: float = 0.5) -> tuple[bool, bool]:
    """(every diagonal predicted 1, every twin pair predicted 1) for a self-kernel output."""
    pred = predict_edges(logits, th)
    diag_ok = bool(np.all(np.diag(pred) == 1))
    twins_ok = all(pred[i, j] and pred[j, i] for group in info.twin_groups()
                   for i, j in itertools.combinations(group, 2))
    return diag_ok, twins_ok
