"""Balanced reconstruction loss, AdamW and the per-graph training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffnum as dn
from .diffnum import Tape, Tensor
from .graphdata import Graph, GraphSet
from .models import GraphAutoencoder, ModelConfig, branch_embeddings, encode, kernel_logits

log = logging.getLogger(__name__)


class DegenerateGraph(ValueError):
    """Adjacency target has only zeros or only ones."""


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha0: float
    alpha1: float
    c0: int
    c1: int


def compute_alphas(a: np.ndarray) -> LossWeights:
    """Class weights that equalise the zero and one contributions.

    Counts run over all ``n^2`` entries, diagonal included.
    """
    a = np.asarray(a)
    c1 = int(a.sum())
    c0 = int(a.size - c1)
    if c0 == 0 or c1 == 0:
        raise DegenerateGraph(f"target has c0={c0}, c1={c1}")
    total = c0 + c1
    return LossWeights(total / (2.0 * c0), total / (2.0 * c1), c0, c1)


def loss_weights_or_unit(a: np.ndarray) -> LossWeights:
    try:
        return compute_alphas(a)
    except DegenerateGraph:
        c1 = int(np.asarray(a).sum())
        return LossWeights(1.0, 1.0, int(np.asarray(a).size) - c1, c1)


def balanced_bce(logits: Tensor, a: np.ndarray, w: LossWeights) -> Tensor:
    """Sum of class-weighted binary cross-entropy, computed on logits."""
    x = logits.data
    a = np.asarray(a, dtype=np.float64)
    if x.shape != a.shape:
        raise ValueError(f"logits {x.shape} vs target {a.shape}")
    weight = np.where(a > 0.5, w.alpha1, w.alpha0)
    per = np.maximum(x, 0.0) - x * a + np.log1p(np.exp(-np.abs(x)))
    value = np.array([[(weight * per).sum()]])

    def rule(g):
        return (g[0, 0] * weight * (dn.stable_sigmoid(x) - a),)

    return dn.apply_op(value, (logits,), rule, "balanced_bce")


def reconstruction_target(g: Graph, self_loops: bool = True) -> np.ndarray:
    """Adjacency the decoder is trained toward; optionally with a unit diagonal."""
    a = np.array(g.adjacency, dtype=np.int8)
    if self_loops:
        np.fill_diagonal(a, 1)
    return a


# optimiser -------------------------------------------------------------------

@dataclass
class OptState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: list[Tensor], grads: list[np.ndarray], st: OptState) -> None:
    """One decoupled-weight-decay Adam update, in place."""
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            bad = params[i].name or f"param[{i}] shape={params[i].shape}"
            raise DivergenceError(f"non-finite gradient in {bad} at step {st.step + 1}")
    if not st.m:
        st.m = [np.zeros_like(p.data) for p in params]
        st.v = [np.zeros_like(p.data) for p in params]
    st.step += 1
    bc1 = 1.0 - st.beta1 ** st.step
    bc2 = 1.0 - st.beta2 ** st.step
    for p, g, m, v in zip(params, grads, st.m, st.v):
        if st.weight_decay:
            p.data *= 1.0 - st.lr * st.weight_decay
        m *= st.beta1
        m += (1.0 - st.beta1) * g
        v *= st.beta2
        v += (1.0 - st.beta2) * g * g
        p.data -= st.lr * (m / bc1) / (np.sqrt(v / bc2) + st.eps)


class AdamW:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-2):
        self.params = list(params)
        self.state = OptState(lr, betas[0], betas[1], eps, weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state)


# training loop ---------------------------------------------------------------

@dataclass
class TraceSpec:
    graph_id: int | None = None
    embeddings: bool = False
    diagonal: bool = False


@dataclass
class TrainTrace:
    epoch_loss: list[float] = field(default_factory=list)
    iterations: list[tuple[int, int, int, float]] = field(default_factory=list)
    embeddings: list[tuple[int, np.ndarray, np.ndarray]] = field(default_factory=list)
    diagonal: list[tuple[int, np.ndarray]] = field(default_factory=list)


def graph_loss(model: GraphAutoencoder, g: Graph, self_loops: bool = True
               ) -> tuple[Tensor, Tensor, Tensor, Tensor, LossWeights]:
    target = reconstruction_target(g, self_loops)
    w = loss_weights_or_unit(target)
    code = encode(model, g)
    p, q = branch_embeddings(model, code, g.directed)
    logits = kernel_logits(model, p, q)
    return balanced_bce(logits, target, w), logits, p, q, w


def train(model: GraphAutoencoder, gs: GraphSet, epochs: int = 200, lr: float = 1e-3, seed: int = 0,
          trace_spec: TraceSpec | None = None, weight_decay: float = 1e-2, self_loops: bool = True,
          optimizer: AdamW | None = None) -> tuple[GraphAutoencoder, TrainTrace]:
    """One optimiser step per graph, graphs reshuffled every epoch.

    Losses recorded in the trace are per-entry means (sum divided by ``n^2``)
    taken before each step.
    """
    if len(gs) == 0:
        raise ValueError("training set is empty")
    trace = TrainTrace()
    spec = trace_spec or TraceSpec()
    opt = optimizer or AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    it = 0
    for epoch in range(epochs):
        total = 0.0
        for k in rng.permutation(len(gs)):
            g = gs.graphs[k]
            opt.zero_grad()
            try:
                with Tape() as tape:
                    loss, logits, p, q, _ = graph_loss(model, g, self_loops)
                    dn.backward(loss, tape)
            except FloatingPointError as exc:
                raise DivergenceError(f"epoch {epoch}, graph {g.id}: {exc}") from None
            value = loss.item() / g.n ** 2
            if not math.isfinite(value):
                raise DivergenceError(f"loss diverged at epoch {epoch}")
            try:
                opt.step()
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}") from None
            total += value
            trace.iterations.append((epoch, it, g.id, value))
            if spec.graph_id is not None and g.id == spec.graph_id:
                if spec.embeddings:
                    trace.embeddings.append((it, p.data[:2].copy(), q.data[:2].copy()))
                if spec.diagonal:
                    trace.diagonal.append((it, np.diag(logits.data).copy()))
            it += 1
        trace.epoch_loss.append(total / len(gs))
        log.debug("epoch %d loss %.6f", epoch, trace.epoch_loss[-1])
    return model, trace


def mean_loss(model: GraphAutoencoder, gs: GraphSet, self_loops: bool = True) -> float:
    """Mean over graphs of the per-entry balanced BCE, no gradient recording."""
    with dn.no_grad():
        vals = [graph_loss(model, g, self_loops)[0].item() / g.n ** 2 for g in gs]
    return float(np.mean(vals))


def suggest_config(gs: GraphSet | float, input_dim: int | None = None, kernel: str = "cross") -> ModelConfig:
    """Depth, pooling schedule and width from the average graph size.

    Ratios 0.9, 0.8, ... are appended while the expected node count stays at
    or above 4; the first and last layers never pool.
    """
    if isinstance(gs, GraphSet):
        mean_n = gs.mean_nodes()
        input_dim = gs.feature_dim if input_dim is None else input_dim
    else:
        mean_n = float(gs)
    if input_dim is None:
        raise ValueError("input_dim is required when passing a bare node count")
    ratios = []
    size = mean_n
    for i in range(1, 9):
        r = round(1.0 - 0.1 * i, 1)
        if size * r < 4.0:
            break
        size *= r
        ratios.append(r)
    hidden = int(min(1024, max(16, 2 ** math.ceil(math.log2(max(mean_n, 1.0))))))
    return ModelConfig(input_dim=input_dim, hidden_dim=hidden, pooling_ratios=[1.0, *ratios, 1.0],
                       kernel=kernel)
