"""Downstream classifier on the encoder and latent-space structure attacks."""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import diffnum as dn
from .diffnum import Tape, Tensor
from .graphdata import Graph, GraphSet
from .layers import glorot
from .models import GraphAutoencoder, LatentCode, encode, encode_arrays, predict_edges, reconstruct_code
from .training import AdamW


class BudgetError(ValueError):
    pass


# classifier ---------------------------------------------------------------------

class ClassifierHead:
    """Mean-and-max readout over latent rows followed by three affine layers."""

    def __init__(self, latent_dim: int, num_classes: int, hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        dims = [2 * latent_dim, hidden, hidden, num_classes]
        self.weights = [glorot(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
        self.biases = [Tensor(np.zeros((1, b)), requires_grad=True) for b in dims[1:]]
        self.num_classes = num_classes

    def parameters(self) -> list[Tensor]:
        return [*self.weights, *self.biases]

    def __call__(self, z: Tensor) -> Tensor:
        h = dn.concat_cols(dn.mean(z, axis=0), dn.max_rows(z))
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = dn.add(dn.matmul(h, w), b)
            if i < len(self.weights) - 1:
                h = dn.relu(h)
        return h


def graph_logits(model: GraphAutoencoder, head: ClassifierHead, g: Graph) -> Tensor:
    return head(encode(model, g).Z)


def predict_class(model: GraphAutoencoder, head: ClassifierHead, g: Graph) -> int:
    with dn.no_grad():
        return int(np.argmax(graph_logits(model, head, g).data[0]))


def accuracy(model: GraphAutoencoder, head: ClassifierHead, gs: GraphSet) -> float:
    if len(gs) == 0:
        raise ValueError("cannot score an empty set")
    return float(np.mean([predict_class(model, head, g) == g.label for g in gs]))


@dataclass
class ClassifierReport:
    epoch_loss: list[float]
    train_accuracy: float
    test_accuracy: float | None


CLASSIFIER_MODES = {"finetune": 10, "full": 100}


def train_classifier(model: GraphAutoencoder, head: ClassifierHead, train_set: GraphSet,
                     epochs: int | None = None, mode: str = "finetune", lr: float = 1e-3, seed: int = 0,
                     test_set: GraphSet | None = None) -> ClassifierReport:
    """Cross-entropy training, one step per graph.

    ``finetune`` keeps the encoder frozen and trains only the head (10 epochs
    by default); ``full`` also updates the encoder (100 epochs by default).
    """
    if mode not in CLASSIFIER_MODES:
        raise ValueError(f"mode must be one of {sorted(CLASSIFIER_MODES)}")
    if any(g.label is None for g in train_set):
        raise ValueError("classifier training needs labeled graphs")
    epochs = CLASSIFIER_MODES[mode] if epochs is None else epochs
    params = head.parameters() + (model.encoder_parameters() if mode == "full" else [])
    opt = AdamW(params, lr=lr)
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(epochs):
        total = 0.0
        for k in rng.permutation(len(train_set)):
            g = train_set.graphs[k]
            opt.zero_grad()
            with Tape() as tape:
                loss = dn.cross_entropy(graph_logits(model, head, g), int(g.label))
                dn.backward(loss, tape, wrt=params)
            opt.step()
            total += loss.item()
        losses.append(total / len(train_set))
    test_acc = accuracy(model, head, test_set) if test_set is not None and len(test_set) else None
    return ClassifierReport(losses, accuracy(model, head, train_set), test_acc)


# attacks ------------------------------------------------------------------------

@dataclass
class AttackConfig:
    epsilon: float = 10.0
    step_size: float = 0.5
    steps: int = 50
    query_budget: int = 400
    c: float = 1.0
    k: float = 0.0
    finetune_steps: int = 0
    finetune_lr: float = 1e-3
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.steps < 0 or self.finetune_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.queries_needed() > self.query_budget:
            raise BudgetError(f"{self.queries_needed()} queries needed, budget is {self.query_budget}")

    def queries_needed(self) -> int:
        # attack steps + fine-tuning steps + the final re-encoding check
        return self.steps + self.finetune_steps + 1


@dataclass
class AttackResult:
    graph_id: int
    method: str
    success: bool
    adjacency: np.ndarray
    delta_edge: float
    queries: int
    label: int
    clean_pred: int
    adv_pred: int
    delta_l1: float
    l1_trace: list[float] = field(default_factory=list)
    finetune_distance: tuple[float, float] | None = None


def project_l1_ball(v: np.ndarray, eps: float) -> np.ndarray:
    """Euclidean projection onto ``{x : |x|_1 <= eps}`` by sort and threshold."""
    v = np.asarray(v, dtype=np.float64)
    if eps <= 0:
        return np.zeros_like(v)
    a = np.abs(v).ravel()
    if a.sum() <= eps:
        return v.copy()
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    ks = np.arange(1, u.size + 1)
    rho = np.nonzero(u * ks > css - eps)[0][-1]
    theta = (css[rho] - eps) / (rho + 1.0)
    out = np.sign(v) * np.maximum(np.abs(v) - theta, 0.0)
    # cancellation in css - eps can leave the norm a few ulps outside the ball
    while np.abs(out).sum() > eps:
        out *= 1.0 - 4.0 * np.finfo(np.float64).eps
    return out


def delta_edge(a: np.ndarray, a_adv: np.ndarray, directed: bool) -> float:
    """Fraction of changed node pairs: strict upper triangle if undirected, off-diagonal if directed."""
    a, a_adv = np.asarray(a), np.asarray(a_adv)
    if a.shape != a_adv.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {a_adv.shape}")
    n = a.shape[0]
    if n < 2:
        return 0.0
    if directed:
        mask = ~np.eye(n, dtype=bool)
    else:
        mask = np.triu(np.ones((n, n), dtype=bool), 1)
    return float((a[mask] != a_adv[mask]).sum() / mask.sum())


def _shifted(code: LatentCode, delta: Tensor | np.ndarray) -> LatentCode:
    return LatentCode(dn.add(dn.constant(code.Z.data), dn.constant(delta)), code.records, code.adjacency)


def _clean_code(model: GraphAutoencoder, g: Graph) -> LatentCode:
    with dn.no_grad():
        return encode(model, g)


def adversarial_adjacency(decoder: GraphAutoencoder, code: LatentCode, delta: np.ndarray, directed: bool,
                          th: float = 0.5) -> np.ndarray:
    """Hard reconstruction at ``Z + delta`` as a loop-free graph."""
    with dn.no_grad():
        z = reconstruct_code(decoder, _shifted(code, delta), directed).data
    if not directed:
        z = 0.5 * (z + z.T)
    a = predict_edges(z, th)
    np.fill_diagonal(a, 0)
    return a


def _soft_adjacency(decoder: GraphAutoencoder, code: LatentCode, directed: bool) -> Tensor:
    s = dn.sigmoid(reconstruct_code(decoder, code, directed))
    if not directed:
        s = dn.scale(dn.add(s, dn.transpose(s)), 0.5)
    return dn.mul(s, Tensor(1.0 - np.eye(s.shape[0])))


def latent_distance(model: GraphAutoencoder, decoder: GraphAutoencoder, g: Graph, code: LatentCode,
                    delta: np.ndarray) -> Tensor:
    """``|Z + delta - encoder(X, soft reconstruction at Z + delta)|_F``."""
    target = _shifted(code, delta)
    soft = _soft_adjacency(decoder, target, g.directed)
    z_back = encode_arrays(model, g.features, soft, g.directed).Z
    diff = dn.sub(z_back, dn.constant(target.Z.data))
    return dn.power(dn.sum_(dn.mul(diff, diff)), 0.5)


def finetune_reconstructor(model: GraphAutoencoder, g: Graph, delta: np.ndarray, steps: int,
                           lr: float = 1e-3, code: LatentCode | None = None
                           ) -> tuple[GraphAutoencoder, float, float]:
    """Adapt a copy of the decoder so the perturbed code survives re-encoding.

    The encoder stays fixed; returns the tuned copy and the distance before
    and after tuning.
    """
    code = code or _clean_code(model, g)
    decoder = model.copy()
    with dn.no_grad():
        before = latent_distance(model, decoder, g, code, delta).item()
    if steps == 0:
        return decoder, before, before
    opt = AdamW(decoder.decoder_parameters(), lr=lr, weight_decay=0.0)
    for _ in range(steps):
        opt.zero_grad()
        with Tape() as tape:
            dist = latent_distance(model, decoder, g, code, delta)
            dn.backward(dist, tape, wrt=opt.params)
        opt.step()
    with dn.no_grad():
        after = latent_distance(model, decoder, g, code, delta).item()
    return decoder, before, after


def _finish(method: str, model: GraphAutoencoder, head: ClassifierHead, g: Graph, code: LatentCode,
            delta: np.ndarray, cfg: AttackConfig, queries: int, clean_pred: int,
            l1_trace: list[float]) -> AttackResult:
    decoder, ft = model, None
    if cfg.finetune_steps:
        decoder, before, after = finetune_reconstructor(model, g, delta, cfg.finetune_steps,
                                                        cfg.finetune_lr, code)
        ft = (before, after)
        queries += cfg.finetune_steps
    a_adv = adversarial_adjacency(decoder, code, delta, g.directed, cfg.threshold)
    adv_graph = Graph(g.id, g.features, a_adv, g.directed, g.label)
    adv_pred = predict_class(model, head, adv_graph)
    queries += 1
    return AttackResult(g.id, method, adv_pred != g.label, a_adv, delta_edge(g.adjacency, a_adv, g.directed),
                        queries, int(g.label), clean_pred, adv_pred, float(np.abs(delta).sum()), l1_trace, ft)


def _class_loss_grad(head: ClassifierHead, z: np.ndarray, delta: np.ndarray, y: int) -> np.ndarray:
    d = Tensor(delta, requires_grad=True)
    with Tape() as tape:
        loss = dn.cross_entropy(head(dn.add(dn.constant(z), d)), y)
        dn.backward(loss, tape, wrt=[d])
    return d.grad


def pgd_latent(model: GraphAutoencoder, head: ClassifierHead, g: Graph, cfg: AttackConfig) -> AttackResult:
    """Sign-gradient ascent on the classification loss, projected onto the L1 ball."""
    if g.label is None:
        raise ValueError("attacks need a labeled graph")
    code = _clean_code(model, g)
    z = code.Z.data
    clean_pred = predict_class(model, head, g)
    delta = np.zeros_like(z)
    trace = []
    for _ in range(cfg.steps):
        grad = _class_loss_grad(head, z, delta, int(g.label))
        delta = project_l1_ball(delta + cfg.step_size * np.sign(grad), cfg.epsilon)
        trace.append(float(np.abs(delta).sum()))
    return _finish("pgd", model, head, g, code, delta, cfg, cfg.steps, clean_pred, trace)


def cw_latent(model: GraphAutoencoder, head: ClassifierHead, g: Graph, cfg: AttackConfig) -> AttackResult:
    """Gradient descent on ``|delta|_1 + c * max(f_y - max_{i != y} f_i, -k)``."""
    if g.label is None:
        raise ValueError("attacks need a labeled graph")
    y = int(g.label)
    code = _clean_code(model, g)
    z = code.Z.data
    clean_pred = predict_class(model, head, g)
    delta = np.zeros_like(z)
    trace = []
    for _ in range(cfg.steps):
        d = Tensor(delta, requires_grad=True)
        with Tape() as tape:
            logits = head(dn.add(dn.constant(z), d))
            f = logits.data[0]
            others = np.delete(np.arange(f.size), y)
            j = int(others[np.argmax(f[others])])
            sel = np.zeros((1, f.size))
            sel[0, y], sel[0, j] = 1.0, -1.0
            margin = dn.sum_(dn.mul(logits, Tensor(sel)))
            obj = dn.sum_(dn.abs_(d))
            if margin.item() > -cfg.k:
                obj = dn.add(obj, dn.scale(margin, cfg.c))
            dn.backward(obj, tape, wrt=[d])
        delta = delta - cfg.step_size * d.grad
        trace.append(float(np.abs(delta).sum()))
    return _finish("cw", model, head, g, code, delta, cfg, cfg.steps, clean_pred, trace)


def random_latent(model: GraphAutoencoder, head: ClassifierHead, g: Graph, cfg: AttackConfig) -> AttackResult:
    """Baseline: one random direction scaled to L1 norm ``epsilon``."""
    if g.label is None:
        raise ValueError("attacks need a labeled graph")
    code = _clean_code(model, g)
    rng = np.random.default_rng([cfg.seed, g.id])
    noise = rng.uniform(-1.0, 1.0, size=code.Z.shape)
    norm = np.abs(noise).sum()
    delta = noise * (cfg.epsilon / norm) if norm > 0 else noise
    return _finish("random", model, head, g, code, delta, cfg, 0, predict_class(model, head, g),
                   [float(np.abs(delta).sum())])


ATTACKS = {"random": random_latent, "pgd": pgd_latent, "cw": cw_latent}


def attack_set(model: GraphAutoencoder, head: ClassifierHead, gs: GraphSet, cfg: AttackConfig,
               methods: tuple[str, ...] = ("random", "pgd", "cw"), workers: int = 1) -> list[AttackResult]:
    jobs = [(m, g) for m in methods for g in gs]
    for m in methods:
        if m not in ATTACKS:
            raise ValueError(f"unknown attack {m!r}")
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(lambda job: ATTACKS[job[0]](model, head, job[1], cfg), jobs))
    return [ATTACKS[m](model, head, g, cfg) for m, g in jobs]


def results_csv(results: list[AttackResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["graph_id", "method", "success", "delta_edge", "queries"])
    for r in results:
        w.writerow([r.graph_id, r.method, int(r.success), f"{r.delta_edge:.10f}", r.queries])
    return buf.getvalue()


def summary_csv(results: list[AttackResult], clean_accuracy: float) -> str:
    """Accuracy after each attack and the mean changed-edge fraction."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "graphs", "clean_accuracy", "attacked_accuracy", "success_rate", "mean_delta_edge"])
    for m in dict.fromkeys(r.method for r in results):
        rs = [r for r in results if r.method == m]
        acc = float(np.mean([r.adv_pred == r.label for r in rs]))
        succ = float(np.mean([r.success for r in rs]))
        de = float(np.mean([r.delta_edge for r in rs]))
        w.writerow([m, len(rs), f"{clean_accuracy:.6f}", f"{acc:.6f}", f"{succ:.6f}", f"{de:.6f}"])
    return buf.getvalue()


def success_rate(results: list[AttackResult], method: str) -> float:
    rs = [r.success for r in results if r.method == method]
    return float(np.mean(rs)) if rs else math.nan
