"""GCN block, top-k pooling and unpooling on dense adjacency matrices."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffnum as dn
from .diffnum import Tensor


class ConfigError(ValueError):
    pass


def glorot(rng: np.random.Generator, d_in: int, d_out: int, name: str | None = None) -> Tensor:
    lim = math.sqrt(6.0 / (d_in + d_out))
    return Tensor(rng.uniform(-lim, lim, size=(d_in, d_out)), requires_grad=True, name=name)


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """``D^-1/2 (A + I) D^-1/2`` with degrees taken from ``A + I``."""
    a_hat = np.asarray(a, dtype=np.float64) + np.eye(a.shape[0])
    d = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return a_hat * d[:, None] * d[None, :]


def message_adjacency(a: np.ndarray, directed: bool) -> np.ndarray:
    """Adjacency used for message passing: directed graphs are symmetrised."""
    a = np.asarray(a, dtype=np.int8)
    return (a | a.T) if directed else a


def normalize_soft_adjacency(s: Tensor) -> Tensor:
    """Differentiable normalisation of a real-valued, symmetric adjacency."""
    a_hat = dn.add(s, Tensor(np.eye(s.shape[0])))
    dinv = dn.power(dn.sum_(a_hat, axis=1), -0.5)
    return dn.mul(dn.mul(a_hat, dinv), dn.transpose(dinv))


@dataclass
class GcnParams:
    W: Tensor
    ln_gain: Tensor
    ln_bias: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int) -> GcnParams:
        return cls(glorot(rng, d_in, d_out),
                   Tensor(np.ones((1, d_out)), requires_grad=True),
                   Tensor(np.zeros((1, d_out)), requires_grad=True))

    @property
    def d_in(self) -> int:
        return self.W.shape[0]

    @property
    def d_out(self) -> int:
        return self.W.shape[1]

    def tensors(self) -> list[Tensor]:
        return [self.W, self.ln_gain, self.ln_bias]


def gcn_block(h: Tensor, a_norm: Tensor | np.ndarray, params: GcnParams, skip: str = "add") -> Tensor:
    """relu(A_norm h W), then layer norm, then an optional residual on ``h``."""
    if skip not in ("add", "concat", "none"):
        raise ConfigError(f"unknown skip mode {skip!r}")
    if skip == "add" and params.d_in != params.d_out:
        raise ConfigError(f"add-skip needs d_in == d_out, got {params.d_in} -> {params.d_out}")
    a_norm = dn.constant(a_norm)
    if a_norm.shape != (h.shape[0], h.shape[0]):
        raise ConfigError(f"adjacency {a_norm.shape} does not match {h.shape[0]} nodes")
    # contract the cheaper side first
    if params.d_out < h.shape[1]:
        z = dn.matmul(a_norm, dn.matmul(h, params.W))
    else:
        z = dn.matmul(dn.matmul(a_norm, h), params.W)
    out = dn.layer_norm(dn.relu(z), params.ln_gain, params.ln_bias)
    if skip == "add":
        out = dn.add(out, h)
    elif skip == "concat":
        out = dn.concat_cols(out, h)
    return out


@dataclass
class PoolRecord:
    kept_idx: np.ndarray
    gate: Tensor
    A_prev: np.ndarray | Tensor
    h_prev: Tensor
    n_prev: int


def pooled_size(n: int, ratio: float) -> int:
    """``ceil(ratio * n)`` robust to float noise (0.7 * 10 is 7, not 8), at least 1."""
    return max(1, math.ceil(ratio * n - 1e-9))


def topk_pool(h: Tensor, a: np.ndarray | Tensor, ratio: float, p: Tensor
              ) -> tuple[Tensor, np.ndarray | Tensor, PoolRecord]:
    """Keep the top ``ceil(ratio n)`` nodes by projection score, gated by tanh(score).

    Ties go to the lower node index. ``kept_idx`` is returned in ascending
    node order so the pooled graph keeps the original relative ordering.
    """
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"pooling ratio must lie in (0, 1], got {ratio}")
    n = h.shape[0]
    k = pooled_size(n, ratio)
    pnorm = dn.power(dn.sum_(dn.mul(p, p)), 0.5)
    y = dn.mul(dn.matmul(h, p), dn.power(pnorm, -1.0))
    order = np.lexsort((np.arange(n), -y.data[:, 0]))
    kept = np.sort(order[:k])
    gate = dn.tanh(dn.row_gather(y, kept))
    h_new = dn.mul(dn.row_gather(h, kept), gate)
    if isinstance(a, Tensor):
        a_new = dn.transpose(dn.row_gather(dn.transpose(dn.row_gather(a, kept)), kept))
    else:
        a_new = np.asarray(a)[np.ix_(kept, kept)]
    return h_new, a_new, PoolRecord(kept, gate, a, h, n)


def unpool(h: Tensor, rec: PoolRecord) -> tuple[Tensor, np.ndarray | Tensor]:
    if h.shape[0] != len(rec.kept_idx):
        raise ConfigError(f"unpool got {h.shape[0]} rows for {len(rec.kept_idx)} kept nodes")
    return dn.row_scatter(h, rec.kept_idx, rec.n_prev), rec.A_prev
