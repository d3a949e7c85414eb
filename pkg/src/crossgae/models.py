"""U-Net style graph autoencoder with a two-branch (cross-correlation) decoder."""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffnum as dn
from .diffnum import Tensor
from .graphdata import Graph
from .layers import (ConfigError, GcnParams, PoolRecord, glorot, gcn_block, message_adjacency,
                     normalize_adjacency, normalize_soft_adjacency, pooled_size, topk_pool, unpool)

KERNELS = ("cross", "self", "l2_fixed", "l2_learnable")
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    input_dim: int
    hidden_dim: int = 128
    pooling_ratios: list[float] = field(default_factory=lambda: [1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 1.0])
    skip_mode: str = "add"
    kernel: str = "cross"
    l2_temperature: float = 1.0
    l2_self: bool = False  # L2 kernels compare P with P instead of P with Q

    def __post_init__(self):
        self.pooling_ratios = [float(r) for r in self.pooling_ratios]
        if self.depth < 2:
            raise ConfigError("depth must be at least 2")
        if any(not 0.0 < r <= 1.0 for r in self.pooling_ratios):
            raise ConfigError("pooling ratios must lie in (0, 1]")
        if self.pooling_ratios[0] != 1.0 or self.pooling_ratios[-1] != 1.0:
            raise ConfigError("first and last layers must not pool")
        if self.skip_mode not in ("add", "concat"):
            raise ConfigError(f"unknown skip mode {self.skip_mode!r}")
        if self.kernel not in KERNELS:
            raise ConfigError(f"unknown kernel {self.kernel!r}")
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise ConfigError("dimensions must be positive")

    @property
    def depth(self) -> int:
        return len(self.pooling_ratios)

    @property
    def two_branch(self) -> bool:
        if self.kernel == "self":
            return False
        if self.kernel.startswith("l2"):
            return not self.l2_self
        return True

    def node_counts(self, n: int) -> list[int]:
        """Node count after each encoder layer."""
        out = []
        for r in self.pooling_ratios:
            if r < 1.0:
                n = pooled_size(n, r)
            out.append(n)
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


@dataclass
class LatentCode:
    Z: Tensor
    records: list[PoolRecord | None]
    adjacency: np.ndarray | Tensor


class GraphAutoencoder:
    """Encoder with gPool layers plus two independent, mirrored decoder branches."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        d = c.hidden_dim
        self.encoder: list[GcnParams] = []
        self.gates: list[Tensor | None] = []
        for layer, r in enumerate(c.pooling_ratios):
            self.encoder.append(GcnParams.init(rng, c.input_dim if layer == 0 else d, d))
            self.gates.append(glorot(rng, d, 1) if r < 1.0 else None)
        self.decoder_P = self._init_branch(rng)
        self.decoder_Q = self._init_branch(rng)
        self.kernel_w = Tensor([[-c.l2_temperature]], requires_grad=True)
        self.kernel_b = Tensor([[c.l2_temperature]], requires_grad=True)

    def _init_branch(self, rng: np.random.Generator) -> list[GcnParams]:
        c = self.config
        d = c.hidden_dim
        branch = []
        # decoder step k mirrors encoder layer L-1-k; the step after an unpool
        # sees the merged skip, which doubles the width under concat
        prev_unpooled = False
        for layer in reversed(range(c.depth)):
            d_in = 2 * d if (prev_unpooled and c.skip_mode == "concat") else d
            branch.append(GcnParams.init(rng, d_in, d))
            prev_unpooled = c.pooling_ratios[layer] < 1.0
        return branch

    # parameter bookkeeping -------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (prm, gate) in enumerate(zip(self.encoder, self.gates)):
            out += [(f"enc.{i}.W", prm.W), (f"enc.{i}.ln_gain", prm.ln_gain), (f"enc.{i}.ln_bias", prm.ln_bias)]
            if gate is not None:
                out.append((f"enc.{i}.p", gate))
        for tag, branch in (("decP", self.decoder_P), ("decQ", self.decoder_Q)):
            for i, prm in enumerate(branch):
                out += [(f"{tag}.{i}.W", prm.W), (f"{tag}.{i}.ln_gain", prm.ln_gain),
                        (f"{tag}.{i}.ln_bias", prm.ln_bias)]
        out += [("kernel.w", self.kernel_w), ("kernel.b", self.kernel_b)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def encoder_parameters(self) -> list[Tensor]:
        return [t for name, t in self.named_parameters() if name.startswith("enc.")]

    def decoder_parameters(self) -> list[Tensor]:
        return [t for name, t in self.named_parameters() if not name.startswith("enc.")]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) ^ set(state))
            raise ConfigError(f"checkpoint/config mismatch on keys {missing[:5]}")
        for name, t in params.items():
            if t.data.shape != state[name].shape:
                raise ConfigError(f"checkpoint/config mismatch: {name} {state[name].shape} vs {t.data.shape}")
            t.data = np.array(state[name], dtype=np.float64)

    def copy(self) -> GraphAutoencoder:
        other = GraphAutoencoder(self.config)
        other.load_state_dict(self.state_dict())
        return other


# forward passes ----------------------------------------------------------------

def _normalize(a: np.ndarray | Tensor, directed: bool) -> np.ndarray | Tensor:
    if isinstance(a, Tensor):
        if directed:
            a = dn.scale(dn.add(a, dn.transpose(a)), 0.5)
        return normalize_soft_adjacency(a)
    return normalize_adjacency(message_adjacency(a, directed))


def encode_arrays(model: GraphAutoencoder, x: Tensor | np.ndarray, a: np.ndarray | Tensor,
                  directed: bool = False) -> LatentCode:
    """Encoder on raw arrays; ``a`` may be a soft (Tensor) adjacency."""
    c = model.config
    h = dn.constant(x)
    if h.shape[1] != c.input_dim:
        raise ConfigError(f"graph has feature dim {h.shape[1]}, model expects {c.input_dim}")
    records: list[PoolRecord | None] = []
    for layer, (prm, gate, r) in enumerate(zip(model.encoder, model.gates, c.pooling_ratios)):
        rec = None
        if r < 1.0:
            h, a, rec = topk_pool(h, a, r, gate)
        records.append(rec)
        h = gcn_block(h, _normalize(a, directed), prm, "add" if prm.d_in == prm.d_out else "none")
    return LatentCode(h, records, a)


def encode(model: GraphAutoencoder, g: Graph) -> LatentCode:
    return encode_arrays(model, g.features, g.adjacency, g.directed)


def decode_branch(branch: list[GcnParams], code: LatentCode, skip_mode: str = "add",
                  directed: bool = False) -> Tensor:
    if len(branch) != len(code.records):
        raise ConfigError(f"decoder has {len(branch)} layers, code has {len(code.records)}")
    h = code.Z
    a = code.adjacency
    for step, prm in enumerate(branch):
        rec = code.records[len(branch) - 1 - step]
        h = gcn_block(h, _normalize(a, directed), prm, "add" if prm.d_in == prm.d_out else "none")
        if rec is not None:
            h, a = unpool(h, rec)
            h = dn.add(h, rec.h_prev) if skip_mode == "add" else dn.concat_cols(h, rec.h_prev)
    return h


def branch_embeddings(model: GraphAutoencoder, code: LatentCode, directed: bool = False
                      ) -> tuple[Tensor, Tensor]:
    c = model.config
    p = decode_branch(model.decoder_P, code, c.skip_mode, directed)
    q = decode_branch(model.decoder_Q, code, c.skip_mode, directed) if c.two_branch else p
    return p, q


def kernel_logits(model: GraphAutoencoder, p: Tensor, q: Tensor) -> Tensor:
    c = model.config
    if c.kernel in ("cross", "self"):
        return dn.matmul(p, dn.transpose(q))
    dist = dn.pairwise_sq_dist(p, q)
    if c.kernel == "l2_fixed":
        return dn.scale(dn.sub(Tensor(np.ones(dist.shape)), dist), c.l2_temperature)
    return dn.add(dn.mul(dist, model.kernel_w), model.kernel_b)


def reconstruct_code(model: GraphAutoencoder, code: LatentCode, directed: bool = False) -> Tensor:
    p, q = branch_embeddings(model, code, directed)
    return kernel_logits(model, p, q)


def reconstruct(model: GraphAutoencoder, g: Graph) -> Tensor:
    """Pre-sigmoid edge scores (``n x n``)."""
    return reconstruct_code(model, encode(model, g), g.directed)


def predict_edges(logits: Tensor | np.ndarray, th: float = 0.5) -> np.ndarray:
    """Indicator of ``sigmoid(logit) >= th``, evaluated in logit space."""
    if not 0.0 < th < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    cut = math.log(th / (1.0 - th))
    return (z >= cut).astype(np.int8)


def constraint_satisfaction(logits: Tensor | np.ndarray, a: np.ndarray, th: float = 0.5) -> tuple[int, float]:
    pred = predict_edges(logits, th)
    a = np.asarray(a)
    if pred.shape != a.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {a.shape}")
    ok = int((pred == a).sum())
    return ok, ok / a.size


# checkpoints -------------------------------------------------------------------

def save_checkpoint(model: GraphAutoencoder, path: str | Path, extra: dict | None = None) -> None:
    meta = {"version": CHECKPOINT_VERSION, "config": model.config.to_dict(), "extra": extra or {}}
    arrays = model.state_dict()
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[GraphAutoencoder, dict]:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {meta.get('version')}")
        state = {k: z[k] for k in z.files if k != "__meta__"}
    model = GraphAutoencoder(ModelConfig.from_dict(meta["config"]))
    model.load_state_dict(state)
    return model, meta.get("extra", {})
