"""Att-GCN forecaster: stacked spatial blocks with depth attention, a shared GRU, and a linear head.

Shapes follow the batch-first convention ``x: (B, T, N, d) -> y: (B, M, N, 1)``.
All trainable weights except the node embeddings are shared across nodes,
so a trained model can be pointed at a different building set by swapping
embeddings.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .graph import AdjacencyMatrix, default_k, refresh_graph

VARIANTS = ("att_gcn", "plain_gcn")


@dataclass
class ModelConfig:
    n_features: int = 6
    channels: int = 16  # GCN_conv_channels
    n_blocks: int = 4  # GCN_hidden_layers
    depth: int = 2  # GCN_depth
    att_dim: int = 32
    gru_dim: int = 16
    gru_layers: int = 2
    horizon: int = 1
    dropout_p: float = 0.3
    emb_dim: int = 32
    k: int | None = None
    variant: str = "att_gcn"
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


def _uniform(rng: np.random.Generator, fan_in: int, shape, name: str) -> nx.Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    return nx.Parameter(rng.uniform(-bound, bound, size=shape), name=name)


def _zeros(shape, name: str) -> nx.Parameter:
    return nx.Parameter(np.zeros(shape), name=name)


# ------------------------------------------------------------ building blocks


def gcn_propagate(H, A_norm, W) -> nx.Tensor:
    """One propagation step ``relu(A_norm @ H @ W)``; ``H`` may carry batch axes."""
    H, A_norm, W = nx.tensor(H), nx.tensor(A_norm), nx.tensor(W)
    if A_norm.shape[-1] != H.shape[-2] or H.shape[-1] != W.shape[0]:
        raise nx.DimensionError(
            f"gcn_propagate shape mismatch: A {A_norm.shape}, H {H.shape}, W {W.shape}")
    return nx.relu(nx.matmul(nx.matmul(A_norm, H), W))


@dataclass
class DepthAttention:
    wq: nx.Parameter
    wk: nx.Parameter
    wv: nx.Parameter
    wo: nx.Parameter
    bo: nx.Parameter

    @classmethod
    def init(cls, rng, channels: int, att_dim: int, prefix: str) -> "DepthAttention":
        return cls(
            _uniform(rng, channels, (channels, att_dim), f"{prefix}.wq"),
            _uniform(rng, channels, (channels, att_dim), f"{prefix}.wk"),
            _uniform(rng, channels, (channels, att_dim), f"{prefix}.wv"),
            _uniform(rng, att_dim, (att_dim, channels), f"{prefix}.wo"),
            _zeros((channels,), f"{prefix}.bo"),
        )

    def parameters(self) -> list[nx.Parameter]:
        return [self.wq, self.wk, self.wv, self.wo, self.bo]


def depth_attention(states, params: DepthAttention, return_weights: bool = False):
    """Scaled dot-product attention across the K propagation states of each node.

    The K attended vectors are averaged and projected back to the channel
    width.
    """
    if len(states) == 0:
        raise nx.ContractError("depth_attention needs at least one state")
    seq = nx.stack(states, axis=-2)  # (..., N, K, C)
    # q.k = s Wq Wk^T s^T and the value path is linear, so both projections
    # are folded into C x C matrices before touching the (..., K, C) states
    qk = nx.matmul(params.wq, nx.transpose(params.wk)) * (1.0 / math.sqrt(params.wk.shape[1]))
    scores = nx.matmul(nx.matmul(seq, qk), nx.transpose(seq, _swap_last(seq.ndim)))  # (..., N, K, K)
    weights = nx.softmax(scores, axis=-1)
    pooled = nx.mean(nx.matmul(weights, seq), axis=-2)  # (..., N, C)
    out = nx.matmul(pooled, nx.matmul(params.wv, params.wo)) + params.bo
    return (out, weights) if return_weights else out


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


@dataclass
class GcnBlock:
    weights: list[nx.Parameter]
    residual: nx.Parameter | None = None  # only when input width differs

    @classmethod
    def init(cls, rng, c_in: int, channels: int, depth: int, prefix: str) -> "GcnBlock":
        ws = [_uniform(rng, c_in if l == 0 else channels, (c_in if l == 0 else channels, channels),
                       f"{prefix}.w{l}") for l in range(depth)]
        res = _uniform(rng, c_in, (c_in, channels), f"{prefix}.res") if c_in != channels else None
        return cls(ws, res)

    def parameters(self) -> list[nx.Parameter]:
        return self.weights + ([self.residual] if self.residual is not None else [])


def spatial_block(X, A_norm, block: GcnBlock, attn: DepthAttention | None,
                  dropout_p: float = 0.0, training: bool = False,
                  rng: np.random.Generator | None = None) -> nx.Tensor:
    """K propagation steps, depth aggregation, residual, dropout.

    Without ``attn`` the last propagation state is used alone.
    """
    X = nx.tensor(X)
    states, h = [], X
    for W in block.weights:
        h = gcn_propagate(h, A_norm, W)
        states.append(h)
    agg = depth_attention(states, attn) if attn is not None else states[-1]
    skip = X if block.residual is None else nx.matmul(X, block.residual)
    return nx.dropout(agg + skip, dropout_p, rng, training)


@dataclass
class GruLayer:
    wz: nx.Parameter
    bz: nx.Parameter
    wr: nx.Parameter
    br: nx.Parameter
    wh: nx.Parameter
    bh: nx.Parameter

    @classmethod
    def init(cls, rng, c_in: int, hidden: int, prefix: str) -> "GruLayer":
        fan = hidden + c_in
        return cls(
            _uniform(rng, fan, (fan, hidden), f"{prefix}.wz"), _zeros((hidden,), f"{prefix}.bz"),
            _uniform(rng, fan, (fan, hidden), f"{prefix}.wr"), _zeros((hidden,), f"{prefix}.br"),
            _uniform(rng, fan, (fan, hidden), f"{prefix}.wh"), _zeros((hidden,), f"{prefix}.bh"),
        )

    @property
    def hidden(self) -> int:
        return self.wz.shape[1]

    def parameters(self) -> list[nx.Parameter]:
        return [self.wz, self.bz, self.wr, self.br, self.wh, self.bh]


def gru_cell(x_t, h_prev, params: GruLayer) -> nx.Tensor:
    """One GRU step over ``[h, x]``; rows of ``x_t``/``h_prev`` are independent sequences."""
    x_t, h_prev = nx.tensor(x_t), nx.tensor(h_prev)
    hx = nx.concat([h_prev, x_t], axis=-1)
    z = nx.sigmoid(nx.matmul(hx, params.wz) + params.bz)
    r = nx.sigmoid(nx.matmul(hx, params.wr) + params.br)
    cand = nx.tanh(nx.matmul(nx.concat([r * h_prev, x_t], axis=-1), params.wh) + params.bh)
    return (1.0 - z) * h_prev + z * cand


def run_gru(seq, layers: list[GruLayer]) -> nx.Tensor:
    """Stacked GRU over ``seq (S, T, C)`` from a zero state; returns the top layer's last state."""
    seq = nx.tensor(seq)
    steps = [seq[:, t, :] for t in range(seq.shape[1])]
    for layer in layers:
        h = nx.Tensor(np.zeros((seq.shape[0], layer.hidden)))
        outs = []
        for x_t in steps:
            h = gru_cell(x_t, h, layer)
            outs.append(h)
        steps = outs
    return steps[-1]


# ---------------------------------------------------------------------- model


class AttGcnModel:
    def __init__(self, cfg: ModelConfig, embeddings: np.ndarray):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.embeddings = nx.Parameter(np.array(embeddings, dtype=float), name="embeddings")
        c = cfg.channels
        self.w_in = _uniform(rng, cfg.n_features, (cfg.n_features, c), "input.w")
        self.b_in = _zeros((c,), "input.b")
        self.blocks = [GcnBlock.init(rng, c, c, cfg.depth, f"block{i}") for i in range(cfg.n_blocks)]
        self.attn = ([DepthAttention.init(rng, c, cfg.att_dim, f"attn{i}") for i in range(cfg.n_blocks)]
                     if cfg.variant == "att_gcn" else [None] * cfg.n_blocks)
        self.gru = [GruLayer.init(rng, c if i == 0 else cfg.gru_dim, cfg.gru_dim, f"gru{i}")
                    for i in range(cfg.gru_layers)]
        self.w_head = _uniform(rng, cfg.gru_dim, (cfg.gru_dim, cfg.horizon), "head.w")
        self.b_head = _zeros((cfg.horizon,), "head.b")
        self.dropout_rng = np.random.default_rng([cfg.seed, 1])

    @property
    def n_nodes(self) -> int:
        return self.embeddings.shape[0]

    @property
    def k(self) -> int:
        return self.cfg.k if self.cfg.k is not None else default_k(self.n_nodes)

    def named_parameters(self) -> dict[str, nx.Parameter]:
        params = [self.embeddings, self.w_in, self.b_in]
        for block, attn in zip(self.blocks, self.attn):
            params += block.parameters()
            if attn is not None:
                params += attn.parameters()
        for layer in self.gru:
            params += layer.parameters()
        params += [self.w_head, self.b_head]
        return {p.name: p for p in params}

    def parameters(self) -> list[nx.Parameter]:
        return list(self.named_parameters().values())

    def adjacency(self) -> AdjacencyMatrix:
        return refresh_graph(self.embeddings, self.k)

    def __call__(self, x, training: bool = False) -> nx.Tensor:
        return self.forward(x, training)

    def forward(self, x, training: bool = False) -> nx.Tensor:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 3
        if single:
            x = x[None]
        if not np.all(np.isfinite(x)):
            raise nx.ContractError("forward() got non-finite input")
        B, T, N, _ = x.shape
        if N != self.n_nodes:
            raise nx.DimensionError(f"input has {N} nodes, model has {self.n_nodes} embeddings")
        a_norm = self.adjacency().norm
        h = nx.matmul(x, self.w_in) + self.b_in  # (B, T, N, C)
        for block, attn in zip(self.blocks, self.attn):
            h = spatial_block(h, a_norm, block, attn, self.cfg.dropout_p, training, self.dropout_rng)
        seq = nx.reshape(nx.transpose(h, (0, 2, 1, 3)), (B * N, T, self.cfg.channels))
        last = run_gru(seq, self.gru)  # (B*N, G)
        out = nx.matmul(last, self.w_head) + self.b_head  # (B*N, M)
        out = nx.transpose(nx.reshape(out, (B, N, self.cfg.horizon)), (0, 2, 1))
        out = nx.reshape(out, (B, self.cfg.horizon, N, 1))
        return out[0] if single else out

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.concatenate([self.forward(x[i:i + batch_size]).data
                               for i in range(0, len(x), batch_size)]) if len(x) else np.zeros((0,))

    def with_embeddings(self, embeddings: np.ndarray) -> "AttGcnModel":
        """A copy sharing every weight value but using new node embeddings."""
        clone = AttGcnModel(self.cfg, embeddings)
        mine = self.named_parameters()
        for name, p in clone.named_parameters().items():
            if name != "embeddings":
                p.data[...] = mine[name].data
        return clone


def copy_state(params: dict[str, nx.Parameter]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def load_state(params: dict[str, nx.Parameter], state: dict[str, np.ndarray]) -> None:
    for k, p in params.items():
        p.data[...] = state[k]


# ---------------------------------------------------------------- checkpoint


def save_checkpoint(path, kind: str, config: dict, params: dict[str, nx.Parameter],
                    extra: dict | None = None) -> Path:
    """Write config and every parameter array to one ``.npz`` file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({"kind": kind, "config": config, "extra": extra or {}}, sort_keys=True)
    arrays = {f"param/{k}": p.data for k, p in params.items()}
    with open(path, "wb") as f:
        np.savez(f, __header__=np.array(header), **arrays)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        arrays = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
    return header, arrays


def save_model(model: AttGcnModel, path, extra: dict | None = None) -> Path:
    return save_checkpoint(path, "att_gcn_model", asdict(model.cfg), model.named_parameters(), extra)


def load_model(path) -> tuple[AttGcnModel, dict]:
    header, arrays = read_checkpoint(path)
    if header["kind"] != "att_gcn_model":
        raise ValueError(f"{path} holds a {header['kind']!r} checkpoint, not a graph model")
    model = AttGcnModel(ModelConfig(**header["config"]), arrays["embeddings"])
    load_state(model.named_parameters(), arrays)
    return model, header["extra"]
