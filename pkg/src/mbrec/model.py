"""Parameters and forward pass of the cascading multi-behavior graph model.

Forward order: per-behavior cascading propagation with residual accumulation,
gated feedback of the target-behavior embedding into auxiliary behaviors,
global-graph propagation, and gated injection of transformed global context
into auxiliary behaviors. Every tensor is computed for all users and items so
that the same state serves scoring, losses, evaluation and the backward pass.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .graph import BehaviorGraph, propagate_items, propagate_users

SIDES = ("user", "item")
CASCADE_MODES = ("accumulated", "base")


class ModelError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    dim: int
    behaviors: List[str]
    layers: List[int]
    global_layers: int = 1
    cascading_input_mode: str = "accumulated"
    enable_cgf: bool = True
    enable_gce: bool = True
    enable_cpa: bool = True
    share_gce_gate: bool = False
    norm_epsilon: float = 1e-12
    leaky_slope: float = 0.01

    def __post_init__(self):
        self.behaviors = list(self.behaviors)
        self.layers = [int(x) for x in self.layers]
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        if len(self.layers) != len(self.behaviors):
            raise ValueError(f"{len(self.layers)} layer counts for {len(self.behaviors)} behaviors")
        if any(x < 1 for x in self.layers) or self.global_layers < 1:
            raise ValueError("every layer count must be >= 1")
        if self.cascading_input_mode not in CASCADE_MODES:
            raise ValueError(f"cascading_input_mode must be one of {CASCADE_MODES}")

    @property
    def num_behaviors(self) -> int:
        return len(self.behaviors)


def progressive_layers(num_behaviors: int) -> List[int]:
    """Layer count grows with position in the chain: 1, 2, ..., K."""
    return list(range(1, num_behaviors + 1))


# --------------------------------------------------------------------------
# parameters


def gate_names(prefix: str, k: int, side: str) -> Tuple[str, str, str, str]:
    base = f"{prefix}.{k}.{side}"
    return f"{base}.W1", f"{base}.b1", f"{base}.W2", f"{base}.b2"


def transform_names(k: int, side: str) -> Tuple[str, str]:
    return f"gce_t.{k}.{side}.W3", f"gce_t.{k}.{side}.b3"


class ModelParams:
    """Ordered collection of named parameter tensors.

    ``P``/``Q`` are the user/item embedding tables. Each auxiliary behavior
    ``k`` and side has a feedback gate ``cgf.k.side.{W1,b1,W2,b2}``, a global
    transform ``gce_t.k.side.{W3,b3}`` and a global-context gate
    ``gce_gate.k.side.{W1,b1,W2,b2}``. Weight matrices act on column vectors,
    so a batch of row embeddings ``X`` maps to ``X @ W.T + b``.
    """

    def __init__(self, tensors: "OrderedDict[str, np.ndarray]", num_users: int,
                 num_items: int, dim: int, behaviors: Sequence[str]):
        self.tensors = tensors
        self.num_users = num_users
        self.num_items = num_items
        self.dim = dim
        self.behaviors = list(behaviors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = value

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self):
        return self.tensors["P"].dtype

    def copy(self) -> "ModelParams":
        return ModelParams(OrderedDict((k, v.copy()) for k, v in self.tensors.items()),
                           self.num_users, self.num_items, self.dim, self.behaviors)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(OrderedDict((k, v.astype(dtype)) for k, v in self.tensors.items()),
                           self.num_users, self.num_items, self.dim, self.behaviors)

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())

    def weight_matrix_names(self) -> List[str]:
        return [n for n in self.tensors if n != "P" and n != "Q" and n.rsplit(".", 1)[1].startswith("W")]


def _glorot(rng, d, dtype):
    bound = np.sqrt(6.0 / (d + d))
    return rng.uniform(-bound, bound, size=(d, d)).astype(dtype)


def init_params(config: ModelConfig, num_users: int, num_items: int, seed: int,
                dtype=np.float32) -> ModelParams:
    """Embeddings ~ N(0, (0.1/sqrt(d))^2); weights Glorot-uniform; biases zero."""
    d = config.dim
    rng = np.random.default_rng(seed)
    scale = 0.1 / np.sqrt(d)
    t: "OrderedDict[str, np.ndarray]" = OrderedDict()
    t["P"] = (rng.standard_normal((num_users, d)) * scale).astype(dtype)
    t["Q"] = (rng.standard_normal((num_items, d)) * scale).astype(dtype)
    for k in range(config.num_behaviors - 1):
        for side in SIDES:
            for prefix in ("cgf", "gce_gate"):
                w1, b1, w2, b2 = gate_names(prefix, k, side)
                t[w1] = _glorot(rng, d, dtype)
                t[b1] = np.zeros(d, dtype=dtype)
                t[w2] = _glorot(rng, d, dtype)
                t[b2] = np.zeros(d, dtype=dtype)
            w3, b3 = transform_names(k, side)
            t[w3] = _glorot(rng, d, dtype)
            t[b3] = np.zeros(d, dtype=dtype)
    return ModelParams(t, num_users, num_items, d, config.behaviors)


# --------------------------------------------------------------------------
# building blocks


def l2_normalize_rows(x: np.ndarray, eps: float):
    """Return ``(x / max(||x||, eps), max(||x||, eps))`` row-wise."""
    n = np.maximum(np.sqrt(np.einsum("ij,ij->i", x, x)), eps)[:, None]
    return x / n, n


def l2_normalize_backward(y, n, dy, eps):
    """Pull ``dy`` back through :func:`l2_normalize_rows`; the eps guard is a constant."""
    dx = dy / n
    active = n[:, 0] > eps
    if active.any():
        proj = np.einsum("ij,ij->i", y, dy)[:, None] * y / n
        dx[active] -= proj[active]
    return dx


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def leaky_relu(x, slope):
    return np.where(x > 0, x, slope * x)


@dataclass
class GateCache:
    x: np.ndarray
    z1: np.ndarray
    h: np.ndarray
    g: np.ndarray


def gate_forward(x, W1, b1, W2, b2, slope) -> GateCache:
    z1 = x @ W1.T + b1
    h = leaky_relu(z1, slope)
    g = sigmoid(h @ W2.T + b2)
    return GateCache(x, z1, h, g)


# --------------------------------------------------------------------------
# forward pass


@dataclass
class CascadeStep:
    """One behavior of the cascade; tuples are indexed (user, item)."""

    inputs: Tuple[np.ndarray, np.ndarray]
    prop_out: Tuple[np.ndarray, np.ndarray]
    prop_norm: Tuple[np.ndarray, np.ndarray]
    output: Tuple[np.ndarray, np.ndarray]


@dataclass
class ForwardState:
    config: ModelConfig
    params_id: int
    cascade: List[CascadeStep]
    global_emb: Tuple[np.ndarray, np.ndarray]
    cgf_gates: Dict[Tuple[int, int], GateCache] = field(default_factory=dict)
    gce_gates: Dict[Tuple[int, int], GateCache] = field(default_factory=dict)
    refined: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)
    global_hat: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)
    final: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    graphs: List[BehaviorGraph] = field(default_factory=list)
    global_graph: Optional[BehaviorGraph] = None

    def users(self, k: int) -> np.ndarray:
        return self.final[k][0]

    def items(self, k: int) -> np.ndarray:
        return self.final[k][1]


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise ModelError(f"non-finite values in {what}")


def cascade_forward(params: ModelParams, graphs: Sequence[BehaviorGraph],
                    config: ModelConfig) -> List[CascadeStep]:
    """Cascading propagation with residual accumulation over the behavior chain."""
    if len(graphs) != config.num_behaviors:
        raise ModelError(f"{len(graphs)} graphs for {config.num_behaviors} behaviors")
    eps = config.norm_epsilon
    base = (params["P"], params["Q"])
    prev = base
    steps = []
    for k, (g, n_layers) in enumerate(zip(graphs, config.layers)):
        g = g.astype(params.dtype)
        inputs = prev if (k > 0 and config.cascading_input_mode == "accumulated") else base
        u, i = inputs
        for layer in range(1, n_layers + 1):
            u, i = propagate_users(g, i), propagate_items(g, u)
            _check_finite(u, f"behavior {config.behaviors[k]!r} layer {layer} (users)")
            _check_finite(i, f"behavior {config.behaviors[k]!r} layer {layer} (items)")
        nu, su = l2_normalize_rows(u, eps)
        ni, si = l2_normalize_rows(i, eps)
        out = (prev[0] + nu, prev[1] + ni)
        steps.append(CascadeStep(inputs, (u, i), (su, si), out))
        prev = out
    return steps


def cgf_apply(params: ModelParams, cascade: List[CascadeStep], config: ModelConfig,
              state: Optional[ForwardState] = None):
    """Gated feedback of the target embedding into each auxiliary behavior.

    Returns the list of per-behavior ``(users, items)`` embeddings; the target
    behavior passes through unchanged.
    """
    K = config.num_behaviors
    target = cascade[-1].output
    out = []
    for k in range(K - 1):
        pair = []
        for s, side in enumerate(SIDES):
            x = cascade[k].output[s]
            need_gate = config.enable_cgf or (config.enable_gce and config.share_gce_gate)
            if need_gate:
                w1, b1, w2, b2 = (params[n] for n in gate_names("cgf", k, side))
                cache = gate_forward(x, w1, b1, w2, b2, config.leaky_slope)
                if state is not None:
                    state.cgf_gates[(k, s)] = cache
            pair.append(x + cache.g * target[s] if config.enable_cgf else x)
        out.append(tuple(pair))
    out.append(target)
    return out


def global_forward(params: ModelParams, global_graph: BehaviorGraph,
                   config: ModelConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Last layer of ``global_layers`` propagation steps over the union graph."""
    g = global_graph.astype(params.dtype)
    u, i = params["P"], params["Q"]
    for layer in range(1, config.global_layers + 1):
        u, i = propagate_users(g, i), propagate_items(g, u)
        _check_finite(u, f"global layer {layer} (users)")
        _check_finite(i, f"global layer {layer} (items)")
    return u, i


def gce_apply(params: ModelParams, refined, global_emb, config: ModelConfig,
              state: Optional[ForwardState] = None):
    """Gated injection of linearly transformed global embeddings into auxiliaries."""
    if not config.enable_gce:
        return list(refined)
    K = config.num_behaviors
    out = []
    for k in range(K - 1):
        pair = []
        for s, side in enumerate(SIDES):
            x = refined[k][s]
            w3, b3 = (params[n] for n in transform_names(k, side))
            ghat = global_emb[s] @ w3.T + b3
            if config.share_gce_gate:
                if state is None or (k, s) not in state.cgf_gates:
                    raise ModelError("shared global gate requires the feedback gate cache")
                gate = state.cgf_gates[(k, s)].g
            else:
                w1, b1, w2, b2 = (params[n] for n in gate_names("gce_gate", k, side))
                cache = gate_forward(x, w1, b1, w2, b2, config.leaky_slope)
                gate = cache.g
                if state is not None:
                    state.gce_gates[(k, s)] = cache
            if state is not None:
                state.global_hat[(k, s)] = ghat
            pair.append(x + gate * ghat)
        out.append(tuple(pair))
    out.append(refined[-1])
    return out


def full_forward(params: ModelParams, graphs: Sequence[BehaviorGraph],
                 global_graph: BehaviorGraph, config: ModelConfig) -> ForwardState:
    cascade = cascade_forward(params, graphs, config)
    state = ForwardState(config, id(params), cascade, (None, None))
    state.graphs = [g.astype(params.dtype) for g in graphs]
    state.global_graph = global_graph.astype(params.dtype)
    refined = cgf_apply(params, cascade, config, state)
    for k in range(config.num_behaviors - 1):
        for s in range(2):
            state.refined[(k, s)] = refined[k][s]
    state.global_emb = global_forward(params, global_graph, config)
    state.final = gce_apply(params, refined, state.global_emb, config, state)
    return state


def score(final, k: int, u: int, i: int) -> float:
    """Inner-product relevance of user ``u`` and item ``i`` under behavior ``k``."""
    users, items = final[k] if not isinstance(final, ForwardState) else final.final[k]
    return float(users[u] @ items[i])


# --------------------------------------------------------------------------
# checkpoint format: little-endian, magic "BGEL", version, M, N, d, K, names, tensors

MAGIC = b"BGEL"
FORMAT_VERSION = 1


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode_tensors(tensors: "OrderedDict[str, np.ndarray]") -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelError("truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def decode_tensors(reader: _Reader) -> "OrderedDict[str, np.ndarray]":
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(reader.u32()):
        name = reader.string()
        ndim = reader.u32()
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape)
        out[name] = arr.astype(np.float32)
    return out


def tensors_from_bytes(data: bytes) -> "OrderedDict[str, np.ndarray]":
    return decode_tensors(_Reader(data))


def params_to_bytes(params: ModelParams) -> bytes:
    head = MAGIC + struct.pack("<5I", FORMAT_VERSION, params.num_users, params.num_items,
                               params.dim, len(params.behaviors))
    names = b"".join(_pack_str(b) for b in params.behaviors)
    return head + names + encode_tensors(params.tensors)


def params_from_bytes(data: bytes) -> ModelParams:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise ModelError("not a checkpoint (bad magic)")
    version, M, N, d, K = struct.unpack("<5I", r.take(20))
    if version != FORMAT_VERSION:
        raise ModelError(f"unsupported checkpoint version {version}")
    behaviors = [r.string() for _ in range(K)]
    tensors = decode_tensors(r)
    if tensors["P"].shape != (M, d) or tensors["Q"].shape != (N, d):
        raise ModelError("embedding shapes disagree with checkpoint header")
    return ModelParams(tensors, M, N, d, behaviors)


def save_checkpoint(path, params: ModelParams) -> None:
    """Write parameters as float32; float64 parameters are rounded."""
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())
