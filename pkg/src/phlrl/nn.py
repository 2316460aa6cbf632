"""Small dense neural-network engine on top of numpy.

Values are float64 arrays.  A :class:`Tape` records every primitive op in
creation order, so a reverse walk over ``tape.nodes`` is a valid
topological order for backpropagation.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    """Operand shapes do not line up."""


class ContractError(ValueError):
    """A call violated an operation precondition."""


class TrainingDivergence(FloatingPointError):
    """Non-finite gradients or losses during optimization."""


class Node:
    __slots__ = ("value", "parents", "index", "name", "needs_grad")

    def __init__(self, value, parents=(), name=None, needs_grad=True):
        self.value = value
        # (parent, vjp) pairs; vjp maps the upstream gradient to the parent's
        self.parents = parents
        self.index = -1
        self.name = name
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.name or self.index}, shape={self.value.shape})"


class Tape:
    """Records nodes in creation order; ``backward`` walks them in reverse."""

    def __init__(self):
        self.nodes: List[Node] = []

    def _push(self, node: Node) -> Node:
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    def leaf(self, value, name=None) -> Node:
        return self._push(Node(np.asarray(value, dtype=np.float64), (), name))

    def const(self, value) -> Node:
        """Input that never receives a gradient."""
        return self._push(Node(np.asarray(value, dtype=np.float64), (), None, needs_grad=False))

    def op(self, value, parents, name=None) -> Node:
        parents = tuple(p for p in parents if p[0].needs_grad)
        return self._push(Node(value, parents, name, needs_grad=bool(parents)))

    def backward(self, loss: Node) -> Dict[int, np.ndarray]:
        """Return gradients of the scalar ``loss`` keyed by node index.

        Accumulators are fresh on every call, so repeated passes over the
        same tape give identical results.
        """
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
        grads: Dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads.get(node.index)
            if g is None or not node.parents:
                continue
            for parent, vjp in node.parents:
                contrib = vjp(g)
                prev = grads.get(parent.index)
                grads[parent.index] = contrib if prev is None else prev + contrib
        return grads


# ---------------------------------------------------------------------------
# primitive ops


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(tape, a, b):
    return tape.op(a.value + b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(tape, a, b):
    return tape.op(a.value - b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: -_unbroadcast(g, b.shape)),
    ])


def mul(tape, a, b):
    return tape.op(a.value * b.value, [
        (a, lambda g: _unbroadcast(g * b.value, a.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.shape)),
    ])


def scale(tape, a, c: float):
    return tape.op(a.value * c, [(a, lambda g: g * c)])


def matmul(tape, x, w):
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"matmul {x.shape} @ {w.shape}")
    return tape.op(x.value @ w.value, [
        (x, lambda g: g @ w.value.T),
        (w, lambda g: x.value.T @ g),
    ])


def tanh(tape, a):
    y = np.tanh(a.value)
    return tape.op(y, [(a, lambda g: g * (1.0 - y * y))])


def exp(tape, a):
    y = np.exp(a.value)
    return tape.op(y, [(a, lambda g: g * y)])


def square(tape, a):
    return tape.op(a.value ** 2, [(a, lambda g: 2.0 * g * a.value)])


def minimum(tape, a, b):
    pick_a = a.value <= b.value
    return tape.op(np.where(pick_a, a.value, b.value), [
        (a, lambda g: _unbroadcast(np.where(pick_a, g, 0.0), a.shape)),
        (b, lambda g: _unbroadcast(np.where(pick_a, 0.0, g), b.shape)),
    ])


def maximum(tape, a, b):
    pick_a = a.value >= b.value
    return tape.op(np.where(pick_a, a.value, b.value), [
        (a, lambda g: _unbroadcast(np.where(pick_a, g, 0.0), a.shape)),
        (b, lambda g: _unbroadcast(np.where(pick_a, 0.0, g), b.shape)),
    ])


def where(tape, cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    return tape.op(np.where(cond, a.value, b.value), [
        (a, lambda g: _unbroadcast(np.where(cond, g, 0.0), a.shape)),
        (b, lambda g: _unbroadcast(np.where(cond, 0.0, g), b.shape)),
    ])


def clip(tape, a, lo: float, hi: float):
    inside = (a.value >= lo) & (a.value <= hi)
    return tape.op(np.clip(a.value, lo, hi), [(a, lambda g: np.where(inside, g, 0.0))])


def total(tape, a):
    return tape.op(np.asarray(a.value.sum()), [(a, lambda g: np.broadcast_to(g, a.shape).copy())])


def mean(tape, a):
    n = a.value.size
    return tape.op(np.asarray(a.value.mean()), [(a, lambda g: np.full(a.shape, g / n))])


def weighted_mean(tape, a, w):
    """sum(a * w) / sum(w) with constant weights ``w`` (no gradient to w)."""
    w = np.asarray(w, dtype=np.float64)
    denom = w.sum()
    if denom <= 0:
        return tape.const(0.0)
    return tape.op(np.asarray((a.value * w).sum() / denom), [(a, lambda g: g * w / denom)])


def reshape(tape, a, shape):
    old = a.shape
    return tape.op(a.value.reshape(shape), [(a, lambda g: g.reshape(old))])


def masked_log_softmax(tape, logits, mask):
    """Row-wise log-softmax with illegal entries at -inf."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ContractError("every row needs at least one legal action")
    z = np.where(mask, logits.value, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - logz
    p = np.exp(out)

    def vjp(g):
        g = np.where(mask, g, 0.0)
        return g - p * g.sum(axis=-1, keepdims=True)

    return tape.op(out, [(logits, vjp)])


def pick(tape, a, idx):
    """Select a[r, idx[r]] for every row."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def vjp(g):
        out = np.zeros(a.shape)
        out[rows, idx] = g
        return out

    return tape.op(a.value[rows, idx], [(a, vjp)])


def masked_entropy(tape, logits, mask):
    """Entropy of the masked categorical for every row, shape (B,)."""
    mask = np.asarray(mask, dtype=bool)
    z = np.where(mask, logits.value, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(logp)
    plogp = np.where(mask, p * np.where(mask, logp, 0.0), 0.0)
    h = -plogp.sum(axis=-1)

    def vjp(g):
        # dH/dz_j = -p_j (log p_j + H)
        lp = np.where(mask, logp, 0.0)
        return -g[:, None] * p * (lp + h[:, None])

    return tape.op(h, [(logits, vjp)])


def hyper_apply(tape, generated, x, groups, n_in: int, n_out: int):
    """Apply per-row generated affine layers.

    ``generated`` holds one flat [W (n_in*n_out) | b (n_out)] vector per
    distinct conditioning row; row r of ``x`` uses generated[groups[r]].
    """
    gen = generated.value
    if gen.shape[1] != n_in * n_out + n_out:
        raise DimensionError(f"generator width {gen.shape[1]} != {n_in}*{n_out}+{n_out}")
    if x.shape[1] != n_in:
        raise DimensionError(f"input width {x.shape[1]} != {n_in}")
    groups = np.asarray(groups, dtype=np.int64)
    weights = gen[:, : n_in * n_out].reshape(-1, n_in, n_out)
    biases = gen[:, n_in * n_out:]
    members = [np.flatnonzero(groups == u) for u in range(gen.shape[0])]
    out = np.empty((x.shape[0], n_out))
    for u, rows in enumerate(members):
        if rows.size:
            out[rows] = x.value[rows] @ weights[u] + biases[u]

    def vjp_gen(g):
        dgen = np.zeros_like(gen)
        for u, rows in enumerate(members):
            if rows.size:
                dgen[u, : n_in * n_out] = (x.value[rows].T @ g[rows]).ravel()
                dgen[u, n_in * n_out:] = g[rows].sum(axis=0)
        return dgen

    def vjp_x(g):
        dx = np.empty(x.shape)
        for u, rows in enumerate(members):
            if rows.size:
                dx[rows] = g[rows] @ weights[u].T
        return dx

    return tape.op(out, [(generated, vjp_gen), (x, vjp_x)])


# ---------------------------------------------------------------------------
# parameters and layers


class ParamStore:
    """Ordered name -> float64 array map shared by layers of one network."""

    def __init__(self):
        self.arrays: Dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> str:
        if name in self.arrays:
            raise ContractError(f"duplicate parameter {name}")
        self.arrays[name] = np.asarray(value, dtype=np.float64)
        return name

    def watch(self, tape: Tape) -> Dict[str, Node]:
        return {k: tape.leaf(v, name=k) for k, v in self.arrays.items()}

    def copy(self) -> "ParamStore":
        out = ParamStore()
        out.arrays = {k: v.copy() for k, v in self.arrays.items()}
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()]) if self.arrays else np.zeros(0)

    def size(self) -> int:
        return sum(v.size for v in self.arrays.values())


ACTIVATIONS = ("tanh", "linear")


@dataclass
class Dense:
    store: ParamStore
    prefix: str
    n_in: int
    n_out: int
    activation: str = "tanh"

    @classmethod
    def create(cls, store, prefix, n_in, n_out, rng, activation="tanh", init_scale=1.0):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        bound = 1.0 / np.sqrt(n_in)
        store.add(prefix + ".w", rng.uniform(-bound, bound, (n_in, n_out)) * init_scale)
        store.add(prefix + ".b", rng.uniform(-bound, bound, (1, n_out)) * init_scale)
        return cls(store, prefix, n_in, n_out, activation)

    def __call__(self, tape, params, x):
        return forward_dense(tape, self, params, x)


def forward_dense(tape: Tape, layer: Dense, params: Dict[str, Node], x: Node) -> Node:
    if x.value.ndim != 2 or x.shape[1] != layer.n_in:
        raise DimensionError(f"{layer.prefix}: expected (*, {layer.n_in}), got {x.shape}")
    y = add(tape, matmul(tape, x, params[layer.prefix + ".w"]), params[layer.prefix + ".b"])
    return tanh(tape, y) if layer.activation == "tanh" else y


@dataclass
class HyperLayer:
    """Dense layer whose weights come from a generator network."""

    hidden: Dense
    head: Dense
    n_in: int
    n_out: int

    @classmethod
    def create(cls, store, prefix, cond_dim, n_in, n_out, rng, gen_hidden=64, head_scale=0.1):
        hidden = Dense.create(store, prefix + ".gen0", cond_dim, gen_hidden, rng, "tanh")
        head = Dense.create(store, prefix + ".gen1", gen_hidden, n_in * n_out + n_out, rng,
                            "linear", init_scale=head_scale)
        return cls(hidden, head, n_in, n_out)

    @property
    def cond_dim(self):
        return self.hidden.n_in

    def generate(self, tape, params, conditioning: Node) -> Node:
        return self.head(tape, params, self.hidden(tape, params, conditioning))

    def __call__(self, tape, params, conditioning, x, groups=None):
        return forward_hyper(tape, self, params, conditioning, x, groups)


def forward_hyper(tape, hyper: HyperLayer, params, conditioning: Node, x: Node, groups=None) -> Node:
    """Generate target-layer weights from ``conditioning`` and apply them to ``x``.

    ``conditioning`` is (U, cond_dim); ``groups`` maps each row of ``x`` to
    a conditioning row and defaults to all-zero (a single shared row).
    """
    c = conditioning
    if c.value.ndim == 1:
        c = reshape(tape, c, (1, -1))
    if c.shape[1] != hyper.cond_dim:
        raise DimensionError(f"conditioning width {c.shape[1]} != {hyper.cond_dim}")
    if groups is None:
        groups = np.zeros(x.shape[0], dtype=np.int64)
    return hyper_apply(tape, hyper.generate(tape, params, c), x, groups, hyper.n_in, hyper.n_out)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class Adam:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    def update(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        """In-place bias-corrected Adam step over every key of ``grads``."""
        for k, g in grads.items():
            if params[k].shape != g.shape:
                raise DimensionError(f"{k}: param {params[k].shape} vs grad {g.shape}")
            if not np.all(np.isfinite(g)):
                raise TrainingDivergence(f"non-finite gradient for {k}")
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        for k, g in grads.items():
            m = self.first_moment.get(k)
            if m is None:
                m = self.first_moment[k] = np.zeros_like(g)
                self.second_moment[k] = np.zeros_like(g)
            v = self.second_moment[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[k] -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.epsilon)

    def state_arrays(self, prefix: str) -> Dict[str, np.ndarray]:
        out = {f"{prefix}/m/{k}": v for k, v in self.first_moment.items()}
        out.update({f"{prefix}/v/{k}": v for k, v in self.second_moment.items()})
        return out

    def load_arrays(self, prefix: str, arrays: Dict[str, np.ndarray]) -> None:
        self.first_moment = {k[len(prefix) + 3:]: v.copy() for k, v in arrays.items()
                             if k.startswith(prefix + "/m/")}
        self.second_moment = {k[len(prefix) + 3:]: v.copy() for k, v in arrays.items()
                              if k.startswith(prefix + "/v/")}


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if np.isfinite(norm) and norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


# ---------------------------------------------------------------------------
# checkpoints


def save_arrays(path, arrays: Dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    """Write named arrays plus a JSON header to an ``.npz`` blob."""
    header = {"version": CHECKPOINT_VERSION, "meta": meta or {}}
    payload = {"__header__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for k, v in arrays.items():
        payload["a:" + k] = np.asarray(v)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_arrays(path):
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {header.get('version')}")
        arrays = {k[2:]: data[k].copy() for k in data.files if k.startswith("a:")}
    return arrays, header["meta"]


def numeric_grad(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of ``f`` with respect to ``arr`` (mutated in place)."""
    out = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        hi = f()
        arr[i] = old - eps
        lo = f()
        arr[i] = old
        out[i] = (hi - lo) / (2 * eps)
    return out
