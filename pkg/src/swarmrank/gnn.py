"""Importance-pooling graph convolutions with hand-written backpropagation.

One layer maps a node representation ``h`` and its sampled neighborhood
``{(h_i, a_i)}`` (weights sum to one) to::

    n   = sum_i a_i * relu(h_i @ Q + q)
    out = relu([h | n] @ W + w)
    out = out / ||out||

A final affine map ``G, g`` (no relu) followed by L2 normalization yields the
embedding. All arithmetic is float64.
"""
from __future__ import annotations

import hashlib
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .exceptions import ArtifactMismatchError, NumericalError
from .featurize import NodeFeatures
from .kgraph import HeteroGraph, NodeId, WalkConfig, walk_neighborhoods

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class LayerParams:
    Q: np.ndarray
    q: np.ndarray
    W: np.ndarray
    w: np.ndarray

    @property
    def d_in(self) -> int:
        return self.Q.shape[0]

    @property
    def d_out(self) -> int:
        return self.W.shape[1]

    def __post_init__(self):
        d_in, d_msg = self.Q.shape
        if self.q.shape != (d_msg,) or self.W.shape[0] != d_in + d_msg or self.w.shape != (self.W.shape[1],):
            raise ValueError("inconsistent layer parameter shapes")


@dataclass
class GnnModel:
    layers: list[LayerParams]
    G: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        dim = self.input_dim
        for layer in self.layers:
            if layer.d_in != dim:
                raise ValueError(f"layer expects input dim {layer.d_in}, chain provides {dim}")
            dim = layer.d_out
        if self.G.shape[0] != dim or self.g.shape != (self.G.shape[1],):
            raise ValueError("projection shape does not match the last layer")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].d_in if self.layers else self.G.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.G.shape[1]

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            out += [(f"Q{i}", layer.Q), (f"q{i}", layer.q), (f"W{i}", layer.W), (f"w{i}", layer.w)]
        return out + [("G", self.G), ("g", self.g)]

    def copy(self) -> "GnnModel":
        return GnnModel(
            [LayerParams(l.Q.copy(), l.q.copy(), l.W.copy(), l.w.copy()) for l in self.layers],
            self.G.copy(),
            self.g.copy(),
        )

    def apply_update(self, grads: Mapping[str, np.ndarray], lr: float) -> None:
        for name, p in self.named_params():
            p -= lr * grads[name]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for _, p in self.named_params():
            h.update(np.ascontiguousarray(p, dtype="<f4").tobytes())
        return h.hexdigest()[:16]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_model(input_dim: int, n_layers: int = 2, msg_dim: int = 128, hidden_dim: int = 128,
               embed_dim: int = 64, seed: int = 0) -> GnnModel:
    rng = np.random.default_rng(seed)
    layers, d = [], input_dim
    for _ in range(n_layers):
        layers.append(LayerParams(
            Q=_glorot(rng, d, msg_dim), q=np.zeros(msg_dim),
            W=_glorot(rng, d + msg_dim, hidden_dim), w=np.zeros(hidden_dim),
        ))
        d = hidden_dim
    return GnnModel(layers, _glorot(rng, d, embed_dim), np.zeros(embed_dim))


def _relu(x):
    return np.maximum(x, 0.0)


def _unit(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, norm, out=np.zeros_like(x), where=norm > 0), norm


def _unit_backward(y: np.ndarray, norm: np.ndarray, dy: np.ndarray) -> np.ndarray:
    dx = dy - y * np.sum(y * dy, axis=-1, keepdims=True)
    return np.divide(dx, norm, out=np.zeros_like(dx), where=norm > 0)


def convolve(layer: LayerParams, self_vec: np.ndarray, neighbors: Sequence[tuple[np.ndarray, float]],
             strict: bool = True) -> np.ndarray:
    """Single-node importance-pooling convolution."""
    self_vec = np.asarray(self_vec, dtype=float)
    if self_vec.shape != (layer.d_in,):
        raise ValueError(f"self vector has shape {self_vec.shape}, layer expects ({layer.d_in},)")
    n = np.zeros(layer.Q.shape[1])
    if neighbors:
        weights = np.array([w for _, w in neighbors], dtype=float)
        if strict and (np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9):
            raise ValueError("neighbor weights must be non-negative and sum to 1")
        for vec, a in neighbors:
            vec = np.asarray(vec, dtype=float)
            if vec.shape != (layer.d_in,):
                raise ValueError("neighbor vector dimension mismatch")
            n += a * _relu(vec @ layer.Q + layer.q)
    out = _relu(np.concatenate([self_vec, n]) @ layer.W + layer.w)
    return _unit(out)[0]


# --------------------------------------------------------------------------
# batched forward / backward on a computation subgraph


@dataclass
class NeighborTable:
    """Sampled neighborhoods for every node of a computation space (CSR)."""

    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray

    @classmethod
    def empty(cls, n: int) -> "NeighborTable":
        return cls(np.zeros(n + 1, dtype=np.int64), np.empty(0, dtype=np.int64), np.empty(0))

    @property
    def n(self) -> int:
        return len(self.indptr) - 1

    def neighbors_of(self, rows: np.ndarray) -> np.ndarray:
        if rows.size == 0:
            return rows
        lo, hi = self.indptr[rows], self.indptr[rows + 1]
        return self.indices[np.concatenate([np.arange(a, b) for a, b in zip(lo, hi)])] if np.any(hi > lo) else np.empty(0, dtype=np.int64)

    def submatrix(self, rows: np.ndarray, cols: np.ndarray) -> sp.csr_matrix:
        """Weights from ``rows`` to ``cols`` (both sorted index arrays); every neighbor must be in ``cols``."""
        lo, hi = self.indptr[rows], self.indptr[rows + 1]
        counts = hi - lo
        take = np.concatenate([np.arange(a, b) for a, b in zip(lo, hi)]) if counts.sum() else np.empty(0, dtype=np.int64)
        col_pos = np.searchsorted(cols, self.indices[take])
        indptr = np.concatenate([[0], np.cumsum(counts)])
        return sp.csr_matrix((self.weights[take], col_pos, indptr), shape=(rows.size, cols.size))


def sample_table(indptr: np.ndarray, indices: np.ndarray, n_space: int, seeds: np.ndarray, hops: int,
                 config: WalkConfig, rng: np.random.Generator, table: NeighborTable | None = None) -> NeighborTable:
    """Sample neighborhoods for ``seeds`` and, hop by hop, for newly reached nodes.

    Rows already present in ``table`` are reused and not resampled.
    """
    rows_idx: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    have = np.zeros(n_space, dtype=bool)
    if table is not None:
        have[: table.n] = np.diff(table.indptr) > 0
    frontier = np.unique(seeds)
    done = np.zeros(n_space, dtype=bool)
    for _ in range(hops):
        todo = frontier[~done[frontier]]
        done[todo] = True
        fresh = todo[~have[todo]] if table is not None else todo
        nxt = []
        if fresh.size:
            nb = walk_neighborhoods(indptr, indices, fresh, config, rng)
            for r, src in enumerate(fresh):
                idx, w = nb.row(r)
                rows_idx[int(src)] = (idx, w)
                nxt.append(idx)
        reused = np.setdiff1d(todo, fresh, assume_unique=True)
        if reused.size:
            nxt.append(table.neighbors_of(reused))
        frontier = np.unique(np.concatenate(nxt)) if nxt else np.empty(0, dtype=np.int64)
    counts = np.zeros(n_space, dtype=np.int64)
    if table is not None:
        counts[: table.n] = np.diff(table.indptr)
    for src, (idx, _) in rows_idx.items():
        counts[src] = idx.size
    indptr_out = np.concatenate([[0], np.cumsum(counts)])
    ind = np.empty(indptr_out[-1], dtype=np.int64)
    wts = np.empty(indptr_out[-1])
    if table is not None:
        for src in range(table.n):
            a, b = table.indptr[src], table.indptr[src + 1]
            if b > a and src not in rows_idx:
                ind[indptr_out[src]:indptr_out[src + 1]] = table.indices[a:b]
                wts[indptr_out[src]:indptr_out[src + 1]] = table.weights[a:b]
    for src, (idx, w) in rows_idx.items():
        ind[indptr_out[src]:indptr_out[src + 1]] = idx
        wts[indptr_out[src]:indptr_out[src + 1]] = w
    return NeighborTable(indptr_out, ind, wts)


@dataclass
class _Cache:
    sets: list[np.ndarray]
    hs: list[np.ndarray]
    norms: list[np.ndarray]
    layer_caches: list[tuple]
    out: np.ndarray
    out_norm: np.ndarray


def _forward(model: GnnModel, X: np.ndarray, table: NeighborTable, targets: np.ndarray) -> tuple[np.ndarray, _Cache]:
    L = model.n_layers
    sets = [np.empty(0, dtype=np.int64)] * (L + 1)
    sets[L] = np.unique(targets)
    for k in range(L, 0, -1):
        sets[k - 1] = np.union1d(sets[k], table.neighbors_of(sets[k]))
    h = X[sets[0]]
    hs, norms, layer_caches = [h], [], []
    for k, layer in enumerate(model.layers, start=1):
        A = table.submatrix(sets[k], sets[k - 1])
        self_pos = np.searchsorted(sets[k - 1], sets[k])
        P = h @ layer.Q + layer.q
        M = _relu(P)
        N = A @ M
        C = np.hstack([h[self_pos], N])
        U = C @ layer.W + layer.w
        h, norm = _unit(_relu(U))
        hs.append(h)
        norms.append(norm)
        layer_caches.append((A, self_pos, P, C, U))
    out = h @ model.G + model.g
    emb, out_norm = _unit(out)
    return emb, _Cache(sets, hs, norms, layer_caches, out, out_norm)


def _backward(model: GnnModel, cache: _Cache, emb: np.ndarray, d_emb: np.ndarray) -> dict[str, np.ndarray]:
    grads: dict[str, np.ndarray] = {}
    d_out = _unit_backward(emb, cache.out_norm, d_emb)
    hL = cache.hs[-1]
    grads["G"] = hL.T @ d_out
    grads["g"] = d_out.sum(axis=0)
    dh = d_out @ model.G.T
    for k in range(model.n_layers, 0, -1):
        layer = model.layers[k - 1]
        A, self_pos, P, C, U = cache.layer_caches[k - 1]
        h_prev = cache.hs[k - 1]
        dZ = _unit_backward(cache.hs[k], cache.norms[k - 1], dh)
        dU = dZ * (U > 0)
        grads[f"W{k - 1}"] = C.T @ dU
        grads[f"w{k - 1}"] = dU.sum(axis=0)
        dC = dU @ layer.W.T
        d_in = layer.d_in
        dM = A.T @ dC[:, d_in:]
        dP = dM * (P > 0)
        grads[f"Q{k - 1}"] = h_prev.T @ dP
        grads[f"q{k - 1}"] = dP.sum(axis=0)
        dh = dP @ layer.Q.T
        dh[self_pos] += dC[:, :d_in]
    return grads


def embed_rows(model: GnnModel, X: np.ndarray, table: NeighborTable, targets: np.ndarray) -> np.ndarray:
    """Embeddings for ``targets`` (computation-space indices), in the order given."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        return np.zeros((0, model.embed_dim))
    emb, cache = _forward(model, X, table, targets)
    return emb[np.searchsorted(cache.sets[-1], targets)]


def forward_backward(model: GnnModel, X: np.ndarray, table: NeighborTable, triplets: np.ndarray,
                     margin: float) -> tuple[float, dict[str, np.ndarray]]:
    """Mean hinge loss over ``(query, positive, negative)`` index rows and its exact gradient."""
    triplets = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    if triplets.shape[0] == 0:
        raise ValueError("empty triplet batch")
    emb, cache = _forward(model, X, table, triplets.ravel())
    pos = np.searchsorted(cache.sets[-1], triplets)
    zq, zp, zn = emb[pos[:, 0]], emb[pos[:, 1]], emb[pos[:, 2]]
    slack = np.sum(zq * zn, axis=1) - np.sum(zq * zp, axis=1) + margin
    active = (slack > 0).astype(float)[:, None]
    B = triplets.shape[0]
    loss = float(np.sum(np.maximum(slack, 0.0)) / B)
    d_emb = np.zeros_like(emb)
    np.add.at(d_emb, pos[:, 0], active * (zn - zp) / B)
    np.add.at(d_emb, pos[:, 1], -active * zq / B)
    np.add.at(d_emb, pos[:, 2], active * zq / B)
    return loss, _backward(model, cache, emb, d_emb)


def triplet_loss(z_q: np.ndarray, z_pos: np.ndarray, z_neg: np.ndarray, margin: float) -> float:
    return max(0.0, float(np.dot(z_q, z_neg) - np.dot(z_q, z_pos) + margin))


# --------------------------------------------------------------------------
# node-level API


def aligned_features(features: NodeFeatures, nodes: Sequence[NodeId]) -> tuple[np.ndarray, np.ndarray]:
    """Feature rows in ``nodes`` order plus a mask of nodes that have features."""
    X = np.zeros((len(nodes), features.dim))
    have = np.zeros(len(nodes), dtype=bool)
    for i, node in enumerate(nodes):
        j = features.index.get(node)
        if j is not None:
            X[i] = features.matrix[j]
            have[i] = True
    return X, have


def embed_nodes(model: GnnModel, graph: HeteroGraph, features: NodeFeatures, nodes: Sequence[NodeId],
                walk_config: WalkConfig, rng: np.random.Generator) -> dict[NodeId, np.ndarray]:
    """Embed ``nodes``; neighborhoods are sampled once per call and shared by all layers."""
    missing = [n for n in nodes if n not in graph.index]
    if missing:
        raise KeyError(f"node {missing[0]} is not in the graph")
    targets = np.array([graph.index[n] for n in nodes], dtype=np.int64)
    table = sample_table(graph.indptr, graph.indices, len(graph), targets, model.n_layers, walk_config, rng) \
        if model.n_layers else NeighborTable.empty(len(graph))
    needed = targets
    for _ in range(model.n_layers):
        needed = np.union1d(needed, table.neighbors_of(needed))
    X, have = aligned_features(features, graph.nodes)
    lacking = needed[~have[needed]]
    if lacking.size:
        raise KeyError(f"no feature vector for node {graph.nodes[lacking[0]]}")
    emb = embed_rows(model, X, table, targets)
    return {n: emb[i] for i, n in enumerate(nodes)}


# --------------------------------------------------------------------------
# gradient check


@dataclass(frozen=True)
class CheckDims:
    input_dim: int = 6
    msg_dim: int = 5
    hidden_dim: int = 4
    embed_dim: int = 3
    n_layers: int = 2
    n_nodes: int = 8
    n_triplets: int = 5

    def __post_init__(self):
        if max(self.input_dim, self.msg_dim, self.hidden_dim, self.embed_dim) > 8:
            raise ValueError("gradient check dimensions must be <= 8")


def _random_fixture(dims: CheckDims, rng: np.random.Generator):
    model = init_model(dims.input_dim, dims.n_layers, dims.msg_dim, dims.hidden_dim, dims.embed_dim,
                       seed=int(rng.integers(2**31)))
    for _, p in model.named_params():
        if p.ndim == 1:
            p[:] = rng.uniform(-0.5, 0.5, size=p.shape)
    n = dims.n_nodes
    X = rng.uniform(0.1, 1.0, size=(n, dims.input_dim)) * rng.choice([-1.0, 1.0], size=(n, dims.input_dim))
    indptr, indices, weights = [0], [], []
    for i in range(n):
        others = np.setdiff1d(np.arange(n), [i])
        k = int(rng.integers(0, min(4, n - 1) + 1))
        nb = np.sort(rng.choice(others, size=k, replace=False))
        w = rng.uniform(0.2, 1.0, size=k)
        indices.extend(nb.tolist())
        weights.extend((w / w.sum()).tolist() if k else [])
        indptr.append(len(indices))
    table = NeighborTable(np.array(indptr), np.array(indices, dtype=np.int64), np.array(weights))
    triplets = np.array([rng.choice(n, size=3, replace=False) for _ in range(dims.n_triplets)])
    return model, X, table, triplets


def _min_kink_distance(model, X, table, triplets, margin) -> float:
    emb, cache = _forward(model, X, table, triplets.ravel())
    gaps = [np.inf]
    for (_, _, P, _, U) in cache.layer_caches:
        gaps += [np.min(np.abs(P)), np.min(np.abs(U))]
    pos = np.searchsorted(cache.sets[-1], triplets)
    slack = np.sum(emb[pos[:, 0]] * (emb[pos[:, 2]] - emb[pos[:, 1]]), axis=1) + margin
    gaps.append(np.min(np.abs(slack)))
    return float(min(gaps))


def numeric_gradients(model: GnnModel, X, table, triplets, margin: float, step: float = 1e-5) -> dict[str, np.ndarray]:
    out = {}
    for name, p in model.named_params():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = forward_backward(model, X, table, triplets, margin)[0]
            flat[i] = orig - step
            down = forward_backward(model, X, table, triplets, margin)[0]
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        out[name] = g
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def gradient_check(model_dims: CheckDims = CheckDims(), seed: int = 0, margin: float = 0.5,
                   step: float = 1e-5, max_attempts: int = 20) -> float:
    """Max relative error between analytic and central-difference gradients over all tensors.

    Fixtures whose pre-activations or hinge slacks sit within ``1e-3`` of a
    kink are redrawn.
    """
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        fixture = _random_fixture(model_dims, rng)
        if _min_kink_distance(*fixture, margin) > 1e-3:
            break
    else:
        raise NumericalError("could not draw a gradient-check fixture away from relu kinks")
    model, X, table, triplets = fixture
    _, analytic = forward_backward(model, X, table, triplets, margin)
    numeric = numeric_gradients(model, X, table, triplets, margin, step)
    return max(relative_error(analytic[name], numeric[name]) for name, _ in model.named_params())


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: GnnModel, path: str | Path, header: Mapping[str, object]) -> None:
    """Text header (``key=value`` lines ending in ``END``) then little-endian float32 blocks."""
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "input_dim": model.input_dim,
        "n_layers": model.n_layers,
        "msg_dims": ",".join(str(l.Q.shape[1]) for l in model.layers),
        "hidden_dims": ",".join(str(l.d_out) for l in model.layers),
        "embed_dim": model.embed_dim,
        **{k: v for k, v in header.items()},
    }
    buf = io.BytesIO()
    for key in meta:
        buf.write(f"{key}={meta[key]}\n".encode("ascii"))
    buf.write(b"END\n")
    for _, p in model.named_params():
        buf.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint_header(path: str | Path) -> dict[str, str]:
    data = Path(path).read_bytes()
    end = data.find(b"END\n")
    if end < 0:
        raise ArtifactMismatchError(f"{path}: not a checkpoint file")
    return dict(line.split("=", 1) for line in data[:end].decode("ascii").splitlines())


def load_checkpoint(path: str | Path, expect: Mapping[str, object] | None = None) -> tuple[GnnModel, dict[str, str]]:
    data = Path(path).read_bytes()
    end = data.find(b"END\n")
    if end < 0:
        raise ArtifactMismatchError(f"{path}: not a checkpoint file")
    header = dict(line.split("=", 1) for line in data[:end].decode("ascii").splitlines())
    if int(header["format_version"]) != CHECKPOINT_VERSION:
        raise ArtifactMismatchError(f"{path}: unsupported checkpoint version {header['format_version']}")
    for key, value in (expect or {}).items():
        if header.get(key) != str(value):
            raise ArtifactMismatchError(
                f"{path}: checkpoint {key} is {header.get(key)!r} but the current run has {str(value)!r}")
    blob = np.frombuffer(data[end + 4:], dtype="<f4").astype(np.float64)
    d_in, L = int(header["input_dim"]), int(header["n_layers"])
    msg = [int(x) for x in header["msg_dims"].split(",")] if L else []
    hid = [int(x) for x in header["hidden_dims"].split(",")] if L else []
    offset = 0

    def take(*shape):
        nonlocal offset
        size = int(np.prod(shape))
        if offset + size > blob.size:
            raise ArtifactMismatchError(f"{path}: truncated parameter blocks")
        arr = blob[offset:offset + size].reshape(shape).copy()
        offset += size
        return arr

    layers, d = [], d_in
    for k in range(L):
        layers.append(LayerParams(take(d, msg[k]), take(msg[k]), take(d + msg[k], hid[k]), take(hid[k])))
        d = hid[k]
    emb = int(header["embed_dim"])
    model = GnnModel(layers, take(d, emb), take(emb))
    if offset != blob.size:
        raise ArtifactMismatchError(f"{path}: trailing bytes after parameter blocks")
    return model, header


def quantize(model: GnnModel) -> GnnModel:
    """Round parameters through float32, exactly as a checkpoint round trip would."""
    out = model.copy()
    for _, p in out.named_params():
        p[...] = p.astype("<f4").astype(np.float64)
    return out
