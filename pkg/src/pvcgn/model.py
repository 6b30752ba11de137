"""PVCGN forward computation.

Tensors inside the model keep the station axis first: a cell input is
``[N, C]`` for one sample or ``[N, B, C]`` for a batch, and every step
function below works with either. Parameters live in a flat ``dict`` of named
arrays (or tape nodes while training); the name prefixes mirror the module
structure, e.g. ``encoder.0.gc.rx.theta_p`` is the physical-graph kernel of
the reset gate's input-side convolution in the first encoder layer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, ConfigError, ShapeError
from .graphs import KIND_CODES, GraphTriple

GATES = "rzn"
CHECKPOINT_MAGIC = b"PVC1"


@dataclass(frozen=True)
class ModelConfig:
    n_stations: int
    channels: int = 2
    d: int = 256
    layers: int = 2
    horizon: int = 4
    graphs: str = "psc"  # subset of physical/similarity/correlation codes
    use_global: bool = True
    global_recurrence: str = "fused"  # or "own"

    def __post_init__(self) -> None:
        if self.d < 1 or self.n_stations < 1 or self.channels < 1 or self.layers < 1 or self.horizon < 1:
            raise ConfigError(f"model dimensions must be positive: {self}")
        if not self.graphs or any(c not in KIND_CODES for c in self.graphs) or len(set(self.graphs)) != len(self.graphs):
            raise ConfigError(f"graphs must be a non-empty subset of 'psc', got {self.graphs!r}")
        if self.global_recurrence not in ("fused", "own"):
            raise ConfigError("global_recurrence must be 'fused' or 'own'")

    @property
    def kinds(self) -> tuple[str, ...]:
        # fixed p, s, c order regardless of how the subset was spelled
        return tuple(c for c in "psc" if c in self.graphs)


Params = dict  # name -> np.ndarray (or autodiff.Node while training)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    d, N = cfg.d, cfg.n_stations
    for part in ("encoder", "decoder"):
        for layer in range(cfg.layers):
            p = f"{part}.{layer}"
            d_in = cfg.channels if layer == 0 else d
            for gate in GATES:
                for side, width in (("x", d_in), ("h", d)):
                    for kind in ("l",) + cfg.kinds:
                        shapes[f"{p}.gc.{gate}{side}.theta_{kind}"] = (width, d)
            for gate in GATES:
                shapes[f"{p}.gc.b_{gate}"] = (d,)
            if cfg.use_global:
                shapes[f"{p}.fc.embed_x"] = (N * d_in, d)
                shapes[f"{p}.fc.embed_h"] = (N * d, d)
                for gate in GATES:
                    shapes[f"{p}.fc.w_{gate}x"] = (d, d)
                    shapes[f"{p}.fc.w_{gate}h"] = (d, d)
                for gate in GATES:
                    shapes[f"{p}.fc.b_{gate}"] = (d,)
                shapes[f"{p}.fuse.kernel"] = (2 * d, d)
                shapes[f"{p}.fuse.bias"] = (d,)
    shapes["head.kernel"] = (d, cfg.channels)
    shapes["head.bias"] = (cfg.channels,)
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> Params:
    """Xavier-uniform kernels, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def count_params(params: Params) -> int:
    return int(sum(np.size(ad.value(v)) for v in params.values()))


@dataclass(frozen=True)
class GraphOperators:
    """Sparse weight matrices (and transposes) for the enabled graph kinds."""

    kinds: tuple[str, ...]
    matrices: tuple
    transposes: tuple

    @classmethod
    def from_triple(cls, graphs: GraphTriple, kinds: Sequence[str] = ("p", "s", "c")) -> "GraphOperators":
        chosen = [graphs.by_code(k) for k in kinds]
        return cls(tuple(kinds), tuple(g.matrix for g in chosen), tuple(g.matrix_t for g in chosen))

    @property
    def n(self) -> int:
        return self.matrices[0].shape[0]


def _operators(graphs, kinds) -> GraphOperators:
    if isinstance(graphs, GraphOperators):
        if graphs.kinds != tuple(kinds):
            raise ConfigError(f"operators built for {graphs.kinds}, model uses {tuple(kinds)}")
        return graphs
    return GraphOperators.from_triple(graphs, kinds)


def _check_stations(x, ops: GraphOperators) -> None:
    n = ad.value(x).shape[0]
    if n != ops.n:
        raise ShapeError(f"input has {n} stations, graphs have {ops.n}")


def graph_conv(x, graphs, thetas: Mapping[str, object]):
    """Multi-graph convolution: self-loop kernel plus one kernel per graph.

    ``thetas`` maps ``"l"`` (self-loop) and any of ``"p"``, ``"s"``, ``"c"``
    to ``[d_in, d_out]`` kernels; only graphs with a kernel take part.
    """
    kinds = tuple(k for k in "psc" if k in thetas)
    ops = _operators(graphs, kinds)
    _check_stations(x, ops)
    kernels = [thetas["l"]] + [thetas[k] for k in kinds]
    shapes = {ad.value(k).shape for k in kernels}
    if len(shapes) != 1:
        raise ShapeError(f"graph-conv kernels differ in shape: {sorted(shapes)}")
    if ad.value(x).shape[-1] != next(iter(shapes))[0]:
        raise ShapeError("input width does not match the kernel input width")
    agg = ad.graph_aggregate(x, ops.matrices, ops.transposes)
    return ad.matmul(agg, ad.concat(kernels, axis=0))


@dataclass
class CellWeights:
    """One CGRM's parameters stacked for fused evaluation."""

    kx: object  # [(1+K) * d_in, 3d]; row blocks follow graph_aggregate's order
    kh: object  # [(1+K) * d, 3d]
    b_gc: object  # [3d]
    ex: object = None  # [N * d_in, d]
    eh: object = None  # [N * d, d]
    wx: object = None  # [d, 3d]
    wh: object = None  # [d, 3d]
    b_fc: object = None  # [3d]
    fuse_local: object = None  # [d, d]
    fuse_global: object = None  # [d, d]
    fuse_b: object = None  # [d]


def cell_weights(params: Params, prefix: str, cfg: ModelConfig) -> CellWeights:
    kinds = ("l",) + cfg.kinds

    def kernel(side):
        blocks = [
            ad.concat([params[f"{prefix}.gc.{g}{side}.theta_{k}"] for g in GATES], axis=1) for k in kinds
        ]
        return ad.concat(blocks, axis=0)

    w = CellWeights(
        kx=kernel("x"),
        kh=kernel("h"),
        b_gc=ad.concat([params[f"{prefix}.gc.b_{g}"] for g in GATES], axis=0),
    )
    if cfg.use_global:
        w.ex = params[f"{prefix}.fc.embed_x"]
        w.eh = params[f"{prefix}.fc.embed_h"]
        w.wx = ad.concat([params[f"{prefix}.fc.w_{g}x"] for g in GATES], axis=1)
        w.wh = ad.concat([params[f"{prefix}.fc.w_{g}h"] for g in GATES], axis=1)
        w.b_fc = ad.concat([params[f"{prefix}.fc.b_{g}"] for g in GATES], axis=0)
        fuse = params[f"{prefix}.fuse.kernel"]
        d = cfg.d
        w.fuse_local = ad.rows(fuse, 0, d)
        w.fuse_global = ad.rows(fuse, d, 2 * d)
        w.fuse_b = params[f"{prefix}.fuse.bias"]
    return w


def gc_gru_step(x, h_prev, graphs, w: CellWeights, kinds: Sequence[str] = ("p", "s", "c")):
    """Graph-convolutional GRU update of the per-station state."""
    ops = _operators(graphs, kinds)
    _check_stations(x, ops)
    ax = ad.graph_aggregate(x, ops.matrices, ops.transposes)
    ah = ad.graph_aggregate(h_prev, ops.matrices, ops.transposes)
    return ad.gru_cell(ad.matmul(ax, w.kx), ad.matmul(ah, w.kh), w.b_gc, h_prev)


def flatten_stations(x):
    """``[N, ..., C]`` -> ``[..., N*C]`` (station-major)."""
    xv = ad.value(x)
    moved = ad.moveaxis(x, 0, -2)
    return ad.reshape(moved, xv.shape[1:-1] + (xv.shape[0] * xv.shape[-1],))


def fc_gru_step(x, h_prev_fused, g_prev, w: CellWeights, recurrence: str = "fused"):
    """Fully-connected GRU over the flattened network state.

    With ``recurrence="fused"`` the GRU's recurrent input is the embedding of
    the previous fused per-station state; ``"own"`` feeds back ``g_prev``.
    """
    xs = ad.value(x).shape
    if ad.value(w.ex).shape[0] != xs[0] * xs[-1]:
        raise ShapeError("input embedding does not match N * input width")
    i_e = ad.matmul(flatten_stations(x), w.ex)
    if recurrence == "fused":
        state = ad.matmul(flatten_stations(h_prev_fused), w.eh)
    else:
        state = g_prev
    return ad.gru_cell(ad.matmul(i_e, w.wx), ad.matmul(state, w.wh), w.b_fc, state)


def cgrm_step(x, h_prev, g_prev, graphs, w: CellWeights, cfg: ModelConfig):
    """One collaborative step -> (fused per-station state, global state)."""
    h_local = gc_gru_step(x, h_prev, graphs, w, cfg.kinds)
    if not cfg.use_global:
        return h_local, g_prev
    h_global = fc_gru_step(x, h_prev, g_prev, w, cfg.global_recurrence)
    # concat(H_i, H_g) @ K == H_i @ K_top + H_g @ K_bottom, broadcast over stations
    fused = ad.add(ad.add(ad.matmul(h_local, w.fuse_local), ad.matmul(h_global, w.fuse_global)), w.fuse_b)
    return fused, h_global


@dataclass
class Prepared:
    encoder: list[CellWeights]
    decoder: list[CellWeights]
    head_kernel: object
    head_bias: object
    ops: GraphOperators


def prepare(params: Params, graphs, cfg: ModelConfig) -> Prepared:
    missing = set(param_shapes(cfg)) - set(params)
    if missing:
        raise ConfigError(f"parameters missing for this config: {sorted(missing)[:3]}...")
    return Prepared(
        encoder=[cell_weights(params, f"encoder.{l}", cfg) for l in range(cfg.layers)],
        decoder=[cell_weights(params, f"decoder.{l}", cfg) for l in range(cfg.layers)],
        head_kernel=params["head.kernel"],
        head_bias=params["head.bias"],
        ops=_operators(graphs, cfg.kinds),
    )


State = list  # per layer: (fused [N, ..., d], global [..., d])


def zero_state(cfg: ModelConfig, batch_shape: tuple[int, ...] = ()) -> State:
    return [
        (np.zeros((cfg.n_stations,) + batch_shape + (cfg.d,)), np.zeros(batch_shape + (cfg.d,)))
        for _ in range(cfg.layers)
    ]


def _stack_step(cells, state, x, prep, cfg):
    new_state = []
    inp = x
    for w, (h, g) in zip(cells, state):
        h, g = cgrm_step(inp, h, g, prep.ops, w, cfg)
        new_state.append((h, g))
        inp = h
    return new_state


def encode(inputs, prep: Prepared, cfg: ModelConfig) -> State:
    """Run the encoder over ``inputs`` ``[n, N, ..., C]`` from zero state."""
    n = len(ad.value(inputs)) if not isinstance(inputs, (list, tuple)) else len(inputs)
    if n < 1:
        raise ConfigError("need at least one input step")
    first = ad.value(inputs[0])
    if first.shape[0] != cfg.n_stations or first.shape[-1] != cfg.channels:
        raise ShapeError(f"input step shape {first.shape} incompatible with N={cfg.n_stations}, C={cfg.channels}")
    state = zero_state(cfg, first.shape[1:-1])
    for t in range(n):
        state = _stack_step(prep.encoder, state, inputs[t], prep, cfg)
    return state


def decode(state: State, prep: Prepared, cfg: ModelConfig, m: int | None = None, teacher=None, teacher_steps=()):
    """Autoregressive decoder -> list of ``m`` predictions ``[N, ..., C]``.

    The first step consumes zeros. Step ``i >= 1`` consumes the previous
    prediction, or ``teacher[i - 1]`` when ``i`` is in ``teacher_steps``
    (scheduled sampling; off unless requested).
    """
    m = cfg.horizon if m is None else m
    if m < 1:
        raise ConfigError("horizon must be >= 1")
    batch_shape = ad.value(state[0][0]).shape[1:-1]
    inp = np.zeros((cfg.n_stations,) + batch_shape + (cfg.channels,))
    preds = []
    for i in range(m):
        if i > 0:
            inp = teacher[i - 1] if (teacher is not None and i in teacher_steps) else preds[-1]
        state = _stack_step(prep.decoder, state, inp, prep, cfg)
        top = state[-1][0]
        preds.append(ad.add(ad.matmul(top, prep.head_kernel), prep.head_bias))
    return preds


def forward(inputs, graphs, params: Params, cfg: ModelConfig, m: int | None = None, prep: Prepared | None = None):
    """Sequence-to-sequence forecast.

    ``inputs`` is ``[n, N, C]`` (one window) or ``[B, n, N, C]`` (a batch);
    the result is ``[m, N, C]`` or ``[B, m, N, C]`` respectively, in the same
    (normalized) space as the inputs.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim not in (3, 4):
        raise ShapeError(f"inputs must be [n, N, C] or [B, n, N, C], got {x.shape}")
    prep = prepare(params, graphs, cfg) if prep is None else prep
    batched = x.ndim == 4
    if batched:
        x = np.moveaxis(x, 0, 2)  # [n, N, B, C]
    preds = decode(encode(x, prep, cfg), prep, cfg, m)
    out = ad.stack(preds, axis=0)  # [m, N, (B,) C]
    if batched:
        out = ad.moveaxis(out, 2, 0)
    return out


def save_checkpoint(
    path: str | Path,
    params: Params,
    cfg: ModelConfig,
    graph_hash: str,
    meta: dict | None = None,
    precision: str = "f64",
) -> None:
    """Write a ``PVC1`` container: JSON header then named little-endian tensors."""
    if precision not in ("f64", "f32"):
        raise ConfigError("precision must be f64 or f32")
    dtype = "<f8" if precision == "f64" else "<f4"
    header = json.dumps(
        {"config": asdict(cfg), "graph_hash": graph_hash, "precision": precision, "meta": meta or {}},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            arr = np.asarray(ad.value(arr))
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


@dataclass
class Checkpoint:
    params: Params
    config: ModelConfig
    graph_hash: str
    precision: str
    meta: dict


def load_checkpoint(path: str | Path, graphs: GraphTriple | None = None) -> Checkpoint:
    """Read a checkpoint; refuses to load against graphs with a different hash."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a PVC1 checkpoint")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    offset = 8 + hlen
    dtype = "<f8" if header["precision"] == "f64" else "<f4"
    itemsize = np.dtype(dtype).itemsize
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset : offset + nlen].decode("utf-8")
        offset += nlen
        (rank,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", raw, offset)
        offset += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(raw, dtype=dtype, count=size, offset=offset).reshape(shape).astype(np.float64)
        offset += size * itemsize
    if graphs is not None and graphs.hash != header["graph_hash"]:
        raise CheckpointError("checkpoint was trained on different graphs (hash mismatch)")
    return Checkpoint(params, ModelConfig(**header["config"]), header["graph_hash"], header["precision"], header["meta"])
