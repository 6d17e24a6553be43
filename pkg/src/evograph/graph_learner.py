"""Evolving graph structure learning.

A static per-node representation (extracted once from the training series)
seeds a GRU whose input is a sequence of segment-mean summaries of the
temporal features.  Each GRU state is turned into a directed adjacency
matrix by a pairwise scorer with a sigmoid mask, so a feature sequence of
M segments yields M graphs that evolve smoothly in time.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ContractError, SequenceTooShortError
from .nn import Conv1d, Linear, Mlp2, ParamStore
from .tensor import Tensor


@dataclass
class SegmentSpec:
    """Partition of [0, T) into M mean-pooled segments of width d.

    Segments 1..M−1 have exactly d steps; the remainder (if any) is folded
    into the last segment, so its length is in [d, 2d).
    """

    d: int
    m: int
    boundaries: list[tuple[int, int]]

    @classmethod
    def for_length(cls, t: int, d: int) -> "SegmentSpec":
        if d < 1:
            raise ContractError(f"segment interval must be ≥ 1, got {d}")
        if t < d:
            warnings.warn(
                f"T={t} shorter than segment interval d={d}; using one segment",
                stacklevel=2,
            )
            return cls(d=d, m=1, boundaries=[(0, t)])
        m = t // d
        boundaries = [(i * d, (i + 1) * d) for i in range(m - 1)]
        boundaries.append(((m - 1) * d, t))
        return cls(d=d, m=m, boundaries=boundaries)

    @property
    def length(self) -> int:
        return self.boundaries[-1][1]


def segment_aggregate(xi: Tensor, d: int) -> tuple[list[Tensor], SegmentSpec]:
    """Mean-pool (B, T, N, C) features over each segment → M × (B, N, C)."""
    spec = SegmentSpec.for_length(xi.shape[1], d)
    gammas = [
        T.reduce_mean(T.narrow(xi, 1, start, stop - start), axis=1)
        for start, stop in spec.boundaries
    ]
    return gammas, spec


class GruCell:
    """Single GRU update over (B, N, ·) node-state tensors."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_hidden: int):
        d = c_in + c_hidden
        self.w_r = store.new(f"{name}.w_r", (d, c_hidden), fan_in=d)
        self.w_u = store.new(f"{name}.w_u", (d, c_hidden), fan_in=d)
        self.w_o = store.new(f"{name}.w_o", (d, c_hidden), fan_in=d)
        self.b_r = store.new(f"{name}.b_r", (c_hidden,), fan_in=d)
        self.b_u = store.new(f"{name}.b_u", (c_hidden,), fan_in=d)
        self.b_o = store.new(f"{name}.b_o", (c_hidden,), fan_in=d)

    def step(self, gamma: Tensor, alpha: Tensor) -> Tensor:
        cat = T.concat([gamma, alpha], axis=gamma.ndim - 1)
        r = T.sigmoid(T.bias_add(T.matmul(cat, self.w_r), self.b_r))
        u = T.sigmoid(T.bias_add(T.matmul(cat, self.w_u), self.b_u))
        cat_o = T.concat([gamma, T.mul(r, alpha)], axis=gamma.ndim - 1)
        o = T.tanh(T.bias_add(T.matmul(cat_o, self.w_o), self.b_o))
        return T.add(T.mul(u, alpha), T.mul(1.0 - u, o))


class StaticFeatureExtractor:
    """Per-node summary of the whole training series → N×C_s representation.

    Two strided causal convolutions, global average pooling over time, and
    one affine projection; parameters are shared across nodes and trained
    end-to-end with the rest of the model.
    """

    KERNEL = 8
    STRIDE = 4

    def __init__(self, store: ParamStore, name: str, c_in: int, c_s: int,
                 c_hidden: int = 16):
        self.conv1 = Conv1d(store, f"{name}.conv1", c_in, c_hidden,
                            self.KERNEL, stride=self.STRIDE)
        self.conv2 = Conv1d(store, f"{name}.conv2", c_hidden, c_hidden,
                            self.KERNEL, stride=self.STRIDE)
        self.proj = Linear(store, f"{name}.proj", c_hidden, c_s)

    @classmethod
    def min_length(cls) -> int:
        # two valid strided convolutions of width KERNEL
        return (cls.KERNEL - 1) * cls.STRIDE + cls.KERNEL

    def __call__(self, series: Tensor) -> Tensor:
        """series: (N, C, T*) → α_s: (N, C_s)."""
        if series.shape[-1] < self.min_length():
            raise SequenceTooShortError(
                f"static extractor needs ≥ {self.min_length()} training steps, "
                f"got {series.shape[-1]}"
            )
        h = T.tanh(self.conv1(series))
        h = T.tanh(self.conv2(h))
        pooled = T.reduce_mean(h, axis=h.ndim - 1)  # (N, C_hidden)
        return self.proj(pooled)


@dataclass
class EvolvingGraphSequence:
    """M adjacency matrices plus their pre-mask scores and mask logits.

    ``matrices[m]`` is (B, N, N), nonnegative, elementwise ≤ ``pre_mask[m]``
    (the sigmoid mask only attenuates).  ``spec`` records which time range
    each matrix governs.
    """

    matrices: list[Tensor]
    pre_mask: list[Tensor]
    mask_logits: list[Tensor]
    spec: SegmentSpec


class Egl:
    """Evolving graph learner: params for one (layer's) graph source.

    The segment interval d is supplied per call, so one parameter set can
    serve several scales.
    """

    def __init__(self, store: ParamStore, name: str, c_in: int, c_e: int,
                 c_s: int, attr_dim: int = 0, with_gru: bool = True):
        self.c_e = c_e
        self.init_proj = Linear(store, f"{name}.init", c_s + attr_dim, c_e)
        self.gru = GruCell(store, f"{name}.gru", c_in, c_e) if with_gru else None
        self.edge_scorer = Mlp2(store, f"{name}.edge", 2 * c_e, c_e, 1,
                                final_relu=True)
        # the final ReLU can permanently kill a score that wanders below
        # zero, so start the scorer almost flat and safely positive: a tiny
        # output coupling keeps embedding drift from railing scores while
        # the embeddings are still forming, and deliberate per-edge pressure
        # can still prune weak connections later (the ReLU's actual job)
        self.edge_scorer.fc2.w.data *= 0.05
        self.edge_scorer.fc2.b.data = np.ones_like(self.edge_scorer.fc2.b.data)
        self.mask_scorer = Mlp2(store, f"{name}.mask", 2 * c_e, c_e, 1)
        # bias the sigmoid mask low: early edge differentiation then happens
        # on the smooth mask path, where a wrong guess is always recoverable
        self.mask_scorer.fc2.b.data -= 2.0

    def init_hidden(self, alpha_s: Tensor, attrs: Tensor | None = None) -> Tensor:
        """α⁰ = tanh(affine(α_s [‖ node attrs])) — the GRU's initial state."""
        x = alpha_s if attrs is None else T.concat([alpha_s, attrs], axis=alpha_s.ndim - 1)
        return T.tanh(self.init_proj(x))

    def derive_adjacency(self, alpha: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Score every ordered node pair from (B, N, C_e) embeddings.

        Returns (A, Â, mask logits), each (B, N, N): Â from a ReLU-capped
        scorer, A = Â ⊙ σ(mask).
        """
        n = alpha.shape[-2]
        idx_i = np.repeat(np.arange(n), n)
        idx_j = np.tile(np.arange(n), n)
        axis = alpha.ndim - 2
        left = T.gather(alpha, idx_i, axis=axis)
        right = T.gather(alpha, idx_j, axis=axis)
        pairs = T.concat([left, right], axis=alpha.ndim - 1)  # (B, N², 2C_e)
        square = alpha.shape[:-2] + (n, n)
        a_hat = T.reshape(self.edge_scorer(pairs), square)
        mask = T.reshape(self.mask_scorer(pairs), square)
        a = T.mul(a_hat, T.sigmoid(mask))
        return a, a_hat, mask

    def evolve(self, xi: Tensor, alpha_s: Tensor, d: int) -> EvolvingGraphSequence:
        """Full pipeline: segment means → GRU over segments → per-step graphs."""
        if self.gru is None:
            raise ContractError("this learner was built without a GRU (static only)")
        gammas, spec = segment_aggregate(xi, d)
        alpha = self.init_hidden(alpha_s)
        if xi.ndim == 4 and alpha.ndim == 2:
            alpha = T.broadcast_leading(alpha, xi.shape[0])
        matrices, pre_mask, logits = [], [], []
        for gamma in gammas:
            alpha = self.gru.step(gamma, alpha)
            a, a_hat, m = self.derive_adjacency(alpha)
            matrices.append(a)
            pre_mask.append(a_hat)
            logits.append(m)
        return EvolvingGraphSequence(matrices, pre_mask, logits, spec)

    def static_sequence(self, alpha_s: Tensor, t: int, batch: int) -> EvolvingGraphSequence:
        """One graph from the initial (static) embeddings covering [0, t)."""
        alpha = self.init_hidden(alpha_s)
        if alpha.ndim == 2:
            alpha = T.broadcast_leading(alpha, batch)
        a, a_hat, m = self.derive_adjacency(alpha)
        spec = SegmentSpec(d=t, m=1, boundaries=[(0, t)])
        return EvolvingGraphSequence([a], [a_hat], [m], spec)


def export_graphs(seq: EvolvingGraphSequence, out_dir, layer: int,
                  time_offset: int = 0, sample: int = 0) -> list[Path]:
    """Write each adjacency as CSV plus an index JSON with time ranges."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = []
    written = []
    for m, (tensor, (start, stop)) in enumerate(
        zip(seq.matrices, seq.spec.boundaries), start=1
    ):
        mat = tensor.data[sample] if tensor.ndim == 3 else tensor.data
        fname = f"layer{layer}_segment{m}.csv"
        with open(out_dir / fname, "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in mat:
                writer.writerow([repr(float(v)) for v in row])
        index.append({
            "layer": layer,
            "segment": m,
            "time_range": [start + time_offset, stop + time_offset],
            "file": fname,
        })
        written.append(out_dir / fname)
    index_path = out_dir / f"layer{layer}_index.json"
    index_path.write_text(json.dumps(index, indent=2))
    written.append(index_path)
    return written
