"""Mix-hop graph propagation applied per time segment.

Each hop mixes a β-weighted retention of the original node states with
neighbour aggregation through the segment's adjacency matrix; hop outputs
are projected and summed.  Row normalization of the adjacency (on by
default) keeps the aggregation an average rather than a sum.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError
from .graph_learner import EvolvingGraphSequence
from .nn import ParamStore
from .tensor import Tensor


class MixHop:
    """Propagation of depth Ψ with retain ratio β and per-hop projections."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 psi: int, beta: float):
        if psi < 0:
            raise ConfigurationError(f"propagation depth must be ≥ 0, got {psi}")
        if not 0.0 <= beta <= 1.0:
            raise ConfigurationError(f"retain ratio must be in [0,1], got {beta}")
        self.psi = psi
        self.beta = beta
        self.hop_proj = [
            store.new(f"{name}.w{k}", (c_in, c_out), fan_in=c_in)
            for k in range(psi + 1)
        ]
        # zero-init the propagated hops (residual-branch style): the layer
        # starts as a per-node map, so early random mixing can't pressure the
        # optimizer into railing the ReLU-capped edge scores to zero before
        # the graph has had a chance to become informative
        for proj in self.hop_proj[1:]:
            proj.data *= 0.0

    def propagate(self, xi: Tensor, adj: Tensor, normalize: bool = True) -> Tensor:
        """xi: (B, T, N, C_in), adj: (B, N, N) nonnegative → (B, T, N, C_out)."""
        if np.any(adj.data < 0):
            raise ContractError("adjacency has negative entries")
        if normalize:
            adj = T.row_normalize(adj)
        # (B, 1, N, N) @ (B, T, N, C) broadcasts over time
        adj_b = T.reshape(adj, (adj.shape[0], 1) + adj.shape[1:])
        h = xi
        out = T.matmul(h, self.hop_proj[0])
        for k in range(1, self.psi + 1):
            h = T.add(T.mul(xi, self.beta), T.mul(T.matmul(adj_b, h), 1.0 - self.beta))
            out = T.add(out, T.matmul(h, self.hop_proj[k]))
        return out

    def apply_per_segment(self, xi: Tensor, graphs: EvolvingGraphSequence,
                          normalize: bool = True, time_offset: int = 0) -> Tensor:
        """Propagate each time segment with its own adjacency matrix.

        ``time_offset`` maps local feature index j to the absolute index
        j + time_offset used by the graphs' segment boundaries (nonzero when
        the graphs were learned on a longer, earlier-starting sequence).
        """
        t = xi.shape[1]
        lo, hi = time_offset, time_offset + t
        if graphs.spec.boundaries[0][0] > lo or graphs.spec.length < hi:
            raise ContractError(
                f"graphs cover [{graphs.spec.boundaries[0][0]}, "
                f"{graphs.spec.length}) but features span [{lo}, {hi})"
            )
        parts = []
        for adj, (start, stop) in zip(graphs.matrices, graphs.spec.boundaries):
            s = max(start, lo) - time_offset
            e = min(stop, hi) - time_offset
            if e <= s:
                continue
            parts.append(self.propagate(T.narrow(xi, 1, s, e - s), adj, normalize))
        if not parts:
            raise ContractError("no segment overlapped the feature range")
        out = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
        if out.shape[1] != t:
            raise ContractError(
                f"segments covered {out.shape[1]} of {t} time steps"
            )
        return out
