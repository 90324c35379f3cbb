"""Sparse message-passing kernel.

Per-channel weighted in-arc sums ``agg[v, k, b] = sum_{a: dst(a)=v} w[a, k] * H[src(a), k, b]``
are one sparse-dense product with a ``(d*V) x (d*V)`` CSR matrix whose
non-zeros are the arc weights, one per (channel, arc).  Rows and columns are
channel-major (index ``k*V + node``) and arcs are kept sorted by
``(dst, src)``, so the forward non-zeros are exactly the transposed weight
array and need no gather.  The backward pass uses the transposed CSR for
``dH`` and a sampled dense product for ``dw``, so the ``[A, d, B]`` message
tensor is never materialized.
"""

from __future__ import annotations

import warnings

import torch

warnings.filterwarnings("ignore", message="Sparse CSR tensor support is in beta", category=UserWarning)


def _crow(rows: torch.Tensor, n: int) -> torch.Tensor:
    crow = torch.zeros(n + 1, dtype=torch.long)
    crow[1:] = torch.cumsum(torch.bincount(rows, minlength=n), 0)
    return crow


class ArcOperator:
    """Fixed arc structure for one graph view and hidden width ``d``.

    ``order`` sorts the given arcs by ``(dst, src)``; it is ``None`` when the
    arcs already come in that order, which lets callers skip a gather.
    """

    def __init__(self, src: torch.Tensor, dst: torch.Tensor, num_nodes: int, d: int):
        self.num_arcs = len(src)
        self.num_nodes = num_nodes
        self.n = num_nodes * d
        self.d = d
        order = torch.argsort(dst * num_nodes + src, stable=True)
        identity = bool(torch.equal(order, torch.arange(self.num_arcs)))
        self.order = None if identity else order
        if not identity:
            src, dst = src[order], dst[order]
        k = torch.arange(d)[:, None] * num_nodes
        rows = (k + dst[None, :]).reshape(-1)
        cols = (k + src[None, :]).reshape(-1)
        # channel-major rows with (dst, src)-sorted arcs are already in CSR order
        self.fwd = (_crow(rows, self.n), cols)
        perm = torch.argsort(cols * self.n + rows)
        self.bwd = (perm, _crow(cols, self.n), rows[perm])

    def matrix(self, w_flat: torch.Tensor, transpose: bool = False) -> torch.Tensor:
        if transpose:
            perm, crow, col = self.bwd
            values = w_flat[perm]
        else:
            (crow, col), values = self.fwd, w_flat
        return torch.sparse_csr_tensor(crow, col, values, (self.n, self.n), check_invariants=False)

    def __call__(self, w: torch.Tensor, H: torch.Tensor) -> torch.Tensor:
        """``w``: ``[A, d]`` arc weights in the given arc order; ``H``: ``[V, d, B]`` states."""
        V, d, B = H.shape
        if self.num_arcs == 0:
            return torch.zeros_like(H) + 0 * w.sum()
        if self.order is not None:
            w = w[self.order]
        w_flat = w.T.contiguous().reshape(-1)
        H_flat = H.permute(1, 0, 2).reshape(d * V, B)
        out = _ArcSum.apply(w_flat, H_flat, self)
        return out.reshape(d, V, B).permute(1, 0, 2)


class _ArcSum(torch.autograd.Function):
    @staticmethod
    def forward(ctx, w_flat, H_flat, op: ArcOperator):
        ctx.op = op
        ctx.save_for_backward(w_flat, H_flat)
        return op.matrix(w_flat) @ H_flat

    @staticmethod
    def backward(ctx, grad):
        w_flat, H_flat = ctx.saved_tensors
        op: ArcOperator = ctx.op
        grad = grad.contiguous()
        dw = dH = None
        if ctx.needs_input_grad[1]:
            dH = op.matrix(w_flat, transpose=True) @ grad
        if ctx.needs_input_grad[0]:
            crow, col = op.fwd
            pattern = torch.sparse_csr_tensor(crow, col, torch.zeros_like(w_flat), (op.n, op.n), check_invariants=False)
            dw = torch.sparse.sampled_addmm(pattern, grad, H_flat.T.contiguous()).values()
        return dw, dH, None
