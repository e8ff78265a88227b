"""Shared-attention trunk with per-expert projections, norms and feed-forward blocks.

Every expert keeps its own residual stream over the positions it owns. At each layer
the query owner's K/V matrices project the normalized states of its own stream and of
all earlier streams; with insulation on, the earlier streams are read through
``detach`` so no gradient reaches the experts that produced them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..autograd import (
    Tensor,
    add,
    add_bias,
    concat,
    detach,
    gelu,
    layer_norm,
    masked_fill,
    matmul,
    mul,
    reshape,
    scale,
    slice_rows,
    softmax_lastdim,
    transpose,
)
from ..builders.layout_builder import AttentionMask, LayoutError, SpanLayout
from ..config import TrunkConfig
from ..constants import EXPERT_ORDER, SPAN_OWNER
from .params import ParamStore, layer_key

Insulation = bool | np.ndarray


@dataclass
class TrunkStates:
    """Per-layer residual streams and final-normed outputs, keyed by expert."""

    layout: SpanLayout
    layers: list[dict[str, Tensor]]
    final: dict[str, Tensor]


def _insulated(x: Tensor, insulate: Insulation) -> Tensor:
    if isinstance(insulate, bool | np.bool_):
        return detach(x) if insulate else x
    per_sample = np.asarray(insulate, dtype=x.dtype)
    if per_sample.shape != (x.shape[0],):
        raise LayoutError(
            f"per-sample insulation needs shape ({x.shape[0]},), got {per_sample.shape}"
        )
    m = np.broadcast_to(per_sample.reshape(-1, *([1] * (x.ndim - 1))), x.shape)
    return add(mul(detach(x), m), mul(x, 1.0 - m))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    batch, n, width = x.shape
    dh = width // heads
    x = transpose(reshape(x, (batch, n, heads, dh)), (0, 2, 1, 3))
    return reshape(x, (batch * heads, n, dh))


def _merge_heads(x: Tensor, batch: int, heads: int) -> Tensor:
    _, n, dh = x.shape
    x = transpose(reshape(x, (batch, heads, n, dh)), (0, 2, 1, 3))
    return reshape(x, (batch, n, heads * dh))


def masked_attention(q: Tensor, k: Tensor, v: Tensor, allowed: np.ndarray, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention; ``allowed`` is ``B x n_q x n_k``."""
    batch, _, width = q.shape
    dh = width // heads
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = scale(matmul(qh, transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(dh))
    scores = masked_fill(scores, np.repeat(allowed, heads, axis=0))
    return _merge_heads(matmul(softmax_lastdim(scores), vh), batch, heads)


def _experts_until(layout: SpanLayout, stop_after: str | None) -> tuple[str, ...]:
    if stop_after is None:
        return layout.experts
    if stop_after not in EXPERT_ORDER:
        raise LayoutError(f"unknown expert {stop_after!r}")
    limit = EXPERT_ORDER.index(stop_after)
    return tuple(e for e in layout.experts if EXPERT_ORDER.index(e) <= limit)


def trunk_forward(
    tokens: Tensor,
    layout: SpanLayout,
    mask: AttentionMask,
    params: ParamStore,
    config: TrunkConfig,
    insulate: Insulation | None = None,
    key_padding: np.ndarray | None = None,
    stop_after: str | None = None,
) -> TrunkStates:
    """Run the trunk over ``B x n x d`` tokens.

    ``tokens`` covers the positions of every expert up to ``stop_after`` (all experts when
    ``None``). ``key_padding`` (``B x n``, True = visible) is combined with the layout mask.
    ``insulate`` defaults to ``config.insulate``; a length-``B`` array selects it per sample.
    """
    if mask.layout != layout or mask.allowed.shape != (layout.total, layout.total):
        raise LayoutError(
            f"mask of size {mask.allowed.shape} does not belong to layout of total {layout.total}"
        )
    experts = _experts_until(layout, stop_after)
    ranges = {e: layout.expert_range(e) for e in experts}
    end = ranges[experts[-1]][1]
    if tokens.ndim != 3 or tokens.shape[1] != end or tokens.shape[2] != config.width:
        raise LayoutError(f"tokens {tokens.shape} do not match (B, {end}, {config.width})")
    batch = tokens.shape[0]
    insulate = config.insulate if insulate is None else insulate

    if key_padding is None:
        visible = np.ones((batch, end), dtype=bool)
    else:
        visible = np.asarray(key_padding, dtype=bool)
        if visible.shape[0] != batch or visible.shape[1] < end:
            raise LayoutError(f"key padding {visible.shape} does not cover (B={batch}, {end})")
        visible = visible[:, :end]

    h = {e: slice_rows(tokens, *ranges[e]) for e in experts}
    layers: list[dict[str, Tensor]] = []
    for layer in range(config.depth):

        def p(expert: str, name: str, layer: int = layer) -> Tensor:
            return params[layer_key(expert, layer, name)]

        normed = {e: layer_norm(h[e], p(e, "ln1_g"), p(e, "ln1_b")) for e in experts}
        updated: dict[str, Tensor] = {}
        for qi, e in enumerate(experts):
            start, stop = ranges[e]
            sources = [
                normed[src] if src == e else _insulated(normed[src], insulate)
                for src in experts[: qi + 1]
            ]
            context = sources[0] if len(sources) == 1 else concat(sources, axis=1)
            allowed = mask.allowed[start:stop, :stop][None, :, :] & visible[:, None, :stop]
            attn = masked_attention(
                matmul(normed[e], p(e, "wq")),
                matmul(context, p(e, "wk")),
                matmul(context, p(e, "wv")),
                allowed,
                config.heads,
            )
            x = add(h[e], matmul(attn, p(e, "wo")))
            normed_x = layer_norm(x, p(e, "ln2_g"), p(e, "ln2_b"))
            hidden = gelu(add_bias(matmul(normed_x, p(e, "w1")), p(e, "b1")))
            updated[e] = add(x, add_bias(matmul(hidden, p(e, "w2")), p(e, "b2")))
        h = updated
        layers.append(dict(h))

    final = {e: layer_norm(h[e], params[f"{e}.ln_f_g"], params[f"{e}.ln_f_b"]) for e in experts}
    return TrunkStates(layout=layout, layers=layers, final=final)


def read_hidden(states: TrunkStates, layout: SpanLayout, span: str) -> Tensor:
    """Final-layer hidden states at ``span``'s positions (``B x len x d``)."""
    owner = SPAN_OWNER[span]
    if owner not in states.final:
        raise LayoutError(f"expert {owner!r} was not computed in this forward pass")
    rows = layout.span_in_expert(span)
    return slice_rows(states.final[owner], rows.start, rows.stop)
