from __future__ import annotations

import numpy as np

from ..autograd import Tensor, add, concat, embedding_lookup, expand, slice_rows
from ..constants import SPAN_ACTION, SPAN_IMG, SPAN_MANO, SPAN_ORDER, SPAN_TRAJ3D, SPAN_TXT
from .layout_builder import LayoutError, SpanLayout


def span_embeddings(
    layout: SpanLayout,
    type_embedding: Tensor,
    pos_embedding: Tensor,
    stop: int | None = None,
) -> Tensor:
    """Type plus position embedding for positions ``0..stop`` of ``layout`` (``stop x d``)."""
    stop = layout.total if stop is None else stop
    if pos_embedding.shape[0] < stop:
        raise LayoutError(
            f"position table has {pos_embedding.shape[0]} rows, layout needs {stop}"
        )
    type_ids = np.empty(layout.total, dtype=np.int64)
    for span, (start, end) in layout.offsets.items():
        type_ids[start:end] = SPAN_ORDER.index(span)
    types = embedding_lookup(type_embedding, type_ids[:stop])
    return add(types, slice_rows(pos_embedding, 0, stop))


def assemble_sequence(
    layout: SpanLayout,
    type_embedding: Tensor,
    pos_embedding: Tensor,
    *,
    img: Tensor,
    txt: Tensor,
    traj3d: Tensor | None = None,
    mano: Tensor | None = None,
    action: Tensor | None = None,
) -> Tensor:
    """Concatenate ``B x n x d`` span blocks in layout order and add span/position embeddings.

    Blocks must be given for a prefix of the layout's spans: a block can be omitted only
    when every later span is omitted too (used when the forward pass stops early).
    """
    blocks = {
        SPAN_IMG: img,
        SPAN_TXT: txt,
        SPAN_TRAJ3D: traj3d,
        SPAN_MANO: mano,
        SPAN_ACTION: action,
    }
    for span, block in blocks.items():
        if block is not None and not layout.has_span(span):
            raise LayoutError(f"block given for span {span!r} which the layout does not include")

    batch, width = img.shape[0], img.shape[-1]
    ordered: list[Tensor] = []
    ended = False
    for span in layout.spans:
        block = blocks[span]
        if block is None:
            ended = True
            continue
        if ended:
            raise LayoutError(f"span {span!r} given after an omitted earlier span")
        expected = (batch, layout.span_length(span), width)
        if block.shape != expected:
            raise LayoutError(
                f"block for span {span!r} has shape {block.shape}, expected {expected}"
            )
        ordered.append(block)

    tokens = concat(ordered, axis=1)
    embeddings = span_embeddings(layout, type_embedding, pos_embedding, stop=tokens.shape[1])
    return add(tokens, expand(embeddings, batch))
