from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..constants import (
    EXPERT_ORDER,
    SPAN_ACTION,
    SPAN_IMG,
    SPAN_MANO,
    SPAN_ORDER,
    SPAN_OWNER,
    SPAN_TRAJ3D,
    SPAN_TXT,
)


class LayoutError(ValueError):
    """Raised for degenerate layouts or blocks that do not match their span."""

    pass


@dataclass(frozen=True)
class SpanLayout:
    """Positions of the token spans ``img | txt | traj3d | mano | action``.

    The traj3d and mano spans can be left out (ablations); present spans are laid out
    contiguously in the fixed order.
    """

    n_img: int
    n_txt: int
    horizon: int
    include_traj3d: bool = True
    include_mano: bool = True

    def span_length(self, span: str) -> int:
        if span == SPAN_IMG:
            return self.n_img
        if span == SPAN_TXT:
            return self.n_txt
        if span in (SPAN_TRAJ3D, SPAN_MANO, SPAN_ACTION):
            return self.horizon
        raise LayoutError(f"unknown span {span!r}")

    def has_span(self, span: str) -> bool:
        if span == SPAN_TRAJ3D:
            return self.include_traj3d
        if span == SPAN_MANO:
            return self.include_mano
        return span in SPAN_ORDER

    @property
    def spans(self) -> tuple[str, ...]:
        return tuple(s for s in SPAN_ORDER if self.has_span(s))

    @property
    def offsets(self) -> dict[str, tuple[int, int]]:
        out: dict[str, tuple[int, int]] = {}
        cursor = 0
        for span in self.spans:
            length = self.span_length(span)
            out[span] = (cursor, cursor + length)
            cursor += length
        return out

    @property
    def total(self) -> int:
        return sum(self.span_length(s) for s in self.spans)

    def span(self, span: str) -> slice:
        if not self.has_span(span):
            raise LayoutError(f"span {span!r} is not part of this layout")
        start, stop = self.offsets[span]
        return slice(start, stop)

    @property
    def experts(self) -> tuple[str, ...]:
        present = {SPAN_OWNER[s] for s in self.spans}
        return tuple(e for e in EXPERT_ORDER if e in present)

    def expert_range(self, expert: str) -> tuple[int, int]:
        """Contiguous positions owned by ``expert``."""
        owned = [self.offsets[s] for s in self.spans if SPAN_OWNER[s] == expert]
        if not owned:
            raise LayoutError(f"expert {expert!r} owns no span in this layout")
        return owned[0][0], owned[-1][1]

    def span_in_expert(self, span: str) -> slice:
        """Rows of ``span`` inside its owning expert's stream."""
        current = self.span(span)
        start, stop = current.start, current.stop
        first, _ = self.expert_range(SPAN_OWNER[span])
        return slice(start - first, stop - first)

    def validate(self) -> None:
        for span in self.spans:
            if self.span_length(span) <= 0:
                raise LayoutError(
                    f"degenerate layout: span {span!r} has length {self.span_length(span)} "
                    f"(n_img={self.n_img}, n_txt={self.n_txt}, horizon={self.horizon})"
                )


@dataclass(frozen=True, eq=False)
class AttentionMask:
    """``allowed[q, k]`` is True iff query position ``q`` may attend key position ``k``."""

    layout: SpanLayout
    allowed: np.ndarray

    @property
    def size(self) -> int:
        return int(self.allowed.shape[0])


def layout_for(
    n_img: int,
    n_txt: int,
    horizon: int,
    *,
    use_traj3d: bool = True,
    use_intention: bool = True,
) -> SpanLayout:
    layout = SpanLayout(
        n_img=n_img,
        n_txt=n_txt,
        horizon=horizon,
        include_traj3d=use_traj3d,
        include_mano=use_intention,
    )
    layout.validate()
    return layout


@lru_cache(maxsize=64)
def _mask_array(layout: SpanLayout) -> np.ndarray:
    layout.validate()
    offsets = layout.offsets
    allowed = np.zeros((layout.total, layout.total), dtype=bool)

    prefix_stop = offsets[SPAN_TXT][1]
    # img and txt form one bidirectional prefix
    allowed[:prefix_stop, :prefix_stop] = True

    for span in (SPAN_TRAJ3D, SPAN_MANO):
        if span not in offsets:
            continue
        start, stop = offsets[span]
        allowed[start:stop, :start] = True
        allowed[start:stop, start:stop] = np.tril(np.ones((stop - start, stop - start), dtype=bool))

    start, stop = offsets[SPAN_ACTION]
    allowed[start:stop, :stop] = True

    allowed.setflags(write=False)
    return allowed


def build_mask(layout: SpanLayout) -> AttentionMask:
    """Hierarchical attention mask for ``layout``.

    img/txt queries see the whole img+txt prefix and nothing later. traj3d and mano
    queries see every earlier present span plus their own span causally. Action queries
    see every earlier present span and the whole action chunk.
    """
    return AttentionMask(layout=layout, allowed=_mask_array(layout))


def expert_of_position(layout: SpanLayout) -> np.ndarray:
    """Index into ``EXPERT_ORDER`` of the expert owning each position."""
    owners = np.empty(layout.total, dtype=np.int64)
    for span, (start, stop) in layout.offsets.items():
        owners[start:stop] = EXPERT_ORDER.index(SPAN_OWNER[span])
    return owners

