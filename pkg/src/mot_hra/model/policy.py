"""The full three-expert policy: input embedding, trunk pass and output heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autograd import (
    Tensor,
    add,
    add_bias,
    concat,
    constant,
    embedding_lookup,
    expand,
    matmul,
    mul,
    reshape,
)
from ..builders.layout_builder import LayoutError, build_mask, layout_for
from ..builders.sequence_builder import assemble_sequence
from ..config import RunConfig
from ..constants import (
    EXPERT_FINE,
    EXPERT_INTENTION,
    EXPERT_ORDER,
    SPAN_ACTION,
    SPAN_MANO,
    SPAN_OWNER,
    SPAN_TRAJ3D,
    STREAM_INIT,
)
from ..utils.quantize import dequantize
from ..utils.seeding import stream_rng
from .flow import time_embedding
from .params import ParamStore, init_params
from .trunk import Insulation, TrunkStates, read_hidden, trunk_forward


@dataclass(eq=False)
class PolicyInputs:
    """Numpy inputs of one forward pass. Spans the pass does not reach may stay ``None``.

    ``plan_bins`` feeds the traj3d span shifted by one step (teacher forcing or the
    waypoints decoded so far); ``mano_valid`` hides padded hand timesteps as keys.
    """

    scene: np.ndarray
    text: np.ndarray
    text_dropped: np.ndarray | None = None
    plan_bins: np.ndarray | None = None
    mano_x: np.ndarray | None = None
    mano_t: np.ndarray | None = None
    mano_valid: np.ndarray | None = None
    action_x: np.ndarray | None = None
    action_t: np.ndarray | None = None

    @property
    def batch(self) -> int:
        return int(self.scene.shape[0])


@dataclass
class PolicyOutputs:
    states: TrunkStates
    waypoint_logits: Tensor | None = None
    mano_velocity: Tensor | None = None
    action_velocity: Tensor | None = None


class MotHraPolicy:
    """Embeds inputs, runs the trunk and reads each expert's head."""

    def __init__(self, config: RunConfig, params: ParamStore) -> None:
        self.config = config
        self.params = params
        m = config.model
        self.layout = layout_for(
            m.n_img_tokens,
            m.n_text_tokens,
            m.horizon,
            use_traj3d=not config.ablation.no_traj3d,
            use_intention=not config.ablation.no_intention,
        )
        self.mask = build_mask(self.layout)

    @classmethod
    def initialize(cls, config: RunConfig, rng: np.random.Generator | None = None) -> MotHraPolicy:
        rng = rng if rng is not None else stream_rng(config.seed.root, STREAM_INIT)
        return cls(config, init_params(config, rng))

    @property
    def dtype(self) -> np.dtype:
        return self.params["shared.type_embedding"].dtype

    @property
    def width(self) -> int:
        return self.config.trunk.width

    def _const(self, value: np.ndarray) -> Tensor:
        return constant(value, self.params["shared.type_embedding"])

    # -- span inputs -------------------------------------------------------------------

    def embed_image(self, scene: np.ndarray) -> Tensor:
        m = self.config.model
        p = self.params
        shapes = embedding_lookup(p["vl.scene_shape_emb"], scene[..., 0])
        colors = embedding_lookup(p["vl.scene_color_emb"], scene[..., 1])
        occupied = (scene[..., 0] > 0)[..., None]
        lo, hi = m.coord_range
        positions = np.where(occupied, dequantize(scene[..., 2:], lo, hi, m.bins), 0.0)
        return add(add(shapes, colors), matmul(self._const(positions), p["vl.scene_pos_proj"]))

    def embed_text(self, text: np.ndarray, dropped: np.ndarray | None) -> Tensor:
        """Instruction tokens; rows flagged in ``dropped`` use the learned null instruction."""
        tokens = embedding_lookup(self.params["vl.text_emb"], text)
        if dropped is None or not np.any(dropped):
            return tokens
        null = expand(self.params["vl.null_text"], text.shape[0])
        if np.all(dropped):
            return null
        keep = np.broadcast_to((~np.asarray(dropped, dtype=bool))[:, None, None], tokens.shape)
        keep = keep.astype(self.dtype)
        return add(mul(tokens, keep), mul(null, 1.0 - keep))

    def embed_traj_queries(self, plan_bins: np.ndarray) -> Tensor:
        """Learned queries plus the embedding of the previous waypoint (begin token first)."""
        p = self.params
        batch, horizon = plan_bins.shape[0], self.config.model.horizon
        begin = expand(p["vl.traj_begin"], batch)
        if horizon > 1:
            prev = plan_bins[:, : horizon - 1]
            waypoint = add(
                add(
                    embedding_lookup(p["vl.bin_emb_x"], prev[..., 0]),
                    embedding_lookup(p["vl.bin_emb_y"], prev[..., 1]),
                ),
                embedding_lookup(p["vl.bin_emb_z"], prev[..., 2]),
            )
            fed = concat([begin, waypoint], axis=1)
        else:
            fed = begin
        return add(fed, expand(p["vl.traj_query"], batch))

    def _embed_state(self, x: np.ndarray, t: np.ndarray, w_in: str, b_in: str) -> Tensor:
        proj = add_bias(matmul(self._const(x), self.params[w_in]), self.params[b_in])
        temb = time_embedding(t, self.width)[:, None, :]
        return add(proj, np.broadcast_to(temb, proj.shape).astype(self.dtype))

    def embed_mano(self, x: np.ndarray, t: np.ndarray) -> Tensor:
        return self._embed_state(x, t, "intention.mano_in", "intention.mano_in_b")

    def embed_actions(self, x: np.ndarray, t: np.ndarray) -> Tensor:
        return self._embed_state(x, t, "fine.act_in", "fine.act_in_b")

    # -- forward -----------------------------------------------------------------------

    def experts_for(self, stop_after: str | None) -> tuple[str, ...]:
        limit = len(EXPERT_ORDER) - 1 if stop_after is None else EXPERT_ORDER.index(stop_after)
        return tuple(e for e in self.layout.experts if EXPERT_ORDER.index(e) <= limit)

    def forward(
        self,
        inputs: PolicyInputs,
        stop_after: str | None = None,
        insulate: Insulation | None = None,
    ) -> PolicyOutputs:
        layout = self.layout
        experts = self.experts_for(stop_after)

        def wanted(span: str) -> bool:
            return layout.has_span(span) and SPAN_OWNER[span] in experts

        def need(value: np.ndarray | None, what: str) -> np.ndarray:
            if value is None:
                raise LayoutError(f"forward pass needs {what} for the layout {layout}")
            return value

        blocks: dict[str, Tensor | None] = {SPAN_TRAJ3D: None, SPAN_MANO: None, SPAN_ACTION: None}
        if wanted(SPAN_TRAJ3D):
            blocks[SPAN_TRAJ3D] = self.embed_traj_queries(need(inputs.plan_bins, "plan_bins"))
        if wanted(SPAN_MANO):
            blocks[SPAN_MANO] = self.embed_mano(
                need(inputs.mano_x, "mano_x"), need(inputs.mano_t, "mano_t")
            )
        if wanted(SPAN_ACTION):
            blocks[SPAN_ACTION] = self.embed_actions(
                need(inputs.action_x, "action_x"), need(inputs.action_t, "action_t")
            )

        tokens = assemble_sequence(
            layout,
            self.params["shared.type_embedding"],
            self.params["shared.pos_embedding"],
            img=self.embed_image(inputs.scene),
            txt=self.embed_text(inputs.text, inputs.text_dropped),
            traj3d=blocks[SPAN_TRAJ3D],
            mano=blocks[SPAN_MANO],
            action=blocks[SPAN_ACTION],
        )

        key_padding = None
        if wanted(SPAN_MANO) and inputs.mano_valid is not None:
            key_padding = np.ones((inputs.batch, tokens.shape[1]), dtype=bool)
            key_padding[:, layout.span(SPAN_MANO)] = np.asarray(inputs.mano_valid, dtype=bool)

        states = trunk_forward(
            tokens,
            layout,
            self.mask,
            self.params,
            self.config.trunk,
            insulate=insulate,
            key_padding=key_padding,
            stop_after=experts[-1],
        )
        out = PolicyOutputs(states=states)
        if wanted(SPAN_TRAJ3D):
            out.waypoint_logits = self.waypoint_head(read_hidden(states, layout, SPAN_TRAJ3D))
        if EXPERT_INTENTION in experts:
            hidden = read_hidden(states, layout, SPAN_MANO)
            out.mano_velocity = add_bias(
                matmul(hidden, self.params["intention.mano_out"]),
                self.params["intention.mano_out_b"],
            )
        if EXPERT_FINE in experts:
            hidden = read_hidden(states, layout, SPAN_ACTION)
            out.action_velocity = add_bias(
                matmul(hidden, self.params["fine.act_out"]), self.params["fine.act_out_b"]
            )
        return out

    def waypoint_head(self, hidden: Tensor) -> Tensor:
        """Three parallel per-axis classifiers over the same position: ``B x H x 3 x bins``."""
        batch, horizon, _ = hidden.shape
        bins = self.config.model.bins
        per_axis = []
        for axis in "xyz":
            logits = add_bias(
                matmul(hidden, self.params[f"vl.head_{axis}"]), self.params[f"vl.head_{axis}_b"]
            )
            per_axis.append(reshape(logits, (batch, horizon, 1, bins)))
        return concat(per_axis, axis=2)

