"""Named parameter tables for the shared embeddings and the three experts."""

from __future__ import annotations

from collections.abc import Iterator

import numpy as np

from ..autograd import Tensor
from ..config import RunConfig
from ..constants import (
    EXPERT_FINE,
    EXPERT_INTENTION,
    EXPERT_ORDER,
    EXPERT_VL,
    HAND_DIM,
    SHARED_GROUP,
    SPAN_ORDER,
)

LAYER_PARAMS = ("wq", "wk", "wv", "wo", "ln1_g", "ln1_b", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


def layer_key(expert: str, layer: int, name: str) -> str:
    return f"{expert}.layers.{layer}.{name}"


def group_of(name: str) -> str:
    """Parameter group (``vl``, ``intention``, ``fine`` or ``shared``) of a parameter name."""
    return name.split(".", 1)[0]


class ParamStore:
    """Ordered mapping of parameter names to trainable tensors."""

    def __init__(self, tensors: dict[str, Tensor]) -> None:
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self) -> list[tuple[str, Tensor]]:
        return list(self._tensors.items())

    def group(self, group: str) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._tensors.items() if group_of(n) == group]

    def zero_grad(self) -> None:
        for tensor in self._tensors.values():
            tensor.zero_grad()

    def grad_norm(self, group: str | None = None) -> float:
        """Global L2 norm of the gradients, optionally restricted to one group."""
        total = 0.0
        for name, tensor in self._tensors.items():
            if group is not None and group_of(name) != group:
                continue
            if tensor.grad is not None:
                total += float(np.sum(tensor.grad.astype(np.float64) ** 2))
        return float(np.sqrt(total))

    def count(self, group: str | None = None) -> int:
        return sum(
            t.data.size for n, t in self._tensors.items() if group is None or group_of(n) == group
        )

    def arrays(self) -> dict[str, np.ndarray]:
        """Copies of every parameter value."""
        return {n: t.data.copy() for n, t in self._tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place; names and shapes must match exactly."""
        missing = set(self._tensors) - set(arrays)
        extra = set(arrays) - set(self._tensors)
        if missing or extra:
            raise KeyError(
                f"parameter names differ: missing={sorted(missing)} extra={sorted(extra)}"
            )
        for name, tensor in self._tensors.items():
            value = arrays[name]
            if value.shape != tensor.shape:
                raise ValueError(
                    f"{name}: stored shape {value.shape} != parameter shape {tensor.shape}"
                )
            tensor.data[...] = value.astype(tensor.data.dtype, copy=False)

    def copy(self) -> ParamStore:
        return ParamStore(
            {
                n: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n)
                for n, t in self._tensors.items()
            }
        )


def _expert_layer_shapes(width: int, hidden: int) -> dict[str, tuple[int, ...]]:
    return {
        "wq": (width, width),
        "wk": (width, width),
        "wv": (width, width),
        "wo": (width, width),
        "ln1_g": (width,),
        "ln1_b": (width,),
        "ln2_g": (width,),
        "ln2_b": (width,),
        "w1": (width, hidden),
        "b1": (hidden,),
        "w2": (hidden, width),
        "b2": (width,),
    }


def parameter_shapes(config: RunConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name with its shape, in a fixed creation order."""
    m, t = config.model, config.trunk
    d = t.width
    shapes: dict[str, tuple[int, ...]] = {
        f"{SHARED_GROUP}.type_embedding": (len(SPAN_ORDER), d),
        f"{SHARED_GROUP}.pos_embedding": (m.n_img_tokens + m.n_text_tokens + 3 * m.horizon, d),
        f"{EXPERT_VL}.scene_shape_emb": (m.n_shapes + 1, d),
        f"{EXPERT_VL}.scene_color_emb": (m.n_colors + 1, d),
        f"{EXPERT_VL}.scene_pos_proj": (3, d),
        f"{EXPERT_VL}.text_emb": (m.text_vocab, d),
        f"{EXPERT_VL}.null_text": (m.n_text_tokens, d),
        f"{EXPERT_VL}.traj_query": (m.horizon, d),
        f"{EXPERT_VL}.traj_begin": (1, d),
    }
    for axis in "xyz":
        shapes[f"{EXPERT_VL}.bin_emb_{axis}"] = (m.bins, d)
        shapes[f"{EXPERT_VL}.head_{axis}"] = (d, m.bins)
        shapes[f"{EXPERT_VL}.head_{axis}_b"] = (m.bins,)
    shapes.update(
        {
            f"{EXPERT_INTENTION}.mano_in": (HAND_DIM, d),
            f"{EXPERT_INTENTION}.mano_in_b": (d,),
            f"{EXPERT_INTENTION}.mano_out": (d, HAND_DIM),
            f"{EXPERT_INTENTION}.mano_out_b": (HAND_DIM,),
            f"{EXPERT_FINE}.act_in": (m.action_dim, d),
            f"{EXPERT_FINE}.act_in_b": (d,),
            f"{EXPERT_FINE}.act_out": (d, m.action_dim),
            f"{EXPERT_FINE}.act_out_b": (m.action_dim,),
        }
    )
    layer_shapes = _expert_layer_shapes(d, t.ffn_mult * d)
    for expert in EXPERT_ORDER:
        for layer in range(t.depth):
            for name in LAYER_PARAMS:
                shapes[layer_key(expert, layer, name)] = layer_shapes[name]
        shapes[f"{expert}.ln_f_g"] = (d,)
        shapes[f"{expert}.ln_f_b"] = (d,)
    return shapes


def _is_gain(name: str) -> bool:
    return name.endswith("_g")


def _is_bias(name: str) -> bool:
    return name.endswith(("_b", ".b1", ".b2"))


def init_params(config: RunConfig, rng: np.random.Generator) -> ParamStore:
    """Normal(0, init_std) weights, unit norm gains, zero biases."""
    dtype = np.dtype(config.model.dtype)
    tensors: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        if _is_gain(name):
            value = np.ones(shape)
        elif _is_bias(name):
            value = np.zeros(shape)
        else:
            value = rng.normal(0.0, config.model.init_std, size=shape)
        tensors[name] = Tensor(value.astype(dtype), requires_grad=True, name=name)
    return ParamStore(tensors)
