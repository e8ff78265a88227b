"""Unit tests for the shared-attention trunk: insulation, causality and key padding."""

import numpy as np
import pytest

from mot_hra.autograd import backward, mse_weighted, no_grad
from mot_hra.builders.layout_builder import LayoutError
from mot_hra.constants import EXPERT_INTENTION, EXPERT_VL, HAND_DIM
from mot_hra.model.policy import MotHraPolicy, PolicyInputs


def full_inputs(policy: MotHraPolicy, batch, seed: int = 0) -> PolicyInputs:
    rng = np.random.default_rng(seed)
    m = policy.config.model
    size = batch.size
    return PolicyInputs(
        scene=batch.scene,
        text=batch.text,
        plan_bins=batch.plan_bins,
        mano_x=rng.standard_normal((size, m.horizon, HAND_DIM)),
        mano_t=rng.uniform(size=size),
        action_x=rng.standard_normal((size, m.horizon, m.action_dim)),
        action_t=rng.uniform(size=size),
    )


def action_loss(policy: MotHraPolicy, inputs: PolicyInputs, insulate=None):
    out = policy.forward(inputs, insulate=insulate)
    target = np.zeros(out.action_velocity.shape)
    return mse_weighted(out.action_velocity, target, 1.0)


class TestInsulation:
    """Gradient barriers between experts."""

    def test_action_loss_does_not_reach_earlier_experts(self, policy, mixed_batch):
        policy.params.zero_grad()
        backward(action_loss(policy, full_inputs(policy, mixed_batch), insulate=True))
        assert policy.params.grad_norm("vl") == 0.0
        assert policy.params.grad_norm("intention") == 0.0
        assert policy.params.grad_norm("fine") > 0.0

    def test_without_insulation_gradients_flow_back(self, policy, mixed_batch):
        policy.params.zero_grad()
        backward(action_loss(policy, full_inputs(policy, mixed_batch), insulate=False))
        assert policy.params.grad_norm("vl") > 0.0
        assert policy.params.grad_norm("intention") > 0.0

    def test_mano_loss_does_not_reach_vl(self, policy, mixed_batch):
        policy.params.zero_grad()
        out = policy.forward(full_inputs(policy, mixed_batch), stop_after=EXPERT_INTENTION)
        backward(mse_weighted(out.mano_velocity, np.zeros(out.mano_velocity.shape), 1.0))
        assert policy.params.grad_norm("vl") == 0.0
        assert policy.params.grad_norm("fine") == 0.0
        assert policy.params.grad_norm("intention") > 0.0

    @pytest.mark.parametrize("insulate", [False, np.array([True, False, True, False])])
    def test_insulation_does_not_change_the_forward_pass(self, policy, mixed_batch, insulate):
        inputs = full_inputs(policy, mixed_batch)
        with no_grad():
            ref = policy.forward(inputs, insulate=True)
            other = policy.forward(inputs, insulate=insulate)
        np.testing.assert_array_equal(ref.action_velocity.data, other.action_velocity.data)
        np.testing.assert_array_equal(ref.mano_velocity.data, other.mano_velocity.data)

    def test_per_sample_insulation_shape_is_checked(self, policy, mixed_batch):
        with pytest.raises(LayoutError, match="per-sample"):
            policy.forward(full_inputs(policy, mixed_batch), insulate=np.array([True, False]))


class TestCausality:
    """Later spans never change earlier outputs."""

    def test_truncated_pass_matches_full_pass(self, policy, mixed_batch):
        inputs = full_inputs(policy, mixed_batch)
        with no_grad():
            full = policy.forward(inputs)
            vl_only = policy.forward(inputs, stop_after=EXPERT_VL)
        assert vl_only.mano_velocity is None and vl_only.action_velocity is None
        np.testing.assert_allclose(vl_only.waypoint_logits.data, full.waypoint_logits.data)

    def test_actions_do_not_affect_the_hand_head(self, policy, mixed_batch):
        inputs = full_inputs(policy, mixed_batch)
        with no_grad():
            before = policy.forward(inputs).mano_velocity.data
            inputs.action_x = inputs.action_x + 5.0
            after = policy.forward(inputs).mano_velocity.data
        np.testing.assert_allclose(before, after)

    def test_mano_span_is_causal(self, policy, mixed_batch):
        inputs = full_inputs(policy, mixed_batch)
        with no_grad():
            before = policy.forward(inputs, stop_after=EXPERT_INTENTION).mano_velocity.data
            inputs.mano_x = inputs.mano_x.copy()
            inputs.mano_x[:, -1] += 3.0
            after = policy.forward(inputs, stop_after=EXPERT_INTENTION).mano_velocity.data
        np.testing.assert_allclose(before[:, :-1], after[:, :-1])
        assert not np.allclose(before[:, -1], after[:, -1])

    def test_action_span_is_bidirectional(self, policy, mixed_batch):
        inputs = full_inputs(policy, mixed_batch)
        with no_grad():
            before = policy.forward(inputs).action_velocity.data
            inputs.action_x = inputs.action_x.copy()
            inputs.action_x[:, -1] += 3.0
            after = policy.forward(inputs).action_velocity.data
        for h in range(policy.config.model.horizon):
            assert not np.allclose(before[:, h], after[:, h]), h

    def test_padded_hand_steps_are_invisible_to_actions(self, policy, mixed_batch):
        inputs = full_inputs(policy, mixed_batch)
        horizon = policy.config.model.horizon
        inputs.mano_valid = np.ones((mixed_batch.size, horizon), dtype=bool)
        inputs.mano_valid[:, -1] = False
        with no_grad():
            before = policy.forward(inputs).action_velocity.data
            inputs.mano_x = inputs.mano_x.copy()
            inputs.mano_x[:, -1] -= 4.0
            after = policy.forward(inputs).action_velocity.data
        np.testing.assert_allclose(before, after)

    def test_missing_input_is_reported(self, policy, mixed_batch):
        inputs = full_inputs(policy, mixed_batch)
        inputs.action_x = None
        with pytest.raises(LayoutError, match="action_x"):
            policy.forward(inputs)
