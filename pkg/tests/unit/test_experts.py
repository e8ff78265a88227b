"""Unit tests for the waypoint, hand-motion and action experts and sequential inference."""

import math

import numpy as np
import pytest
from conftest import TERM_WEIGHTS, batch_of, loss_term_gradients, make_config

from mot_hra.autograd import Tensor, backward, no_grad
from mot_hra.autograd.gradcheck import check_gradients
from mot_hra.builders.layout_builder import LayoutError
from mot_hra.config import AblationFlags, apply_ablation
from mot_hra.constants import EXPERT_INTENTION, EXPERT_VL, HAND_DIM, SPAN_MANO, SPLIT_TRAIN
from mot_hra.model import intention_expert
from mot_hra.model.fine_expert import (
    action_flow_loss,
    action_loss_weights,
    flow_loss_act,
    predict_chunk,
    sample_actions,
)
from mot_hra.model.flow import make_flow_batch
from mot_hra.model.intention_expert import (
    flow_loss_mano,
    mano_flow_loss,
    mano_loss_weights,
    sample_mano,
)
from mot_hra.model.policy import MotHraPolicy, PolicyInputs, PolicyOutputs
from mot_hra.model.trunk import read_hidden
from mot_hra.model.vl_expert import (
    decode_waypoints,
    loss_3d,
    teacher_forced_logits,
    waypoint_accuracy,
)
from mot_hra.services.trainer import joint_loss
from mot_hra.utils.quaternion import hand_quaternion_blocks, renormalize_hand


def ablated_policy(**flags) -> MotHraPolicy:
    return MotHraPolicy.initialize(apply_ablation(make_config(), AblationFlags(**flags)))


def zero_velocity(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class TestLossNormalization:
    """Loss scales on hand-computed inputs."""

    def test_uniform_waypoint_logits(self):
        batch, horizon, bins = 2, 4, 16
        logits = Tensor(np.zeros((batch, horizon, 3, bins)), requires_grad=True)
        targets = np.zeros((batch, horizon, 3), dtype=np.int64)
        assert loss_3d(logits, targets).item() == pytest.approx(horizon * 3 * math.log(bins))

    def test_zero_hand_velocity_gives_two(self):
        """Wrist and joint terms each average to one for a unit target velocity."""
        horizon = 5
        hand = np.ones((3, horizon, HAND_DIM))
        flow = make_flow_batch(hand, np.zeros_like(hand), np.zeros(3))
        valid = np.ones((3, horizon), dtype=bool)
        valid[1, 3:] = False
        has_mano = np.array([True, True, False])
        loss = mano_flow_loss(zero_velocity(hand.shape), flow, has_mano, valid)
        assert loss.item() == pytest.approx(2.0)

    def test_zero_action_velocity_gives_one(self):
        actions = np.ones((4, 3, 7))
        flow = make_flow_batch(actions, np.zeros_like(actions), np.zeros(4))
        has_action = np.array([True, False, True, True])
        loss = action_flow_loss(zero_velocity(actions.shape), flow, has_action)
        assert loss.item() == pytest.approx(1.0)

    def test_hand_weights_skip_padding_and_robot_rows(self):
        valid = np.array([[True, True, False], [True, True, True]])
        weights = mano_loss_weights(np.array([True, False]), valid)
        assert np.all(weights[0, 2] == 0.0)
        assert np.all(weights[1] == 0.0)
        assert weights[0, 0, 0] == pytest.approx(1.0 / (7 * 2))
        assert weights[0, 0, -1] == pytest.approx(1.0 / (60 * 2))

    def test_action_weights_without_actions(self):
        assert not action_loss_weights(np.zeros(3, dtype=bool), 4, 7).any()

    def test_waypoint_accuracy_per_axis(self):
        gt = np.zeros((1, 2, 3), dtype=np.int64)
        pred = np.array([[[0, 1, 0], [0, 1, 1]]])
        np.testing.assert_allclose(waypoint_accuracy(pred, gt), [1.0, 0.0, 0.5])


class TestJointLossGradients:
    """Finite-difference check of the combined loss through the whole policy."""

    def test_joint_loss_gradients(self, mixed_batch):
        policy = MotHraPolicy.initialize(make_config(trunk__insulate=False))
        params = [
            policy.params[name]
            for name in ("fine.act_out_b", "vl.traj_begin", "intention.mano_in_b")
        ]

        def loss():
            time_rng, noise_rng = np.random.default_rng(0), np.random.default_rng(1)
            return joint_loss(policy, mixed_batch, time_rng, noise_rng).total

        assert check_gradients(loss, params) < 1e-5

    @pytest.mark.parametrize("term", ["3d", "mano", "act"])
    def test_each_term_against_finite_differences(self, mixed_batch, term):
        """Terms that cannot see a parameter give it an exactly zero gradient."""
        names = ("vl.traj_begin", "intention.mano_in_b", "intention.mano_out_b", "fine.act_out_b")
        grads = loss_term_gradients(term, mixed_batch, 3, names)
        for name, analytic, numeric in grads:
            np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7, err_msg=name)
        reached = {name: bool(np.any(analytic)) for name, analytic, _ in grads}
        assert reached["intention.mano_in_b"] == (term != "3d")
        assert reached["fine.act_out_b"] == (term == "act")

    def test_human_only_batch_leaves_the_fine_expert_untouched(self, world, rngs):
        policy = MotHraPolicy.initialize(make_config(trunk__insulate=False))
        humans = [e for e in world if e.split == SPLIT_TRAIN and e.has_hand][:3]
        batch = batch_of(humans, policy.config)
        policy.params.zero_grad()
        backward(joint_loss(policy, batch, *rngs()).total)
        assert policy.params.grad_norm("fine") == 0.0
        assert policy.params.grad_norm("intention") > 0.0

    def test_vl_gradients_come_from_the_waypoint_loss_alone(self, mixed_batch, rngs):
        """With insulation the hand and action terms add nothing to the VL expert's gradient."""
        joint = MotHraPolicy.initialize(make_config())
        alone = MotHraPolicy(make_config(**TERM_WEIGHTS["3d"]), joint.params.copy())

        def vl_grads(policy):
            policy.params.zero_grad()
            backward(joint_loss(policy, mixed_batch, *rngs()).total)
            return {n: p.grad.copy() for n, p in policy.params.group(EXPERT_VL)}

        from_joint, from_3d = vl_grads(joint), vl_grads(alone)
        assert from_joint.keys() == from_3d.keys()
        for name, grad in from_joint.items():
            np.testing.assert_array_equal(grad, from_3d[name], err_msg=name)
        assert any(np.any(g) for g in from_joint.values())

    def test_joint_loss_reports_every_term(self, policy, mixed_batch, rngs):
        result = joint_loss(policy, mixed_batch, *rngs())
        assert result.loss_3d > 0.0 and result.loss_mano > 0.0 and result.loss_act > 0.0
        expected = result.loss_3d + result.loss_mano + result.loss_act
        assert result.total.item() == pytest.approx(expected)


class TestWaypointExpert:
    def test_teacher_forced_logits_shape(self, policy, mixed_batch):
        logits = teacher_forced_logits(policy, mixed_batch)
        assert logits.shape == (mixed_batch.size, 4, 3, 16)

    def test_greedy_decoding_is_deterministic(self, policy, mixed_batch):
        a = decode_waypoints(policy, mixed_batch.scene, mixed_batch.text)
        b = decode_waypoints(policy, mixed_batch.scene, mixed_batch.text, seed=123)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (mixed_batch.size, 4, 3)
        assert a.min() >= 0 and a.max() < 16

    def test_greedy_matches_teacher_forcing_on_its_own_output(self, policy, mixed_batch):
        """Feeding the decoded plan back reproduces the argmax at every step."""
        bins = decode_waypoints(policy, mixed_batch.scene, mixed_batch.text)
        with no_grad():
            out = policy.forward(
                PolicyInputs(scene=mixed_batch.scene, text=mixed_batch.text, plan_bins=bins),
                stop_after=EXPERT_VL,
            )
        np.testing.assert_array_equal(np.argmax(out.waypoint_logits.data, axis=-1), bins)

    def test_sampling_depends_on_seed_only(self, policy, mixed_batch):
        kwargs = dict(mode="sample", temperature=1.0)
        a = decode_waypoints(policy, mixed_batch.scene, mixed_batch.text, seed=5, **kwargs)
        b = decode_waypoints(policy, mixed_batch.scene, mixed_batch.text, seed=5, **kwargs)
        np.testing.assert_array_equal(a, b)

    def test_unknown_mode(self, policy, mixed_batch):
        with pytest.raises(ValueError, match="waypoint mode"):
            decode_waypoints(policy, mixed_batch.scene, mixed_batch.text, mode="beam")

    def test_layout_without_traj3d(self, mixed_batch):
        with pytest.raises(LayoutError):
            teacher_forced_logits(ablated_policy(no_traj3d=True), mixed_batch)


class TestIntentionExpert:
    def test_sampled_quaternions_are_unit(self, policy, mixed_batch):
        hand, _ = sample_mano(
            policy, mixed_batch.scene, mixed_batch.text, mixed_batch.plan_bins, 2, 2.0, seed=1
        )
        wrist, joints = hand_quaternion_blocks(hand)
        np.testing.assert_allclose(np.linalg.norm(wrist, axis=-1), 1.0)
        np.testing.assert_allclose(np.linalg.norm(joints, axis=-1), 1.0)

    def test_captured_states_are_reproducible(self, policy, mixed_batch):
        """Re-running the captured mano input reproduces the captured hidden states."""
        _, captured = sample_mano(
            policy, mixed_batch.scene, mixed_batch.text, mixed_batch.plan_bins, 3, 2.0, seed=2
        )
        with no_grad():
            out = policy.forward(
                PolicyInputs(
                    scene=mixed_batch.scene,
                    text=mixed_batch.text,
                    plan_bins=mixed_batch.plan_bins,
                    mano_x=captured.state,
                    mano_t=captured.t,
                    mano_valid=captured.valid,
                ),
                stop_after=EXPERT_INTENTION,
            )
        hidden = read_hidden(out.states, policy.layout, SPAN_MANO).data
        np.testing.assert_allclose(hidden, captured.hidden)
        np.testing.assert_allclose(captured.t, 2.0 / 3.0)

    def test_guidance_changes_the_sample(self, policy, mixed_batch):
        args = (policy, mixed_batch.scene, mixed_batch.text, mixed_batch.plan_bins, 2)
        guided, _ = sample_mano(*args, 4.0, seed=3)
        plain, _ = sample_mano(*args, 1.0, seed=3)
        assert not np.allclose(guided, plain)

    def test_flow_loss_needs_mano_span(self, mixed_batch, rngs):
        with pytest.raises(LayoutError):
            flow_loss_mano(ablated_policy(no_intention=True), mixed_batch, *rngs())

    def test_flow_loss_is_finite(self, policy, mixed_batch, rngs):
        loss, flow = flow_loss_mano(policy, mixed_batch, *rngs())
        assert np.isfinite(loss.item())
        assert flow.x_t.shape == mixed_batch.hand.shape


class TestFineExpert:
    def test_flow_loss_needs_intention_states(self, policy, mixed_batch, rngs):
        with pytest.raises(LayoutError, match="intention states"):
            flow_loss_act(policy, mixed_batch, None, *rngs())

    def test_flow_loss_without_mano_span(self, mixed_batch, rngs):
        loss, _ = flow_loss_act(ablated_policy(no_intention=True), mixed_batch, None, *rngs())
        assert loss.item() > 0.0

    def test_zero_steps_fail(self, mixed_batch):
        policy = ablated_policy(no_intention=True)
        with pytest.raises(ValueError, match="at least one step"):
            sample_actions(policy, mixed_batch.scene, mixed_batch.text, None, None, 0, seed=0)


def straight_path_velocity(target: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Exact velocity of the straight path from ``x`` at time ``t`` to ``target`` at 1."""
    return (target - x) / (1.0 - t)[:, None, None]


class TestSamplersAgainstAnExactVelocity:
    """With the exact straight-path velocity every Euler step lands on the path."""

    @pytest.mark.parametrize("steps", [1, 5, 10])
    def test_actions_reach_the_target(self, policy, mixed_batch, monkeypatch, steps):
        target = np.random.default_rng(steps).standard_normal((4, 4, 7))
        times = []

        def oracle(inputs, **kwargs):
            times.append(float(inputs.action_t[0]))
            v = straight_path_velocity(target, inputs.action_x, inputs.action_t)
            return PolicyOutputs(states=None, action_velocity=Tensor(v))

        monkeypatch.setattr(policy, "forward", oracle)
        actions = sample_actions(
            policy, mixed_batch.scene, mixed_batch.text, None, None, steps, seed=5
        )
        np.testing.assert_allclose(actions, target, atol=1e-9)
        np.testing.assert_allclose(times, np.arange(steps) / steps)

    @pytest.mark.parametrize("steps", [1, 5, 10])
    def test_hand_reaches_the_target(self, policy, mixed_batch, monkeypatch, steps):
        target = renormalize_hand(np.random.default_rng(steps).standard_normal((4, 4, HAND_DIM)))
        branches = []

        def oracle(inputs, **kwargs):
            branches.append(bool(inputs.text_dropped[0]))
            v = straight_path_velocity(target, inputs.mano_x, inputs.mano_t)
            return PolicyOutputs(states=None, mano_velocity=Tensor(v))

        monkeypatch.setattr(policy, "forward", oracle)
        monkeypatch.setattr(
            intention_expert, "read_hidden", lambda states, layout, span: Tensor(np.zeros(1))
        )
        hand, captured = sample_mano(
            policy, mixed_batch.scene, mixed_batch.text, None, steps, 6.0, seed=5
        )
        np.testing.assert_allclose(hand, target, atol=1e-9)
        assert branches == [False, True] * steps
        np.testing.assert_allclose(captured.t, (steps - 1) / steps)


class TestPredictChunk:
    """Sequential inference from scene and instruction only."""

    def test_same_seed_same_chunk(self, policy, mixed_batch):
        a = predict_chunk(policy, mixed_batch.scene, mixed_batch.text, seed=11)
        b = predict_chunk(policy, mixed_batch.scene, mixed_batch.text, seed=11)
        np.testing.assert_array_equal(a.actions, b.actions)
        np.testing.assert_array_equal(a.hand, b.hand)
        np.testing.assert_array_equal(a.plan_bins, b.plan_bins)

    def test_other_seed_other_chunk(self, policy, mixed_batch):
        a = predict_chunk(policy, mixed_batch.scene, mixed_batch.text, seed=11)
        b = predict_chunk(policy, mixed_batch.scene, mixed_batch.text, seed=12)
        assert not np.allclose(a.actions, b.actions)

    def test_full_layout_outputs(self, policy, mixed_batch):
        pred = predict_chunk(policy, mixed_batch.scene, mixed_batch.text, seed=0)
        assert pred.plan_bins.shape == (4, 4, 3)
        assert pred.hand.shape == (4, 4, HAND_DIM)
        assert pred.intention is not None
        assert pred.actions.shape == (4, 4, 7)

    def test_baseline_layout_skips_plan_and_hand(self, mixed_batch):
        policy = ablated_policy(no_traj3d=True, no_intention=True)
        pred = predict_chunk(policy, mixed_batch.scene, mixed_batch.text, seed=0)
        assert pred.plan_bins is None
        assert pred.hand is None
        assert pred.intention is None
        assert np.all(np.isfinite(pred.actions))

    def test_overrides_take_effect(self, policy, mixed_batch):
        a = predict_chunk(policy, mixed_batch.scene, mixed_batch.text, seed=0, flow_steps=1)
        b = predict_chunk(policy, mixed_batch.scene, mixed_batch.text, seed=0, flow_steps=3)
        assert not np.allclose(a.actions, b.actions)
