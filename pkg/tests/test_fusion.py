import json
import sys
from pathlib import Path

import numpy as np
import pytest

from lanefusion.fusion import (
    AdvisorRecommendation,
    BridgeAdvisor,
    FeedbackLog,
    FeedbackSample,
    FusionConfig,
    FusionEngine,
    Outcome,
    ReplayAdvisor,
    RuleAdvisor,
    adapt_overrides,
    bucket_of,
    compare_actions,
    consistency_bonus,
    parse_sample_line,
    rule_recommendation,
    scene_to_text,
    serialize_sample,
)
from lanefusion.sim import (
    Action,
    ConfigError,
    SceneState,
    SimConfig,
    VehicleKinematics,
    lane_change_safe,
    observe,
    reset,
)

FAKE_BRIDGE = Path(__file__).with_name("fake_bridge.py")


def make_scene(ego, humans, rng_seed=0):
    return SceneState(ego=ego, humans=humans, step=0, rng=np.random.default_rng(rng_seed))


def ego_at(pos=500.0, lane=0, speed=25.0):
    return VehicleKinematics(id=0, pos=pos, lane=lane, speed=speed, is_ego=True)


def human(id, pos, lane, speed):
    return VehicleKinematics(id=id, pos=pos, lane=lane, speed=speed, desired_speed=speed)


def leader_scene(gap=30.0, dv=-5.0, lane=0, speed=25.0, cfg=None):
    cfg = cfg or SimConfig()
    ego = ego_at(lane=lane, speed=speed)
    lead = human(1, ego.pos + gap + cfg.vehicle_length, lane, speed + dv)
    return make_scene(ego, [lead])


class TestSceneText:

    def test_empty_road_mentions_clear_lane(self):
        cfg = SimConfig(human_count=0)
        state = reset(cfg, seed=1)
        assert "no vehicle ahead" in scene_to_text(state, cfg)

    def test_deterministic(self):
        cfg = SimConfig()
        a = reset(cfg, seed=5)
        b = reset(cfg, seed=5)
        assert scene_to_text(a, cfg) == scene_to_text(b, cfg)

    def test_leader_quantities_rendered(self):
        cfg = SimConfig()
        text = scene_to_text(leader_scene(gap=40.0, dv=-5.0), cfg)
        assert "40.0" in text and "5.0" in text and "slower" in text

    def test_faster_follower_rendered(self):
        cfg = SimConfig()
        ego = ego_at(speed=22.0)
        rear = human(1, ego.pos - 20.0 - cfg.vehicle_length, 0, 30.0)
        text = scene_to_text(make_scene(ego, [rear]), cfg)
        assert "behind in the ego lane" in text and "8.0 m/s faster" in text


class TestRuleAdvisor:

    def test_overtake_from_right_lane(self):
        cfg = SimConfig()
        state = leader_scene(gap=30.0, dv=-5.0, lane=0)
        rec = rule_recommendation(observe(state, cfg), cfg)
        assert rec.action == Action.TURN_LEFT
        assert rec.confidence == 0.9

    def test_overtake_from_left_lane(self):
        cfg = SimConfig()
        state = leader_scene(gap=30.0, dv=-5.0, lane=1)
        rec = rule_recommendation(observe(state, cfg), cfg)
        assert rec.action == Action.TURN_RIGHT
        assert rec.confidence == 0.9

    def test_right_lane_preference(self):
        cfg = SimConfig()
        state = make_scene(ego_at(lane=1, speed=30.0), [])
        rec = rule_recommendation(observe(state, cfg), cfg)
        assert rec.action == Action.TURN_RIGHT
        assert rec.confidence == 0.6

    def test_accelerate_on_clear_road(self):
        cfg = SimConfig()
        state = make_scene(ego_at(lane=0, speed=25.0), [])
        rec = rule_recommendation(observe(state, cfg), cfg)
        assert rec.action == Action.ACCELERATE
        assert rec.confidence == 0.7

    def test_maintain_at_target_speed(self):
        cfg = SimConfig()
        state = make_scene(ego_at(lane=0, speed=30.0), [])
        rec = rule_recommendation(observe(state, cfg), cfg)
        assert rec.action == Action.MAINTAIN
        assert rec.confidence == 0.5

    def test_maintain_when_boxed_in(self):
        cfg = SimConfig()
        ego = ego_at(lane=0, speed=25.0)
        lead = human(1, ego.pos + 35.0, 0, 20.0)
        blocker = human(2, ego.pos + 3.0, 1, 25.0)
        state = make_scene(ego, [lead, blocker])
        assert not lane_change_safe(state, 1, cfg)
        rec = rule_recommendation(observe(state, cfg), cfg)
        assert rec.action == Action.MAINTAIN

    def test_override_precedence(self):
        cfg = SimConfig()
        state = make_scene(ego_at(lane=0, speed=25.0), [])
        obs = observe(state, cfg)
        overrides = {bucket_of(obs, cfg): int(Action.DECELERATE)}
        rec = rule_recommendation(obs, cfg, overrides)
        assert rec.action == Action.DECELERATE

    def test_deterministic_per_state(self):
        cfg = SimConfig()
        rng = np.random.default_rng(2)
        advisor = RuleAdvisor(cfg)
        for seed in range(20):
            state = reset(cfg, seed=seed)
            obs = observe(state, cfg)
            a = advisor.recommend(state, obs)
            b = advisor.recommend(state, obs)
            assert (a.action, a.confidence) == (b.action, b.confidence)

    def test_safety_mirror_matches_simulator(self):
        # the obs-derived predicate must agree with the exact one on the
        # other lane across random traffic
        cfg = SimConfig()
        rng = np.random.default_rng(3)
        checked = 0
        for seed in range(150):
            state = reset(cfg, seed=seed)
            state.ego.pos = float(rng.uniform(100, 2500))
            state.ego.speed = float(rng.uniform(0, 33))
            obs = observe(state, cfg)
            from lanefusion.fusion import _lane_change_safe_from_obs
            got = _lane_change_safe_from_obs(obs, cfg)
            want = lane_change_safe(state, 1 - state.ego.lane, cfg)
            assert got == want
            checked += 1
        assert checked == 150


class TestBuckets:

    def test_axes(self):
        cfg = SimConfig()
        state = leader_scene(gap=30.0, dv=-2.0, lane=1, speed=21.0)
        lane, tercile, gapb = bucket_of(observe(state, cfg), cfg)
        assert lane == 1
        assert tercile == 0
        assert gapb == 1

    def test_extremes_clamp(self):
        cfg = SimConfig()
        slow = make_scene(ego_at(speed=5.0), [])
        fast = make_scene(ego_at(speed=33.0), [])
        assert bucket_of(observe(slow, cfg), cfg)[1] == 0
        assert bucket_of(observe(fast, cfg), cfg)[1] == 2
        assert bucket_of(observe(slow, cfg), cfg)[2] == 2  # no leader

    def test_near_gap_bucket(self):
        cfg = SimConfig()
        state = leader_scene(gap=12.0, dv=0.0)
        assert bucket_of(observe(state, cfg), cfg)[2] == 0


class TestCompareAndBonus:

    def test_agree(self):
        rec = AdvisorRecommendation(Action.TURN_LEFT, 0.9)
        assert compare_actions(Action.TURN_LEFT, rec) is Outcome.AGREE

    def test_disagree(self):
        rec = AdvisorRecommendation(Action.TURN_LEFT, 0.9)
        assert compare_actions(Action.STRAIGHT, rec) is Outcome.DISAGREE

    def test_no_advice_on_none(self):
        assert compare_actions(Action.STRAIGHT, None) is Outcome.NO_ADVICE

    def test_no_advice_below_threshold(self):
        rec = AdvisorRecommendation(Action.STRAIGHT, 0.4)
        assert compare_actions(Action.STRAIGHT, rec) is Outcome.NO_ADVICE

    def test_bonus_values(self):
        assert consistency_bonus(Outcome.AGREE, 1.0) == 1.0
        assert consistency_bonus(Outcome.DISAGREE, 1.0) == 0.0
        assert consistency_bonus(Outcome.NO_ADVICE, 1.0) == 0.0

    def test_bonus_rejects_negative_delta(self):
        with pytest.raises(ConfigError):
            consistency_bonus(Outcome.AGREE, -0.5)


class TestFeedbackLog:

    def sample(self, episode=0, step=1, executed=Action.STRAIGHT):
        return FeedbackSample(obs=np.zeros(10), scene_text="t",
                              executed=int(executed),
                              recommended=int(Action.TURN_LEFT),
                              episode=episode, step=step)

    def test_lines_flushed_with_return(self, tmp_path):
        path = tmp_path / "feedback.jsonl"
        logf = FeedbackLog(path)
        for step in range(5):
            logf.record(self.sample(step=step))
        logf.end_episode(return_env=123.5)
        logf.close()
        lines = path.read_text().splitlines()
        assert len(lines) == 5
        for line in lines:
            assert json.loads(line)["return_env"] == 123.5

    def test_no_lines_without_records(self, tmp_path):
        path = tmp_path / "feedback.jsonl"
        logf = FeedbackLog(path)
        logf.end_episode(return_env=10.0)
        logf.close()
        assert path.read_text() == ""

    def test_round_trip_byte_identical(self):
        sample = FeedbackSample(obs=np.array([0.1, -0.5, 1.0]), scene_text="a b c",
                                executed=int(Action.DECELERATE),
                                recommended=int(Action.ACCELERATE),
                                episode=3, step=17, episode_return_env=42.25)
        line = serialize_sample(sample)
        assert serialize_sample(parse_sample_line(line)) == line

    def test_actions_serialized_as_names(self):
        line = serialize_sample(self.sample())
        obj = json.loads(line)
        assert obj["executed"] == "STRAIGHT"
        assert obj["recommended"] == "TURN_LEFT"


class TestAdaptation:

    def bucket_sample(self, cfg, executed, return_env, gap=30.0):
        state = leader_scene(gap=gap, dv=-5.0, lane=0, speed=25.0)
        return FeedbackSample(obs=observe(state, cfg), scene_text="s",
                              executed=int(executed),
                              recommended=int(Action.TURN_LEFT),
                              episode=0, step=0, episode_return_env=return_env)

    def test_empty_log(self):
        assert adapt_overrides([], 10.0, SimConfig()) == {}

    def test_concordant_samples_install_override(self):
        cfg = SimConfig()
        samples = [self.bucket_sample(cfg, Action.DECELERATE, 20.0) for _ in range(3)]
        table = adapt_overrides(samples, 10.0, cfg)
        key = bucket_of(samples[0].obs, cfg)
        assert table == {key: int(Action.DECELERATE)}

    def test_discordant_samples_do_nothing(self):
        cfg = SimConfig()
        samples = [self.bucket_sample(cfg, a, 20.0)
                   for a in (Action.STRAIGHT, Action.ACCELERATE, Action.DECELERATE)]
        assert adapt_overrides(samples, 10.0, cfg) == {}

    def test_low_return_blocks_override(self):
        cfg = SimConfig()
        samples = [self.bucket_sample(cfg, Action.DECELERATE, 5.0) for _ in range(3)]
        assert adapt_overrides(samples, 10.0, cfg) == {}

    def test_no_baseline_means_no_overrides(self):
        cfg = SimConfig()
        samples = [self.bucket_sample(cfg, Action.DECELERATE, 20.0) for _ in range(3)]
        assert adapt_overrides(samples, None, cfg) == {}

    def test_majority_action_wins(self):
        cfg = SimConfig()
        samples = ([self.bucket_sample(cfg, Action.DECELERATE, 20.0)] * 3
                   + [self.bucket_sample(cfg, Action.ACCELERATE, 20.0)] * 4)
        table = adapt_overrides(samples, 10.0, cfg)
        assert list(table.values()) == [int(Action.ACCELERATE)]

    def test_tie_breaks_to_lowest_action(self):
        cfg = SimConfig()
        samples = ([self.bucket_sample(cfg, Action.DECELERATE, 20.0)] * 3
                   + [self.bucket_sample(cfg, Action.ACCELERATE, 20.0)] * 3)
        table = adapt_overrides(samples, 10.0, cfg)
        assert list(table.values()) == [int(Action.ACCELERATE)]


class TestEngine:

    def engine(self, tmp_path, **kw):
        cfg = FusionConfig(advisor="rule", **kw)
        return FusionEngine(cfg, SimConfig(), tmp_path / "feedback.jsonl")

    def test_disabled_engine_gives_no_advice(self):
        eng = FusionEngine(FusionConfig(advisor="none"), SimConfig())
        state = make_scene(ego_at(), [])
        assert not eng.enabled
        assert eng.recommend(state, observe(state, SimConfig())) is None

    def test_accounting_identity(self, tmp_path):
        # agreements * delta == sum of bonuses and feedback lines == disagreements
        cfg = SimConfig()
        eng = self.engine(tmp_path, adapt_every=0)
        rng = np.random.default_rng(11)
        total_bonus = 0.0
        for episode in range(4):
            state = reset(cfg, seed=episode)
            for step in range(40):
                obs = observe(state, cfg)
                rec = eng.recommend(state, obs)
                executed = int(rng.integers(6))
                bonus, outcome = eng.observe_step(episode, step, state, obs,
                                                  executed, rec)
                total_bonus += bonus
                assert bonus >= 0.0
                assert (bonus > 0) == (outcome is Outcome.AGREE)
            eng.end_episode(episode, return_env=float(rng.uniform(0, 100)))
        assert total_bonus == eng.stats.agreements * 1.0
        feedback_lines = (tmp_path / "feedback.jsonl").read_text().splitlines()
        assert len(feedback_lines) == eng.stats.disagreements
        assert eng.stats.agreements + eng.stats.disagreements == 160
        eng.close()

    def test_episode_stats_reset(self, tmp_path):
        cfg = SimConfig()
        eng = self.engine(tmp_path)
        state = make_scene(ego_at(speed=25.0), [])
        obs = observe(state, cfg)
        rec = eng.recommend(state, obs)
        eng.observe_step(0, 0, state, obs, int(rec.action), rec)
        assert eng.episode_stats.rate == 1.0
        eng.end_episode(0, 10.0)
        assert eng.episode_stats.rate is None
        assert eng.stats.agreements == 1
        eng.close()

    def test_q_bias_mode(self, tmp_path):
        eng = self.engine(tmp_path, mode="q-bias", q_bias=2.5)
        rec = AdvisorRecommendation(Action.ACCELERATE, 0.9)
        bias = eng.selection_bias(rec)
        assert bias is not None
        assert bias[Action.ACCELERATE] == 2.5 and bias.sum() == 2.5
        state = make_scene(ego_at(speed=25.0), [])
        obs = observe(state, SimConfig())
        bonus, outcome = eng.observe_step(0, 0, state, obs, int(rec.action), rec)
        assert outcome is Outcome.AGREE and bonus == 0.0
        eng.close()

    def test_shaping_mode_has_no_bias(self, tmp_path):
        eng = self.engine(tmp_path)
        assert eng.selection_bias(AdvisorRecommendation(Action.MAINTAIN, 0.9)) is None
        eng.close()

    def test_adaptation_round_trip(self, tmp_path):
        cfg = SimConfig()
        eng = self.engine(tmp_path, adapt_every=1, adapt_threshold=3)
        agree_state = make_scene(ego_at(speed=25.0), [])
        agree_obs = observe(agree_state, cfg)
        rec = eng.recommend(agree_state, agree_obs)
        eng.observe_step(0, 0, agree_state, agree_obs, int(rec.action), rec)
        eng.end_episode(0, return_env=10.0)

        slow = leader_scene(gap=30.0, dv=-5.0)
        slow_obs = observe(slow, cfg)
        for episode in range(1, 4):
            rec = eng.recommend(slow, slow_obs)
            assert rec.action == Action.TURN_LEFT
            eng.observe_step(episode, 0, slow, slow_obs, int(Action.DECELERATE), rec)
            eng.end_episode(episode, return_env=50.0)

        adapted = eng.recommend(slow, slow_obs)
        assert adapted.action == Action.DECELERATE
        assert adapted.confidence == 0.8
        eng.close()

    def test_validation(self):
        with pytest.raises(ConfigError):
            FusionConfig(advisor="psychic").validate()
        with pytest.raises(ConfigError):
            FusionConfig(advisor="replay").validate()
        with pytest.raises(ConfigError):
            FusionConfig(mode="masking").validate()


class TestReplayAdvisor:

    def test_plays_back_in_order(self, tmp_path):
        path = tmp_path / "recs.jsonl"
        path.write_text('{"action": "ACCELERATE", "confidence": 0.8}\n'
                        '{"action": "TURN_LEFT"}\n')
        adv = ReplayAdvisor(path)
        first = adv.recommend(None, None)
        second = adv.recommend(None, None)
        assert first.action == Action.ACCELERATE and first.confidence == 0.8
        assert second.action == Action.TURN_LEFT and second.confidence == 1.0
        assert adv.recommend(None, None) is None

    def test_unknown_action_yields_none(self, tmp_path):
        path = tmp_path / "recs.jsonl"
        path.write_text('{"action": "WARP"}\n')
        assert ReplayAdvisor(path).recommend(None, None) is None


class TestBridgeAdvisor:

    def bridge(self, mode, deadline_ms=2000.0):
        cmd = [sys.executable, str(FAKE_BRIDGE), mode]
        return BridgeAdvisor(cmd, SimConfig(), deadline_ms=deadline_ms)

    def state_and_obs(self):
        cfg = SimConfig()
        state = make_scene(ego_at(speed=25.0), [])
        return state, observe(state, cfg)

    def test_round_trip(self):
        adv = self.bridge("echo")
        state, obs = self.state_and_obs()
        rec = adv.recommend(state, obs)
        assert rec is not None
        assert rec.action == Action.MAINTAIN
        assert rec.confidence == 0.9
        adv.close()
        assert adv.proc.wait(timeout=5.0) == 0

    def test_deadline_then_resync(self):
        adv = self.bridge("first-slow", deadline_ms=60.0)
        state, obs = self.state_and_obs()
        assert adv.recommend(state, obs) is None  # stalls past the deadline
        adv.deadline_ms = 2000.0
        rec = adv.recommend(state, obs)  # stale reply discarded, fresh one used
        assert rec is not None and rec.action == Action.MAINTAIN
        adv.close()

    def test_error_response_degrades_to_none(self):
        adv = self.bridge("error")
        state, obs = self.state_and_obs()
        assert adv.recommend(state, obs) is None
        adv.close()

    def test_garbage_line_degrades_to_none(self):
        adv = self.bridge("garbage")
        state, obs = self.state_and_obs()
        assert adv.recommend(state, obs) is None
        rec = adv.recommend(state, obs)
        assert rec is not None and rec.action == Action.MAINTAIN
        adv.close()

    def test_dead_process_never_raises(self):
        adv = self.bridge("echo")
        adv.proc.kill()
        adv.proc.wait()
        state, obs = self.state_and_obs()
        assert adv.recommend(state, obs) is None
