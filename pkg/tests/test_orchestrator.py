import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from earlyexit.calibration import calibrate, profile
from earlyexit.data import Dataset
from earlyexit.inference import ExitPolicy, policy_exit_flops
from earlyexit.orchestrator import (
    EXPLORATION_ARMED, INFERENCE, PERSONALISATION_SCHEDULED, DeviceSimulator, DevicePluggedIn,
    Orchestrator, OrchestratorConfig, OrchestratorState, SampleArrived, TimerTick, detect_drift,
    should_personalise,
)
from earlyexit.tensor_core import ConfigError
from earlyexit.training import PersonalisationConfig


def stream(n, seed=0):
    rng = np.random.default_rng(seed)
    return [SampleArrived(x) for x in rng.random((n, 1, 12, 12)).astype(np.float32)]


def actions_of(orch, events):
    return [[a[0] for a in orch.step(ev)] for ev in events]


# config ------------------------------------------------------------------------------

@pytest.mark.parametrize("kw", [
    {"p_expl": 1.5}, {"thr_conf_active": 0.9, "thr_conf_raised": 0.8}, {"drift_factor": 0.0},
    {"drift_window": 0}, {"min_new_samples": 0}, {"ewma_smoothing": 0.0},
])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        OrchestratorConfig(**kw)


# drift detection ---------------------------------------------------------------------

def test_drift_equal_is_false_and_resets():
    assert detect_drift({1: 2.0}, {1: 2.0}, 0.2, 5, 3) == (False, 0)


def test_drift_fires_on_window_th_call():
    base, d, w = {1: 1.0, 2: 1.0}, 0.2, 4
    high = {1: 1.0 * (1 + d) * 1.01, 2: 0.5}
    counter, fired = 0, []
    for _ in range(w):
        flag, counter = detect_drift(high, base, d, w, counter)
        fired.append(flag)
    assert fired == [False] * (w - 1) + [True]


def test_drift_interrupted_run_resets():
    base, d, w = {1: 1.0}, 0.2, 4
    counter = 0
    for _ in range(w - 1):
        flag, counter = detect_drift({1: 1.3}, base, d, w, counter)
        assert not flag
    flag, counter = detect_drift({1: 1.0}, base, d, w, counter)
    assert (flag, counter) == (False, 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=60), st.integers(1, 8))
def test_drift_is_run_length(highs, w):
    counter, run = 0, 0
    for h in highs:
        flag, counter = detect_drift({1: 2.0 if h else 1.0}, {1: 1.0}, 0.2, w, counter)
        run = run + 1 if h else 0
        assert flag == (run >= w)
        assert counter == run


# personalisation trigger ---------------------------------------------------------------

def _state(new=0, active=0.8, calibrated=0.8):
    return OrchestratorState(INFERENCE, ExitPolicy((1,), active), calibrated, {}, {}, new_samples=new)


def test_should_personalise_cases():
    cfg = OrchestratorConfig(min_new_samples=100, deviation_limit=0.1)
    assert not should_personalise(_state(), cfg)
    assert should_personalise(_state(new=100), cfg)
    assert not should_personalise(_state(new=99), cfg)
    assert should_personalise(_state(active=1.0, calibrated=0.8), cfg)


# exploration ---------------------------------------------------------------------------

def test_no_exploration_when_p_zero(tiny_model):
    orch = Orchestrator(tiny_model, OrchestratorConfig(p_expl=0.0, min_new_samples=10**6))
    results = []
    for ev in stream(50):
        acts = orch.step(ev)
        assert [a[0] for a in acts] == ["infer"]
        results.append(acts[0][1])
    assert orch.state.explorations == 0
    assert orch.state.exploration_flops == 0
    assert orch.state.inference_flops == sum(r.flops for r in results)


def test_every_sample_explores_when_p_one(tiny_model):
    orch = Orchestrator(tiny_model, OrchestratorConfig(p_expl=1.0, min_new_samples=10**6), baselines={
        1: 1e9, 2: 1e9, 3: 1e9})
    full = policy_exit_flops(tiny_model, orch.state.policy)[tiny_model.M + 1]
    for ev in stream(30):
        acts = orch.step(ev)
        assert [a[0] for a in acts] == ["infer", "explore"]
        r = acts[0][1]
        extra = full - r.flops
        assert r.flops + extra == tiny_model.backbone_flops() + sum(tiny_model.head_flops(e) for e in (1, 2, 3))
    assert orch.state.explorations == 30


def test_exploration_rate_binomial(tiny_model):
    n, p = 10_000, 0.1
    orch = Orchestrator(tiny_model, OrchestratorConfig(p_expl=p, min_new_samples=10**6, seed=4),
                        baselines={1: 1e9, 2: 1e9, 3: 1e9})
    x = np.random.default_rng(0).random((1, 12, 12)).astype(np.float32)
    taken = []
    for _ in range(n):
        taken.append(orch.step(SampleArrived(x))[0][1].exit_taken)
    sigma = np.sqrt(n * p * (1 - p))
    assert abs(orch.state.explorations - n * p) <= 3 * sigma
    costs = policy_exit_flops(tiny_model, orch.state.policy)
    # every sample is identical, so each exploration pays the same gap
    assert orch.state.exploration_flops == orch.state.explorations * (costs[tiny_model.M + 1] - costs[taken[0]])


def test_drift_raises_threshold_and_schedules_in_same_step(tiny_model):
    cfg = OrchestratorConfig(p_expl=1.0, drift_window=3, min_new_samples=10**6,
                             thr_conf_active=0.6, thr_conf_raised=0.9)
    orch = Orchestrator(tiny_model, cfg, baselines={1: 1e-6, 2: 1e-6, 3: 1e-6})
    acts = actions_of(orch, stream(3))
    assert acts[:2] == [["infer", "explore"]] * 2
    assert acts[2] == ["infer", "explore", "raise_threshold", "schedule_personalisation"]
    assert orch.state.policy.thr_conf == 0.9
    assert orch.state.phase == PERSONALISATION_SCHEDULED
    assert orch.step(DevicePluggedIn()) == [("run_personalisation",), ("run_profile",), ("run_calibration",)]


def test_exploration_armed_phase(tiny_model):
    cfg = OrchestratorConfig(p_expl=1.0, drift_window=50, min_new_samples=10**6)
    orch = Orchestrator(tiny_model, cfg, baselines={1: 1e-6, 2: 1e-6, 3: 1e-6})
    orch.step(stream(1)[0])
    assert orch.state.phase == EXPLORATION_ARMED


def test_threshold_never_lowered(tiny_model):
    cfg = OrchestratorConfig(p_expl=1.0, drift_window=1, min_new_samples=10**6, thr_conf_active=0.7,
                             thr_conf_raised=0.7)
    orch = Orchestrator(tiny_model, cfg, baselines={1: 1e-6, 2: 1e-6, 3: 1e-6})
    for ev in stream(5):
        orch.step(ev)
        assert orch.state.policy.thr_conf >= cfg.thr_conf_active


def test_plugged_in_without_schedule_does_nothing(tiny_model):
    orch = Orchestrator(tiny_model, OrchestratorConfig(min_new_samples=5, p_expl=0.0))
    assert orch.step(DevicePluggedIn()) == []
    assert orch.state.phase == INFERENCE
    acts = actions_of(orch, stream(5))
    assert acts[-1] == ["infer", "schedule_personalisation"]
    assert orch.step(TimerTick()) == []
    assert orch.step(DevicePluggedIn())[0] == ("run_personalisation",)


def test_malformed_event_rejected(tiny_model):
    orch = Orchestrator(tiny_model, OrchestratorConfig())
    with pytest.raises(ValueError):
        orch.step("sample")


def test_determinism(tiny_model, tmp_path):
    def run():
        cfg = OrchestratorConfig(p_expl=0.3, drift_window=2, min_new_samples=40, seed=9)
        orch = Orchestrator(tiny_model, cfg, baselines={1: 0.5, 2: 0.5, 3: 0.5})
        out = []
        for k, ev in enumerate(stream(60, seed=1)):
            acts = orch.step(ev if k % 17 else DevicePluggedIn())
            out.append((orch.state.phase, [a[0] for a in acts]))
        path = tmp_path / f"log{len(list(tmp_path.iterdir()))}.csv"
        orch.write_log(path)
        return out, path.read_bytes()

    a, b = run(), run()
    assert a == b
    header = a[1].decode().splitlines()[0]
    assert header == "step,event,phase,action,active_thr,drift_flag,new_sample_count"


def test_calibration_resets_state_and_baselines_hold(tiny_model):
    rng = np.random.default_rng(2)
    calib = Dataset(rng.random((120, 1, 12, 12)).astype(np.float32), None, 4)
    rep = profile(tiny_model, calib)
    result = calibrate(rep, tolerance=100.0, min_exit_rate=0.0, max_accuracy_gap=100.0)
    cfg = OrchestratorConfig(p_expl=1.0, min_new_samples=10**6)
    orch = Orchestrator.from_calibration(tiny_model, cfg, result)
    assert orch.state.baselines == result.baselines
    assert orch.state.new_samples == 0 and not orch.state.personalisation_scheduled
    # replaying the calibration set itself never signals drift
    for x in calib.images:
        acts = orch.step(SampleArrived(x))
        assert "schedule_personalisation" not in [a[0] for a in acts]
    assert orch.state.drift_detections == 0


def test_simulator_personalises_on_plug_in(tiny_model):
    rng = np.random.default_rng(3)
    cfg = OrchestratorConfig(p_expl=0.0, min_new_samples=30)
    orch = Orchestrator(tiny_model, cfg)
    sim = DeviceSimulator(orch, PersonalisationConfig.self_supervision(epochs=1, batch_size=8),
                          tolerance=100.0, min_exit_rate=0.0, max_accuracy_gap=100.0)
    for x in rng.random((30, 1, 12, 12)).astype(np.float32):
        sim.feed(SampleArrived(x))
    assert orch.state.personalisation_scheduled
    backbone = [t.copy() for t in tiny_model.backbone_tensors()]
    sim.feed(DevicePluggedIn())
    assert sim.personalisations == 1
    assert orch.model is not tiny_model
    assert all(np.array_equal(a, b) for a, b in zip(backbone, orch.model.backbone_tensors()))
    assert orch.state.new_samples == 0 and orch.state.phase == INFERENCE
    assert [a[0] for _, a in sim.history][-3:] == ["run_personalisation", "run_profile", "run_calibration"]


def test_simulator_requires_labels_for_hard_mode(tiny_model):
    orch = Orchestrator(tiny_model, OrchestratorConfig(p_expl=0.0, min_new_samples=4))
    sim = DeviceSimulator(orch, PersonalisationConfig.hard_labels(epochs=1))
    for ev in stream(4):
        sim.feed(ev)
    with pytest.raises(ConfigError):
        sim.feed(DevicePluggedIn())
