"""Run-time scheduler for the inference, exploration and personalisation phases.

The orchestrator consumes a stream of events and emits actions.  It never
trains or profiles by itself: ``run_personalisation``/``run_profile``/
``run_calibration`` actions are carried out by the caller (see
:class:`DeviceSimulator`), which then hands the new calibration back through
:meth:`Orchestrator.apply_calibration`.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .calibration import calibrate, exit_losses, profile
from .data import Dataset, split_holdout
from .inference import ExitPolicy, infer, policy_exit_flops
from .model import ModelGraph, forward_all_exits
from .tensor_core import ConfigError

INFERENCE = "Inference"
EXPLORATION_ARMED = "Exploration-armed"
PERSONALISATION_SCHEDULED = "Personalisation-scheduled"


@dataclass
class OrchestratorConfig:
    p_expl: float = 0.1
    thr_conf_active: float = 0.8
    thr_conf_raised: float = 0.95
    drift_factor: float = 0.2
    drift_window: int = 20
    min_new_samples: int = 2048
    deviation_limit: float = 0.1
    ewma_smoothing: float = 0.1
    loss_mode: str = "self_supervision"
    T: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.p_expl <= 1:
            raise ConfigError("p_expl must lie in [0, 1]")
        if not 0 <= self.thr_conf_active <= self.thr_conf_raised <= 1:
            raise ConfigError("need 0 <= thr_conf_active <= thr_conf_raised <= 1")
        if not self.drift_factor > 0 or self.drift_window < 1:
            raise ConfigError("need drift_factor > 0 and drift_window >= 1")
        if self.min_new_samples < 1 or self.deviation_limit < 0:
            raise ConfigError("need min_new_samples >= 1 and deviation_limit >= 0")
        if not 0 < self.ewma_smoothing <= 1:
            raise ConfigError("ewma_smoothing must lie in (0, 1]")


# events ---------------------------------------------------------------------------

@dataclass
class SampleArrived:
    x: np.ndarray
    label: Optional[int] = None
    name = "sample_arrived"


@dataclass
class DevicePluggedIn:
    name = "device_plugged_in"


@dataclass
class TimerTick:
    name = "timer_tick"


@dataclass
class OrchestratorState:
    phase: str
    policy: ExitPolicy
    thr_calibrated: float
    baselines: Dict[int, float]
    ewma: Dict[int, float]
    drift_counter: int = 0
    new_samples: int = 0
    buffer_x: List[np.ndarray] = field(default_factory=list)
    buffer_y: List[Optional[int]] = field(default_factory=list)
    personalisation_scheduled: bool = False
    drift_flag: bool = False
    steps: int = 0
    explorations: int = 0
    drift_detections: int = 0
    inference_flops: int = 0
    exploration_flops: int = 0


def detect_drift(ewma: Dict[int, float], baseline: Dict[int, float], delta: float, window: int,
                 counter: int) -> Tuple[bool, int]:
    """Count consecutive evaluations in which some exit's EWMA loss exceeds
    ``baseline * (1 + delta)``; drift once the run reaches ``window``."""
    high = any(ewma[e] > baseline[e] * (1.0 + delta) for e in baseline if e in ewma)
    counter = counter + 1 if high else 0
    return counter >= window, counter


def should_personalise(state: OrchestratorState, cfg: OrchestratorConfig) -> bool:
    return (state.new_samples >= cfg.min_new_samples
            or abs(state.policy.thr_conf - state.thr_calibrated) > cfg.deviation_limit)


class Orchestrator:
    def __init__(self, model: ModelGraph, cfg: OrchestratorConfig, selected_exits=None,
                 baselines: Optional[Dict[int, float]] = None):
        self.model = model
        self.cfg = cfg
        selected = tuple(range(1, model.M + 1)) if selected_exits is None else tuple(selected_exits)
        baselines = dict(baselines or {})
        self.state = OrchestratorState(INFERENCE, ExitPolicy(selected, cfg.thr_conf_active),
                                       cfg.thr_conf_active, baselines, dict(baselines))
        self.rng = np.random.default_rng(cfg.seed)
        self.log: List[dict] = []
        self._costs: Dict[Tuple, Dict[int, int]] = {}

    def _policy_costs(self) -> Dict[int, int]:
        key = (id(self.model), self.state.policy.selected_exits)
        if key not in self._costs:
            self._costs = {key: policy_exit_flops(self.model, self.state.policy)}
        return self._costs[key]

    @classmethod
    def from_calibration(cls, model, cfg: OrchestratorConfig, result):
        orch = cls(model, cfg, result.selected_exits, result.baselines)
        orch.apply_calibration(result)
        return orch

    def step(self, event) -> List[tuple]:
        st = self.state
        st.steps += 1
        if isinstance(event, SampleArrived):
            actions = self._on_sample(event)
        elif isinstance(event, DevicePluggedIn):
            actions = self._on_plugged_in()
        elif isinstance(event, TimerTick):
            actions = self._maybe_schedule()
        else:
            raise ValueError(f"unrecognised orchestrator event {event!r}")
        self.log.append({
            "step": st.steps, "event": event.name, "phase": st.phase,
            "actions": ";".join(a[0] for a in actions), "active_thr": st.policy.thr_conf,
            "drift_flag": int(st.drift_flag), "new_sample_count": st.new_samples,
        })
        return actions

    def _on_sample(self, ev: SampleArrived) -> List[tuple]:
        st, cfg = self.state, self.cfg
        x = np.asarray(ev.x)
        result = infer(self.model, x, st.policy, latency_mode="synthetic", costs=self._policy_costs())
        actions: List[tuple] = [("infer", result)]
        st.inference_flops += result.flops
        st.buffer_x.append(x)
        st.buffer_y.append(ev.label)
        st.new_samples += 1
        st.drift_flag = False
        # one draw per sample keeps the random stream independent of outcomes
        if self.rng.random() < cfg.p_expl:
            actions += self._explore(x, ev.label, result)
        actions += self._maybe_schedule()
        return actions

    def _explore(self, x, label, result) -> List[tuple]:
        st, cfg = self.state, self.cfg
        st.explorations += 1
        costs = self._policy_costs()
        st.exploration_flops += costs[self.model.M + 1] - costs[result.exit_taken]
        logits = [z.astype(np.float64) for z in forward_all_exits(self.model, x[None] if x.ndim == 3 else x)]
        labels = None if label is None else np.array([label])
        losses = exit_losses(logits, cfg.loss_mode, cfg.T, labels)[0]
        lam = cfg.ewma_smoothing
        for e in st.policy.selected_exits:
            prev = st.ewma.get(e, st.baselines.get(e, losses[e - 1]))
            st.ewma[e] = (1 - lam) * prev + lam * float(losses[e - 1])
        actions = [("explore", {e: float(losses[e - 1]) for e in st.policy.selected_exits})]
        drift, st.drift_counter = detect_drift(st.ewma, st.baselines, cfg.drift_factor, cfg.drift_window,
                                               st.drift_counter)
        if drift:
            st.drift_flag = True
            st.drift_detections += 1
            st.drift_counter = 0
            if st.policy.thr_conf < cfg.thr_conf_raised:
                st.policy = st.policy.with_threshold(cfg.thr_conf_raised)
                actions.append(("raise_threshold", cfg.thr_conf_raised))
            if not st.personalisation_scheduled:
                st.personalisation_scheduled = True
                actions.append(("schedule_personalisation",))
        self._update_phase()
        return actions

    def _maybe_schedule(self) -> List[tuple]:
        st = self.state
        if not st.personalisation_scheduled and should_personalise(st, self.cfg):
            st.personalisation_scheduled = True
            self._update_phase()
            return [("schedule_personalisation",)]
        self._update_phase()
        return []

    def _on_plugged_in(self) -> List[tuple]:
        if not self.state.personalisation_scheduled:
            return self._maybe_schedule()
        return [("run_personalisation",), ("run_profile",), ("run_calibration",)]

    def _update_phase(self):
        st = self.state
        if st.personalisation_scheduled:
            st.phase = PERSONALISATION_SCHEDULED
        elif st.drift_counter > 0:
            st.phase = EXPLORATION_ARMED
        else:
            st.phase = INFERENCE

    def apply_calibration(self, result, model: Optional[ModelGraph] = None):
        """Install a new calibration (and optionally a newly personalised model)."""
        st = self.state
        if model is not None:
            self.model = model
            self._costs = {}
        st.policy = ExitPolicy(result.selected_exits, result.thr_conf)
        st.thr_calibrated = result.thr_conf
        st.baselines = dict(result.baselines)
        st.ewma = dict(result.baselines)
        st.drift_counter = 0
        st.new_samples = 0
        st.buffer_x.clear()
        st.buffer_y.clear()
        st.personalisation_scheduled = False
        st.drift_flag = False
        self._update_phase()

    def buffered_dataset(self) -> Optional[Dataset]:
        st = self.state
        if not st.buffer_x:
            return None
        labels = None if any(y is None for y in st.buffer_y) else np.array(st.buffer_y)
        return Dataset(np.stack(st.buffer_x), labels, self.model.num_classes)

    def write_log(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            cols = ["step", "event", "phase", "action", "active_thr", "drift_flag", "new_sample_count"]
            w.writerow(cols)
            for r in self.log:
                w.writerow([r["step"], r["event"], r["phase"], r["actions"], f"{r['active_thr']:.2f}",
                            r["drift_flag"], r["new_sample_count"]])


class DeviceSimulator:
    """Drives an :class:`Orchestrator` and executes the actions it emits."""

    def __init__(self, orchestrator: Orchestrator, pers_cfg, calib_fraction: float = 0.2,
                 tolerance: float = 1.0, min_exit_rate: float = 0.05, max_accuracy_gap: float = 2.0,
                 thresholds=None):
        from .calibration import DEFAULT_GRID
        self.orch = orchestrator
        self.pers_cfg = pers_cfg
        self.calib_fraction = calib_fraction
        self.tolerance = tolerance
        self.min_exit_rate = min_exit_rate
        self.max_accuracy_gap = max_accuracy_gap
        self.thresholds = DEFAULT_GRID if thresholds is None else thresholds
        self.personalisations = 0
        self.history: List[Tuple[int, tuple]] = []

    def feed(self, event) -> List[tuple]:
        actions = self.orch.step(event)
        for a in actions:
            if a[0] != "infer":
                self.history.append((self.orch.state.steps, a))
        if any(a[0] == "run_personalisation" for a in actions):
            self._personalise()
        return actions

    def _personalise(self):
        from .training import personalise_exits
        orch = self.orch
        data = orch.buffered_dataset()
        if data is None or len(data) < 2:
            return
        if self.pers_cfg.needs_labels and data.labels is None:
            raise ConfigError("hard-label personalisation scheduled but buffered samples lack labels")
        seed = self.pers_cfg.seed + self.personalisations
        keep, hold = split_holdout(len(data), self.calib_fraction, seed)
        train, calib = data.subset(keep), data.subset(hold)
        model, _ = personalise_exits(orch.model, train, None, self.pers_cfg)
        report = profile(model, calib, self.thresholds, loss_mode=orch.cfg.loss_mode, T=orch.cfg.T)
        result = calibrate(report, self.tolerance, self.min_exit_rate, self.max_accuracy_gap,
                           smoothing=orch.cfg.ewma_smoothing)
        orch.apply_calibration(result, model)
        self.personalisations += 1
