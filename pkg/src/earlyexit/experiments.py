"""Pipeline helpers and desk-scale sweeps shared by the CLI and the acceptance suite.

Each sweep returns plain rows (lists) so that the CSV writer controls the
exact byte layout; numbers are formatted with fixed precision for
reproducible files.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .calibration import calibrate, profile
from .config import ExperimentConfig
from .data import (
    BlobTask, Dataset, UserDistribution, UserSplit, gaussian_popularity, load_idx_pair, partition_users,
    sample_user_dataset,
)
from .inference import DEFAULT_SECONDS_PER_FLOP, ExitPolicy, infer_batch
from .model import ModelGraph, batched_exit_logits, build_reference_model
from .orchestrator import DeviceSimulator, DevicePluggedIn, Orchestrator, SampleArrived
from .tensor_core import ConfigError
from .training import personalise_exits, train_global, training_flops

log = logging.getLogger(__name__)


@dataclass
class DataBundle:
    train: Dataset
    test: Optional[Dataset]
    pool: Dataset
    users: List[UserSplit]
    task: Optional[BlobTask] = None


def build_data(cfg: ExperimentConfig) -> DataBundle:
    """Global train/test sets plus per-user splits drawn from a separate pool."""
    seed = cfg.seed
    if cfg.get("data", "source") == "idx":
        k = cfg.get_int("data", "num_classes")
        train = load_idx_pair(cfg.get("data", "train_images"), cfg.get("data", "train_labels"), k)
        pool = load_idx_pair(cfg.get("data", "pool_images"), cfg.get("data", "pool_labels"), k)
        test, task = None, None
    else:
        task = BlobTask(cfg.get_int("data", "num_classes"), cfg.image_shape(), cfg.get_int("data", "blobs"),
                        cfg.get_float("data", "noise"), cfg.get_int("data", "shift"), seed=seed)
        train = task.sample(cfg.get_int("data", "n_train"), seed=seed + 10)
        test = task.sample(cfg.get_int("data", "n_test"), seed=seed + 11)
        pool = task.sample(cfg.get_int("data", "pool_size"), seed=seed + 12)
    users = partition_users(pool, cfg.get_int("users", "n_users"), cfg.get_int("users", "samples_per_user"),
                            cfg.get_float("users", "sigma"), seed=seed + 13,
                            test_per_user=cfg.get_int("users", "test_per_user"),
                            calib_fraction=cfg.get_float("users", "calib_fraction"))
    return DataBundle(train, test, pool, users, task)


def build_model(cfg: ExperimentConfig, input_shape, num_classes) -> ModelGraph:
    return build_reference_model(tuple(input_shape), num_classes, M=cfg.get_int("model", "num_exits"),
                                 seed=cfg.seed + 1, widths=tuple(cfg.get_ints("model", "widths")),
                                 pool_after=tuple(cfg.get_ints("model", "pool_after")))


def train_global_model(cfg: ExperimentConfig, train: Dataset):
    model = build_model(cfg, train.shape, train.num_classes)
    return train_global(model, train, cfg.global_train())


# evaluation helpers -----------------------------------------------------------------

def exit_accuracies(model: ModelGraph, data: Dataset) -> List[float]:
    """Accuracy of every exit 1..M+1 against the labels of ``data``."""
    if data.labels is None:
        raise ConfigError("accuracy needs labelled data")
    logits = batched_exit_logits(model, data.images)
    return [float(np.mean(np.argmax(z, axis=1) == data.labels)) for z in logits]


def final_agreement(model: ModelGraph, data: Dataset) -> List[float]:
    """Top-1 agreement of every exit with the final exit."""
    logits = batched_exit_logits(model, data.images)
    final = np.argmax(logits[-1], axis=1)
    return [float(np.mean(np.argmax(z, axis=1) == final)) for z in logits]


def personalise_user(model: ModelGraph, user: UserSplit, cfg: ExperimentConfig, mode: Optional[str] = None,
                     n_samples: Optional[int] = None):
    pcfg = cfg.personalisation(mode)
    train = user.train
    if n_samples is not None:
        if n_samples > len(train):
            raise ConfigError(f"user {user.user} has {len(train)} training samples, {n_samples} requested")
        train = train.subset(np.arange(n_samples))
    if not pcfg.needs_labels:
        train = train.unlabelled()
    return personalise_exits(model, train, None, pcfg)


def profile_user(model: ModelGraph, data: Dataset, cfg: ExperimentConfig):
    return profile(model, data, cfg.thresholds, latency_mode=cfg.get("calibration", "latency_mode"),
                   seconds_per_flop=cfg.get_float("calibration", "seconds_per_flop"),
                   loss_mode=cfg.get("orchestrator", "loss_mode"),
                   T=cfg.get_float("personalisation", "temperature"))


def calibrate_report(report, cfg: ExperimentConfig):
    return calibrate(report, cfg.get_float("calibration", "tolerance"), cfg.get_float("calibration", "min_exit_rate"),
                     cfg.get_float("calibration", "max_accuracy_gap"),
                     smoothing=cfg.get_float("orchestrator", "ewma_smoothing"))


# sweeps -----------------------------------------------------------------------------

def per_exit_accuracy(model: ModelGraph, users: Sequence[UserSplit], cfg: ExperimentConfig,
                      modes: Sequence[str]) -> List[list]:
    """Rows (user, exit_id, mode, accuracy, final_agreement) on each user's held-out data."""
    rows = []
    for user in users:
        variants = [("global", model)] + [(m, personalise_user(model, user, cfg, m)[0]) for m in modes]
        for name, m in variants:
            acc, agree = exit_accuracies(m, user.test), final_agreement(m, user.test)
            rows += [[user.user, e, name, acc[e - 1], agree[e - 1]] for e in range(1, m.M + 2)]
    return rows


def accuracy_vs_samples(model: ModelGraph, users: Sequence[UserSplit], cfg: ExperimentConfig,
                        counts: Sequence[int], modes: Sequence[str]) -> List[list]:
    """Rows (n_samples, exit_id, mode, accuracy), accuracy averaged over users."""
    rows = []
    for mode in modes:
        for n in counts:
            accs = np.mean([exit_accuracies(personalise_user(model, u, cfg, mode, n)[0], u.test) for u in users],
                           axis=0)
            rows += [[n, e, mode, float(a)] for e, a in enumerate(accs, 1)]
            log.info("accuracy-vs-samples: %s n=%d done", mode, n)
    return rows


def threshold_sweep(model: ModelGraph, data: Dataset, thresholds: Sequence[float],
                    selected: Optional[Sequence[int]] = None,
                    seconds_per_flop: float = DEFAULT_SECONDS_PER_FLOP) -> List[list]:
    """Rows (threshold, accuracy, mean_latency_us, mean_flops) from early-exit inference."""
    selected = tuple(range(1, model.M + 1)) if selected is None else tuple(selected)
    rows = []
    for thr in thresholds:
        _, s = infer_batch(model, data.images, ExitPolicy(selected, thr), labels=data.labels,
                           seconds_per_flop=seconds_per_flop)
        rows.append([thr, s.accuracy, s.mean_latency * 1e6, s.mean_flops])
    return rows


def accuracy_vs_latency(model: ModelGraph, user: UserSplit, cfg: ExperimentConfig, mode: str) -> List[list]:
    """Rows (model, threshold, accuracy, mean_latency_us, mean_flops) for the global
    and personalised models on one user's held-out data."""
    spf = cfg.get_float("calibration", "seconds_per_flop")
    pers = personalise_user(model, user, cfg, mode)[0]
    rows = []
    for name, m in (("global", model), (mode, pers)):
        rows += [[name] + r for r in threshold_sweep(m, user.test, cfg.thresholds, seconds_per_flop=spf)]
    return rows


def exit_costs(model: ModelGraph) -> List[list]:
    """Rows (exit_id, flops, params, head_params, flops_fraction, params_fraction)."""
    total_f, total_p = model.backbone_flops(), model.backbone_params()
    rows = []
    for e in range(1, model.M + 2):
        f, p = model.exit_flops(e), model.exit_params(e)
        rows.append([e, f, p, model.head_params(e), f / total_f, p / total_p])
    return rows


def training_cost(model: ModelGraph, n_samples: int) -> List[list]:
    """Rows (exit_id, full_flops, exits_only_flops, speedup) for personalising one exit."""
    full = training_flops(model, "full", n_samples)
    rows = []
    for e in range(1, model.M + 1):
        part = training_flops(model, "exits_only", n_samples, exits=[e])
        rows.append([e, full, part, full / part])
    return rows


# orchestrator simulation ---------------------------------------------------------------

def shifted_distribution(dist: UserDistribution, offset: Optional[int] = None) -> UserDistribution:
    """Same spread, centre moved ``offset`` classes around the ring (default half-way)."""
    k = dist.num_classes
    offset = k // 2 if offset is None else offset
    centre = (dist.center + offset) % k
    return UserDistribution(gaussian_popularity(k, centre, dist.sigma), centre, dist.sigma)


def event_stream(pool: Dataset, dist: UserDistribution, n: int, seed: int, shift_at: int = -1) -> Dataset:
    """``n`` user samples; from index ``shift_at`` on they follow the re-centred distribution."""
    if not 0 <= shift_at < n:
        return sample_user_dataset(pool, dist, n, seed)
    before = sample_user_dataset(pool, dist, shift_at, seed) if shift_at else None
    after = sample_user_dataset(pool, shifted_distribution(dist), n - shift_at, seed + 1)
    if before is None:
        return after
    return Dataset(np.concatenate([before.images, after.images]),
                   np.concatenate([before.labels, after.labels]), pool.num_classes)


def calibrated_orchestrator(model: ModelGraph, user: UserSplit, cfg: ExperimentConfig, personalise: bool = True):
    """Personalise on the user's training split, calibrate on its calibration split."""
    if user.calib is None:
        raise ConfigError("user has no calibration split; set [users] calib_fraction > 0")
    if personalise:
        model = personalise_user(model, user, cfg)[0]
    result = calibrate_report(profile_user(model, user.calib, cfg), cfg)
    return Orchestrator.from_calibration(model, cfg.orchestrator(), result), result


def simulate_stream(orch: Orchestrator, stream: Dataset, cfg: ExperimentConfig, plug_every: int):
    """Feed ``stream`` through a :class:`DeviceSimulator`; returns (simulator, summary rows)."""
    sim = DeviceSimulator(orch, cfg.personalisation(), calib_fraction=cfg.get_float("users", "calib_fraction"),
                          tolerance=cfg.get_float("calibration", "tolerance"),
                          min_exit_rate=cfg.get_float("calibration", "min_exit_rate"),
                          max_accuracy_gap=cfg.get_float("calibration", "max_accuracy_gap"),
                          thresholds=cfg.thresholds)
    correct, flops, first_drift = 0, 0, -1
    with_labels = orch.cfg.loss_mode == "hard_labels" or sim.pers_cfg.needs_labels
    for j in range(len(stream)):
        label = int(stream.labels[j]) if with_labels else None
        acts = sim.feed(SampleArrived(stream.images[j], label))
        res = acts[0][1]
        correct += int(res.predicted == stream.labels[j])
        flops += res.flops
        if first_drift < 0 and any(a[0] == "raise_threshold" for a in acts):
            first_drift = j
        if (j + 1) % plug_every == 0:
            sim.feed(DevicePluggedIn())
    st = orch.state
    rows = [
        ["events", len(stream)], ["explorations", st.explorations], ["drift_detections", st.drift_detections],
        ["first_drift_sample", first_drift], ["personalisations", sim.personalisations],
        ["accuracy", correct / len(stream)], ["mean_inference_flops", flops / len(stream)],
        ["exploration_flops", st.exploration_flops], ["final_threshold", st.policy.thr_conf],
    ]
    return sim, rows


# output -----------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def write_rows(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def series_by(rows, key_col: int, x_col: int, y_col: int, where=None) -> Dict[str, tuple]:
    """Group rows into plot series keyed by ``rows[key_col]``."""
    out: Dict[str, tuple] = {}
    for r in rows:
        if where is not None and not where(r):
            continue
        xs, ys = out.setdefault(str(r[key_col]), ([], []))
        xs.append(float(r[x_col]))
        ys.append(float(r[y_col]))
    return out
