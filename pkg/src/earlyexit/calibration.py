"""Per-exit profiling, Pareto analysis and confidence-threshold calibration.

All per-threshold statistics are derived from confidences stored during a
single forward pass over the calibration set.
"""
from __future__ import annotations

import configparser
import csv
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .inference import DEFAULT_SECONDS_PER_FLOP, choose_exits
from .model import ModelGraph
from .tensor_core import ConfigError, forward_sequence, log_softmax, softmax

DEFAULT_GRID = tuple(round(0.05 * k, 2) for k in range(21))
HARD_LABELS = "hard_labels"
FINAL_AS_TRUTH = "final_exit_as_truth"


def policy_costs(selected: Sequence[int], exit_blocks: Sequence[int], block_costs: Sequence[float],
                 head_costs: Sequence[float]) -> Dict[int, float]:
    """Cost of leaving at each exit when every selected head on the way is evaluated.

    ``exit_blocks``/``head_costs`` are indexed by exit ordinal - 1 and include
    the final exit as the last entry.
    """
    cum = np.cumsum(block_costs)
    out = {}
    heads = 0.0
    for e in selected:
        heads += head_costs[e - 1]
        out[e] = cum[exit_blocks[e - 1]] + heads
    final = len(head_costs)
    out[final] = cum[-1] + heads + head_costs[-1]
    return out


@dataclass
class ThresholdStats:
    threshold: float
    exit_rates: Dict[int, float]
    accuracy: float
    mean_latency: float
    mean_flops: float
    conditional_accuracy: Dict[int, float]


@dataclass
class ProfileReport:
    """Per-exit and per-threshold statistics from one pass over a calibration set.

    Exit ordinals run 1..M+1.  ``confidences``, ``predictions`` and ``losses``
    hold per-sample values for every exit, so any threshold or exit subset can
    be re-evaluated without touching the model.
    """

    reference_mode: str
    confidences: np.ndarray          # (N, M+1) top-1 softmax
    predictions: np.ndarray          # (N, M+1)
    reference: np.ndarray            # (N,) labels or final-exit predictions
    losses: np.ndarray               # (N, M) exit loss relative to the final exit
    exit_blocks: List[int]
    block_flops: List[int]
    head_flops: List[int]
    block_latency: List[float]
    head_latency: List[float]
    params: List[int]
    thresholds: Tuple[float, ...] = DEFAULT_GRID
    selected_exits: Optional[Tuple[int, ...]] = None  # None: every early exit
    per_threshold: List[ThresholdStats] = field(default_factory=list)

    def __post_init__(self):
        if self.selected_exits is None:
            self.selected_exits = tuple(range(1, self.num_exits))
        self.selected_exits = tuple(self.selected_exits)
        if not self.per_threshold:
            self.per_threshold = [self.stats_at(t) for t in self.thresholds]

    @property
    def num_exits(self) -> int:
        return self.confidences.shape[1]

    @property
    def final_exit(self) -> int:
        return self.num_exits

    def exit_flops(self, i: int) -> int:
        """Standalone FLOPs of exit i (its backbone prefix plus its own head)."""
        return int(sum(self.block_flops[:self.exit_blocks[i - 1] + 1]) + self.head_flops[i - 1])

    def exit_latency(self, i: int) -> float:
        return float(sum(self.block_latency[:self.exit_blocks[i - 1] + 1]) + self.head_latency[i - 1])

    def exit_accuracy(self, i: int) -> float:
        return float(np.mean(self.predictions[:, i - 1] == self.reference))

    def mean_confidence(self, i: int) -> float:
        return float(np.mean(self.confidences[:, i - 1]))

    def mean_loss(self, i: int) -> float:
        return float(np.mean(self.losses[:, i - 1]))

    @property
    def reference_accuracy(self) -> float:
        return self.exit_accuracy(self.final_exit)

    def exits_taken(self, thr: float, selected: Optional[Sequence[int]] = None) -> np.ndarray:
        selected = self.selected_exits if selected is None else tuple(selected)
        conf = self.confidences[:, [e - 1 for e in selected]]
        return choose_exits(conf, thr, selected, self.final_exit)

    def stats_at(self, thr: float, selected: Optional[Sequence[int]] = None) -> ThresholdStats:
        selected = self.selected_exits if selected is None else tuple(selected)
        taken = self.exits_taken(thr, selected)
        n = len(taken)
        pred = self.predictions[np.arange(n), taken - 1]
        correct = pred == self.reference
        flops = policy_costs(selected, self.exit_blocks, self.block_flops, self.head_flops)
        lat = policy_costs(selected, self.exit_blocks, self.block_latency, self.head_latency)
        exits = list(selected) + [self.final_exit]
        rates, cond = {}, {}
        for e in exits:
            mask = taken == e
            rates[e] = float(mask.mean())
            cond[e] = float(correct[mask].mean()) if mask.any() else float("nan")
        return ThresholdStats(
            threshold=float(thr),
            exit_rates=rates,
            accuracy=float(correct.mean()),
            mean_latency=float(sum(rates[e] * lat[e] for e in exits)),
            mean_flops=float(sum(rates[e] * flops[e] for e in exits)),
            conditional_accuracy=cond,
        )

    def restrict(self, selected: Sequence[int]) -> "ProfileReport":
        """Same measurements, statistics recomputed for a different selected-exit set."""
        return ProfileReport(
            self.reference_mode, self.confidences, self.predictions, self.reference, self.losses,
            self.exit_blocks, self.block_flops, self.head_flops, self.block_latency, self.head_latency,
            self.params, self.thresholds, tuple(selected),
        )

    # serialisation ---------------------------------------------------------------
    def write_exit_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["exit_id", "flops", "params", "latency_us", "accuracy", "mean_confidence", "mean_loss"])
            for i in range(1, self.num_exits + 1):
                loss = "" if i == self.final_exit else f"{self.mean_loss(i):.6f}"
                w.writerow([i, self.exit_flops(i), self.params[i - 1], f"{self.exit_latency(i) * 1e6:.3f}",
                            f"{self.exit_accuracy(i):.6f}", f"{self.mean_confidence(i):.6f}", loss])

    def write_threshold_csv(self, path):
        exits = list(self.selected_exits) + [self.final_exit]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["threshold", "accuracy", "mean_latency_us", "mean_flops"]
                       + [f"rate_exit_{e}" for e in exits])
            for s in self.per_threshold:
                w.writerow([f"{s.threshold:.2f}", f"{s.accuracy:.6f}", f"{s.mean_latency * 1e6:.3f}",
                            f"{s.mean_flops:.1f}"] + [f"{s.exit_rates[e]:.6f}" for e in exits])


def exit_losses(exit_logits: Sequence[np.ndarray], loss_mode: str = "self_supervision", T: float = 4.0,
                labels=None) -> np.ndarray:
    """Per-sample loss of every early exit relative to the final exit, shape (N, M).

    ``self_supervision`` uses cross-entropy against the final exit's top-1,
    ``self_distillation`` the temperature-scaled KL, ``hard_labels`` plain
    cross-entropy against the labels.
    """
    final = exit_logits[-1].astype(np.float64)
    cols = []
    for z in exit_logits[:-1]:
        z = z.astype(np.float64)
        if loss_mode == "self_distillation":
            lt = log_softmax(final, T)
            cols.append(np.maximum(T * T * np.sum(np.exp(lt) * (lt - log_softmax(z, T)), axis=1), 0.0))
        else:
            target = labels if (loss_mode == "hard_labels" and labels is not None) else np.argmax(final, axis=1)
            cols.append(-log_softmax(z)[np.arange(len(z)), target])
    return np.stack(cols, axis=1) if cols else np.zeros((len(final), 0))


def profile(model: ModelGraph, calib_set, thresholds: Sequence[float] = DEFAULT_GRID,
            reference_mode: Optional[str] = None, latency_mode: str = "synthetic",
            seconds_per_flop: float = DEFAULT_SECONDS_PER_FLOP, loss_mode: str = "self_supervision",
            T: float = 4.0, batch_size: int = 256, selected_exits: Optional[Sequence[int]] = None) -> ProfileReport:
    """Run the calibration set through every exit once and collect statistics."""
    if calib_set is None or len(calib_set) == 0:
        raise ConfigError("calibration set is empty")
    if any(not 0 <= t <= 1 for t in thresholds):
        raise ConfigError("thresholds must lie in [0, 1]")
    labels = calib_set.labels
    if reference_mode is None:
        reference_mode = HARD_LABELS if labels is not None else FINAL_AS_TRUTH
    if reference_mode == HARD_LABELS and labels is None:
        raise ConfigError("hard-label reference requested but calibration set is unlabelled")

    images = calib_set.images
    nb = len(model.blocks)
    block_t = np.zeros(nb)
    head_t = np.zeros(model.M + 1)
    by_block = {}
    for n, ex in enumerate(model.exits, 1):
        by_block.setdefault(ex.block, []).append(n)
    logits = [[] for _ in range(model.M + 1)]
    for s in range(0, len(images), batch_size):
        h = images[s:s + batch_size]
        model.forward_samples += len(h)
        for b, block in enumerate(model.blocks):
            t0 = time.perf_counter()
            h, _ = forward_sequence(block, h, need_cache=False)
            block_t[b] += time.perf_counter() - t0
            for i in by_block.get(b, ()):
                t0 = time.perf_counter()
                out, _ = forward_sequence(model.exits[i - 1].layers, h, need_cache=False)
                head_t[i - 1] += time.perf_counter() - t0
                logits[i - 1].append(out)
        t0 = time.perf_counter()
        out, _ = forward_sequence(model.final_head, h, need_cache=False)
        head_t[-1] += time.perf_counter() - t0
        logits[-1].append(out)
    logits = [np.concatenate(z) for z in logits]

    probs = [softmax(z.astype(np.float64)) for z in logits]
    conf = np.stack([p.max(axis=1) for p in probs], axis=1)
    pred = np.stack([np.argmax(p, axis=1) for p in probs], axis=1)
    reference = labels.copy() if reference_mode == HARD_LABELS else pred[:, -1].copy()
    losses = exit_losses(logits, loss_mode, T, labels)

    block_flops = model.block_flops()
    head_flops = [model.head_flops(i) for i in range(1, model.M + 2)]
    if latency_mode == "wall":
        block_lat = list(block_t / len(images))
        head_lat = list(head_t / len(images))
    elif latency_mode == "synthetic":
        block_lat = [f * seconds_per_flop for f in block_flops]
        head_lat = [f * seconds_per_flop for f in head_flops]
    else:
        raise ConfigError(f"unknown latency mode {latency_mode!r}")
    return ProfileReport(
        reference_mode, conf, pred, reference, losses,
        [model.exit_block(i) for i in range(1, model.M + 2)], block_flops, head_flops,
        block_lat, head_lat, [model.exit_params(i) for i in range(1, model.M + 2)],
        tuple(float(t) for t in thresholds), None if selected_exits is None else tuple(selected_exits),
    )


def pareto_front(points: Sequence[Tuple[float, float]]) -> List[int]:
    """Indices of non-dominated (latency, accuracy) points, sorted by latency.

    Lower latency and higher accuracy are better.  Exact duplicates keep the
    first occurrence.
    """
    if not len(points):
        raise ConfigError("pareto_front needs at least one point")
    order = sorted(range(len(points)), key=lambda k: (points[k][0], -points[k][1], k))
    keep, best = [], -np.inf
    for k in order:
        if points[k][1] > best:
            keep.append(k)
            best = points[k][1]
    return keep


@dataclass
class CalibrationResult:
    thr_conf: float
    selected_exits: Tuple[int, ...]
    expected_accuracy: float
    mean_latency: float
    mean_flops: float
    reference_accuracy: float
    pareto: List[Tuple[float, float, float]]  # (latency, accuracy, threshold)
    baselines: Dict[int, float] = field(default_factory=dict)

    def write_summary(self, path):
        cp = configparser.ConfigParser()
        cp["calibration"] = {
            "thr_conf": f"{self.thr_conf:.2f}",
            "selected_exits": " ".join(map(str, self.selected_exits)),
            "expected_accuracy": f"{self.expected_accuracy:.6f}",
            "mean_latency_us": f"{self.mean_latency * 1e6:.3f}",
            "mean_flops": f"{self.mean_flops:.1f}",
            "reference_accuracy": f"{self.reference_accuracy:.6f}",
        }
        cp["baselines"] = {f"exit_{e}": repr(float(v)) for e, v in sorted(self.baselines.items())}
        with open(path, "w") as f:
            cp.write(f)

    @classmethod
    def read_summary(cls, path) -> "CalibrationResult":
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise FileNotFoundError(path)
        c = cp["calibration"]
        base = {int(k.split("_")[1]): float(v) for k, v in cp["baselines"].items()} if "baselines" in cp else {}
        return cls(c.getfloat("thr_conf"), tuple(int(x) for x in c["selected_exits"].split()),
                   c.getfloat("expected_accuracy"), c.getfloat("mean_latency_us") / 1e6,
                   c.getfloat("mean_flops"), c.getfloat("reference_accuracy"), [], base)

    def write_pareto_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["threshold", "accuracy", "mean_latency_us"])
            for lat, acc, thr in self.pareto:
                w.writerow([f"{thr:.2f}", f"{acc:.6f}", f"{lat * 1e6:.3f}"])


def calibrate_threshold(report: ProfileReport, tolerance: float = 1.0) -> CalibrationResult:
    """Smallest grid threshold on the Pareto front whose accuracy stays within
    ``tolerance`` accuracy points of the final exit; 1.0 if none qualifies."""
    if tolerance < 0:
        raise ConfigError("tolerance must be nonnegative")
    stats = report.per_threshold
    points = [(s.mean_latency, s.accuracy) for s in stats]
    front = pareto_front(points)
    floor = report.reference_accuracy - tolerance / 100.0 - 1e-12
    ok = [k for k in front if stats[k].accuracy >= floor]
    if ok:
        chosen = stats[min(ok, key=lambda k: stats[k].threshold)]
    else:
        chosen = report.stats_at(1.0)
    return CalibrationResult(
        thr_conf=chosen.threshold,
        selected_exits=tuple(report.selected_exits),
        expected_accuracy=chosen.accuracy,
        mean_latency=chosen.mean_latency,
        mean_flops=chosen.mean_flops,
        reference_accuracy=report.reference_accuracy,
        pareto=[(stats[k].mean_latency, stats[k].accuracy, stats[k].threshold) for k in front],
    )


def prune_exits(report: ProfileReport, thr: float, min_exit_rate: float = 0.05,
                max_accuracy_gap: float = 2.0) -> Tuple[int, ...]:
    """Keep selected exits that capture at least ``min_exit_rate`` of samples at
    ``thr`` with conditional accuracy no worse than the final exit's accuracy
    minus ``max_accuracy_gap`` points.  The final exit is never a candidate."""
    s = report.stats_at(thr)
    floor = report.reference_accuracy - max_accuracy_gap / 100.0
    keep = []
    for e in report.selected_exits:
        if s.exit_rates[e] < min_exit_rate:
            continue
        if not s.conditional_accuracy[e] >= floor - 1e-12:
            continue
        keep.append(e)
    return tuple(keep)


def ewma_baselines(losses: np.ndarray, smoothing: float = 0.1, control_limit: float = 3.0) -> np.ndarray:
    """Per-exit upper control limit of an EWMA of i.i.d. losses:
    ``mean + control_limit * std * sqrt(smoothing / (2 - smoothing))``."""
    losses = np.asarray(losses, dtype=np.float64)
    spread = losses.std(axis=0) * np.sqrt(smoothing / (2.0 - smoothing))
    return losses.mean(axis=0) + control_limit * spread


def calibrate(report: ProfileReport, tolerance: float = 1.0, min_exit_rate: float = 0.05,
              max_accuracy_gap: float = 2.0, smoothing: float = 0.1, control_limit: float = 3.0
              ) -> CalibrationResult:
    """Threshold selection, exit pruning, then re-selection on the pruned exit set.

    Drift baselines for the kept exits are EWMA control limits of their
    calibration-set losses.
    """
    first = calibrate_threshold(report, tolerance)
    kept = prune_exits(report, first.thr_conf, min_exit_rate, max_accuracy_gap)
    result = calibrate_threshold(report.restrict(kept), tolerance)
    limits = ewma_baselines(report.losses, smoothing, control_limit)
    result.baselines = {e: float(limits[e - 1]) for e in kept}
    return result
