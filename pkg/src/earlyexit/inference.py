"""Confidence-thresholded early-exit inference with the final classifier as fail-safe."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .model import ModelGraph
from .tensor_core import ConfigError, forward_sequence, softmax

# synthetic latency: seconds per FLOP (1 GFLOP/s)
DEFAULT_SECONDS_PER_FLOP = 1e-9


@dataclass(frozen=True)
class ExitPolicy:
    selected_exits: Tuple[int, ...]
    thr_conf: float

    def __post_init__(self):
        sel = tuple(int(i) for i in self.selected_exits)
        object.__setattr__(self, "selected_exits", sel)
        if any(b <= a for a, b in zip(sel, sel[1:])):
            raise ConfigError(f"selected exits must be strictly increasing, got {sel}")
        if not 0.0 <= self.thr_conf <= 1.0:
            raise ConfigError(f"confidence threshold must lie in [0, 1], got {self.thr_conf}")

    def check(self, model: ModelGraph):
        if self.selected_exits and (self.selected_exits[0] < 1 or self.selected_exits[-1] > model.M):
            raise ConfigError(f"selected exits {self.selected_exits} outside 1..{model.M}")

    def with_threshold(self, thr: float) -> "ExitPolicy":
        return ExitPolicy(self.selected_exits, thr)


@dataclass
class InferenceResult:
    predicted: int
    exit_taken: int
    confidence: float
    flops: int
    latency: float  # seconds


def policy_exit_flops(model: ModelGraph, policy: ExitPolicy) -> Dict[int, int]:
    """FLOPs executed for a sample leaving at each reachable exit under ``policy``.

    A sample that leaves at exit ``e`` has paid for the backbone prefix up to
    ``e`` and for every selected head evaluated on the way.
    """
    policy.check(model)
    out = {}
    heads = 0
    for e in policy.selected_exits:
        heads += model.head_flops(e)
        out[e] = model.prefix_flops(model.exit_block(e)) + heads
    final = model.M + 1
    out[final] = model.backbone_flops() + heads
    return out


def choose_exits(confidences: np.ndarray, thr: float, selected: Sequence[int], final: int) -> np.ndarray:
    """Exit ordinal per sample from stored top-1 confidences.

    ``confidences[:, k]`` belongs to ``selected[k]``; the first column strictly
    above ``thr`` wins, otherwise the sample falls through to ``final``.
    """
    n = len(confidences)
    taken = np.full(n, final, dtype=np.int64)
    if not len(selected):
        return taken
    hit = confidences > thr
    any_hit = hit.any(axis=1)
    first = np.argmax(hit, axis=1)
    taken[any_hit] = np.asarray(selected)[first[any_hit]]
    return taken


def infer(model: ModelGraph, x: np.ndarray, policy: ExitPolicy, latency_mode: str = "wall",
          seconds_per_flop: float = DEFAULT_SECONDS_PER_FLOP,
          costs: Optional[Dict[int, int]] = None) -> InferenceResult:
    """Classify one sample, stopping at the first selected exit whose confidence exceeds the threshold.

    ``costs`` may carry a precomputed :func:`policy_exit_flops` table.
    """
    if costs is None:
        costs = policy_exit_flops(model, policy)
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1 or tuple(x.shape[1:]) != model.input_shape:
        raise ConfigError(f"infer expects one sample of shape {model.input_shape}, got {x.shape}")
    t0 = time.perf_counter()
    h = x
    done = -1
    result = None
    for e in policy.selected_exits:
        for block in model.blocks[done + 1:model.exit_block(e) + 1]:
            h, _ = forward_sequence(block, h, need_cache=False)
        done = model.exit_block(e)
        logits, _ = forward_sequence(model.exits[e - 1].layers, h, need_cache=False)
        p = softmax(logits[0].astype(np.float64))
        if p.max() > policy.thr_conf:
            result = (int(np.argmax(p)), e, float(p.max()))
            break
    if result is None:
        for block in model.blocks[done + 1:]:
            h, _ = forward_sequence(block, h, need_cache=False)
        logits, _ = forward_sequence(model.final_head, h, need_cache=False)
        p = softmax(logits[0].astype(np.float64))
        result = (int(np.argmax(p)), model.M + 1, float(p.max()))
    elapsed = time.perf_counter() - t0
    flops = costs[result[1]]
    latency = elapsed if latency_mode == "wall" else flops * seconds_per_flop
    return InferenceResult(result[0], result[1], result[2], flops, latency)


@dataclass
class BatchSummary:
    exit_rates: Dict[int, float]
    mean_flops: float
    mean_latency: float
    accuracy: Optional[float] = None

    @classmethod
    def from_results(cls, results: Sequence[InferenceResult], exits: Sequence[int], labels=None):
        n = len(results)
        taken = [r.exit_taken for r in results]
        rates = {e: taken.count(e) / n for e in exits}
        acc = None
        if labels is not None:
            acc = float(np.mean([r.predicted == int(y) for r, y in zip(results, labels)]))
        return cls(rates, float(np.mean([r.flops for r in results])),
                   float(np.mean([r.latency for r in results])), acc)


def infer_batch(model: ModelGraph, inputs: np.ndarray, policy: ExitPolicy, labels=None,
                latency_mode: str = "synthetic", seconds_per_flop: float = DEFAULT_SECONDS_PER_FLOP,
                batch_size: int = 256):
    """Early-exit inference over many samples.

    In ``synthetic`` latency mode samples are processed in vectorised chunks
    that shrink as samples leave; ``wall`` mode runs :func:`infer` per sample
    so each latency is a real measurement.
    """
    policy.check(model)
    if len(inputs) == 0:
        raise ConfigError("infer_batch needs at least one input")
    exits = list(policy.selected_exits) + [model.M + 1]
    if latency_mode == "wall":
        costs = policy_exit_flops(model, policy)
        results = [infer(model, x, policy, "wall", costs=costs) for x in inputs]
    elif latency_mode == "synthetic":
        results = []
        for s in range(0, len(inputs), batch_size):
            results += _infer_chunk(model, inputs[s:s + batch_size], policy, seconds_per_flop)
    else:
        raise ConfigError(f"unknown latency mode {latency_mode!r}")
    return results, BatchSummary.from_results(results, exits, labels)


def _infer_chunk(model, x, policy, seconds_per_flop):
    costs = policy_exit_flops(model, policy)
    n = len(x)
    pred = np.zeros(n, dtype=np.int64)
    conf = np.zeros(n)
    taken = np.full(n, model.M + 1, dtype=np.int64)
    alive = np.arange(n)
    h = x
    done = -1
    for e in policy.selected_exits:
        if not len(alive):
            break
        for block in model.blocks[done + 1:model.exit_block(e) + 1]:
            h, _ = forward_sequence(block, h, need_cache=False)
        done = model.exit_block(e)
        logits, _ = forward_sequence(model.exits[e - 1].layers, h, need_cache=False)
        p = softmax(logits.astype(np.float64))
        top = p.max(axis=1)
        leave = top > policy.thr_conf
        pred[alive[leave]] = np.argmax(p[leave], axis=1)
        conf[alive[leave]] = top[leave]
        taken[alive[leave]] = e
        alive, h = alive[~leave], h[~leave]
    if len(alive):
        for block in model.blocks[done + 1:]:
            h, _ = forward_sequence(block, h, need_cache=False)
        logits, _ = forward_sequence(model.final_head, h, need_cache=False)
        p = softmax(logits.astype(np.float64))
        pred[alive] = np.argmax(p, axis=1)
        conf[alive] = p.max(axis=1)
    return [InferenceResult(int(pred[j]), int(taken[j]), float(conf[j]), costs[int(taken[j])],
                            costs[int(taken[j])] * seconds_per_flop) for j in range(n)]


def write_results_csv(results: Sequence[InferenceResult], path, labels=None) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "exit_taken", "confidence", "predicted", "correct", "flops", "latency_us"])
        for j, r in enumerate(results):
            correct = "" if labels is None else int(r.predicted == int(labels[j]))
            w.writerow([j, r.exit_taken, f"{r.confidence:.6f}", r.predicted, correct, r.flops,
                        f"{r.latency * 1e6:.3f}"])
