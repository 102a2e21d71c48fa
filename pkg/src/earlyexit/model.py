"""Multi-exit networks built from a chain CNN backbone.

Exits are numbered 1..M; exit M+1 is the backbone's own classifier.  Block and
placement indices are 0-based: an exit with ``block == b`` reads the output of
``blocks[b]``.
"""
from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .tensor_core import (
    DTYPE, ConfigError, Conv2d, Dense, GlobalAvgPool, Layer, MaxPool2d, ReLU,
    forward_sequence, layer_from_description, sequence_flops, sequence_params, sequence_shapes,
)

REFERENCE_WIDTHS = (16, 16, 32, 32, 64, 64, 128, 128)
REFERENCE_POOL_AFTER = (2, 4, 6)

CHECKPOINT_MAGIC = b"PEPH"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ExitHead:
    block: int
    layers: List[Layer]


@dataclass
class ModelGraph:
    input_shape: Tuple[int, int, int]
    num_classes: int
    blocks: List[List[Layer]]
    final_head: List[Layer]
    exits: List[ExitHead] = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.forward_samples = 0  # samples pushed through forward_all_exits / forward_to_exit
        self.validate()

    def validate(self):
        if not self.blocks:
            raise ConfigError("backbone needs at least one block")
        shapes = self.block_shapes()
        final_out = sequence_shapes(self.final_head, shapes[-1])[-1]
        if final_out != (self.num_classes,):
            raise ConfigError(f"final classifier outputs {final_out}, expected ({self.num_classes},)")
        prev = -1
        for n, ex in enumerate(self.exits, 1):
            if not prev < ex.block < len(self.blocks):
                raise ConfigError(f"exit {n} placement {ex.block} must be increasing and < {len(self.blocks)}")
            prev = ex.block
            last = ex.layers[-1] if ex.layers else None
            if not isinstance(last, Dense) or last.n_out != self.num_classes:
                raise ConfigError(f"exit {n} head must end in dense(->{self.num_classes})")
            sequence_shapes(ex.layers, shapes[ex.block + 1])

    @property
    def M(self) -> int:
        return len(self.exits)

    @property
    def placements(self) -> List[int]:
        return [ex.block for ex in self.exits]

    def block_shapes(self) -> List[Tuple[int, ...]]:
        """Input shape of every block followed by the backbone output shape."""
        shapes = [self.input_shape]
        for block in self.blocks:
            shapes.append(sequence_shapes(block, shapes[-1])[-1])
        return shapes

    def block_flops(self) -> List[int]:
        shapes = self.block_shapes()
        return [sequence_flops(b, s) for b, s in zip(self.blocks, shapes)]

    def head_layers(self, i: int) -> List[Layer]:
        self._check_exit(i)
        return self.final_head if i == self.M + 1 else self.exits[i - 1].layers

    def exit_block(self, i: int) -> int:
        self._check_exit(i)
        return len(self.blocks) - 1 if i == self.M + 1 else self.exits[i - 1].block

    def head_flops(self, i: int) -> int:
        shapes = self.block_shapes()
        return sequence_flops(self.head_layers(i), shapes[self.exit_block(i) + 1])

    def prefix_flops(self, block: int) -> int:
        """Backbone FLOPs up to and including ``block``."""
        return int(sum(self.block_flops()[:block + 1]))

    def exit_flops(self, i: int) -> int:
        """FLOPs of the backbone prefix feeding exit ``i`` plus that exit's head."""
        return self.prefix_flops(self.exit_block(i)) + self.head_flops(i)

    def backbone_flops(self) -> int:
        return self.exit_flops(self.M + 1)

    def backbone_params(self) -> int:
        return sum(sequence_params(b) for b in self.blocks) + sequence_params(self.final_head)

    def head_params(self, i: int) -> int:
        return sequence_params(self.head_layers(i))

    def exit_params(self, i: int) -> int:
        """Parameters needed to produce exit ``i``: backbone prefix plus head."""
        b = self.exit_block(i)
        return sum(sequence_params(blk) for blk in self.blocks[:b + 1]) + self.head_params(i)

    def _check_exit(self, i):
        if not 1 <= i <= self.M + 1:
            raise ConfigError(f"exit index {i} outside 1..{self.M + 1}")

    # parameter groups -----------------------------------------------------
    def backbone_tensors(self) -> List[np.ndarray]:
        out = []
        for layer in [l for b in self.blocks for l in b] + list(self.final_head):
            out.extend(layer.params.values())
        return out

    def exit_tensors(self, i: int) -> List[np.ndarray]:
        if not 1 <= i <= self.M:
            raise ConfigError(f"early exit index {i} outside 1..{self.M}")
        return [p for layer in self.exits[i - 1].layers for p in layer.params.values()]

    def all_tensors(self) -> List[np.ndarray]:
        out = self.backbone_tensors()
        for i in range(1, self.M + 1):
            out.extend(self.exit_tensors(i))
        return out

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "ModelGraph":
        for layer in self.iter_layers():
            layer.astype(dtype)
        return self

    def iter_layers(self):
        for b in self.blocks:
            yield from b
        yield from self.final_head
        for ex in self.exits:
            yield from ex.layers

    # forward passes -------------------------------------------------------
    def forward_all_exits(self, x: np.ndarray) -> List[np.ndarray]:
        return forward_all_exits(self, x)

    def forward_to_exit(self, x: np.ndarray, i: int) -> np.ndarray:
        return forward_to_exit(self, x, i)


def checksum(tensors: Sequence[np.ndarray]) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(np.ascontiguousarray(t).tobytes())
    return h.hexdigest()


def build_backbone(input_shape=(1, 28, 28), num_classes=10, widths=REFERENCE_WIDTHS,
                   pool_after=REFERENCE_POOL_AFTER, rng=None):
    """Chain CNN: blocks of 3x3 conv + ReLU with maxpool after the listed (1-based) blocks.

    Returns ``(blocks, final_head)``; the final head is global average pooling
    followed by a dense classifier.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    c = input_shape[0]
    blocks = []
    for n, w in enumerate(widths, 1):
        block = [Conv2d(c, w, 3, padding=1, rng=rng), ReLU()]
        if n in pool_after:
            block.append(MaxPool2d(2))
        blocks.append(block)
        c = w
    return blocks, [GlobalAvgPool(), Dense(c, num_classes, rng=rng)]


def place_exits(block_flops: Sequence[int], M: int) -> List[int]:
    """0-based placement blocks for M exits at FLOP fractions i/(M+1).

    Exit i goes after the block whose cumulative FLOPs are nearest to
    i/(M+1) of the total (earlier block on ties).  Collisions push the later
    exit forward; overflow past the last block pulls earlier exits back.
    """
    n = len(block_flops)
    if M < 1:
        raise ConfigError("need at least one early exit")
    if n < M:
        raise ConfigError(f"backbone with {n} blocks cannot host {M} distinct exits")
    cum = np.cumsum(np.asarray(block_flops, dtype=object))
    total = cum[-1]
    picks = []
    for i in range(1, M + 1):
        # compare |cum - i*total/(M+1)| exactly in integers
        dist = [abs(c * (M + 1) - i * total) for c in cum]
        picks.append(min(range(n), key=lambda b: (dist[b], b)))
    for k in range(1, M):
        picks[k] = max(picks[k], picks[k - 1] + 1)
    picks[-1] = min(picks[-1], n - 1)
    for k in range(M - 2, -1, -1):
        picks[k] = min(picks[k], picks[k + 1] - 1)
    if picks[0] < 0:
        raise ConfigError(f"backbone with {n} blocks cannot host {M} distinct exits")
    return [int(p) for p in picks]


def build_exit_head(feature_shape, num_classes: int, rng=None) -> List[Layer]:
    """Two stride-2 3x3 conv + ReLU stages, global average pooling, dense classifier.

    A conv stage is skipped when the current map is smaller than 3 in either
    spatial dimension.
    """
    c, h, w = feature_shape
    layers: List[Layer] = []
    for _ in range(2):
        if h < 3 or w < 3:
            continue
        conv = Conv2d(c, c, 3, stride=2, padding=1, rng=rng)
        layers += [conv, ReLU()]
        _, h, w = conv.output_shape((c, h, w))
    layers += [GlobalAvgPool(), Dense(c, num_classes, rng=rng)]
    return layers


def attach_exits(blocks, final_head, input_shape, num_classes, M: int, rng=None,
                 placements: Optional[Sequence[int]] = None) -> ModelGraph:
    rng = np.random.default_rng(0) if rng is None else rng
    model = ModelGraph(input_shape, num_classes, blocks, final_head)
    if placements is None:
        placements = place_exits(model.block_flops(), M)
    shapes = model.block_shapes()
    model.exits = [ExitHead(b, build_exit_head(shapes[b + 1], num_classes, rng)) for b in placements]
    model.validate()
    return model


def build_reference_model(input_shape=(1, 28, 28), num_classes=10, M=6, seed=0,
                          widths=REFERENCE_WIDTHS, pool_after=REFERENCE_POOL_AFTER) -> ModelGraph:
    rng = np.random.default_rng(seed)
    blocks, final_head = build_backbone(input_shape, num_classes, widths, pool_after, rng)
    return attach_exits(blocks, final_head, input_shape, num_classes, M, rng)


# forward ----------------------------------------------------------------------

def _as_batch(model, x):
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or tuple(x.shape[1:]) != model.input_shape:
        raise ConfigError(f"input shape {x.shape} does not match model input {model.input_shape}")
    return x, single


def forward_all_exits(model: ModelGraph, x: np.ndarray) -> List[np.ndarray]:
    """Logits of exits 1..M+1; backbone features are computed once and shared."""
    x, single = _as_batch(model, x)
    model.forward_samples += len(x)
    by_block = {}
    for n, ex in enumerate(model.exits, 1):
        by_block.setdefault(ex.block, []).append(n)
    outs: List[Optional[np.ndarray]] = [None] * (model.M + 1)
    h = x
    for b, block in enumerate(model.blocks):
        h, _ = forward_sequence(block, h, need_cache=False)
        for n in by_block.get(b, ()):
            outs[n - 1], _ = forward_sequence(model.exits[n - 1].layers, h, need_cache=False)
    outs[model.M], _ = forward_sequence(model.final_head, h, need_cache=False)
    return [o[0] for o in outs] if single else outs


def forward_to_exit(model: ModelGraph, x: np.ndarray, i: int) -> np.ndarray:
    """Logits of exit ``i``, computing only the backbone prefix it needs."""
    model._check_exit(i)
    x, single = _as_batch(model, x)
    model.forward_samples += len(x)
    h = x
    for block in model.blocks[:model.exit_block(i) + 1]:
        h, _ = forward_sequence(block, h, need_cache=False)
    out, _ = forward_sequence(model.head_layers(i), h, need_cache=False)
    return out[0] if single else out


# checkpoints ------------------------------------------------------------------

def _topology(model: ModelGraph) -> dict:
    return {
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "blocks": [[l.describe() for l in b] for b in model.blocks],
        "final_head": [l.describe() for l in model.final_head],
        "exits": [{"block": ex.block, "layers": [l.describe() for l in ex.layers]} for ex in model.exits],
    }


def save_checkpoint(model: ModelGraph, path) -> None:
    """Write ``PEPH`` | u16 version | u32 len + JSON topology | float32 LE parameters."""
    topo = json.dumps(_topology(model), sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(topo)), topo]
    for layer in model.iter_layers():
        for p in layer.params.values():
            parts.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> ModelGraph:
    data = Path(path).read_bytes()
    if len(data) < 10:
        raise CheckpointError(f"{path}: truncated header")
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    version, topo_len = struct.unpack_from("<HI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    offset = 10
    if len(data) < offset + topo_len:
        raise CheckpointError(f"{path}: truncated topology")
    try:
        topo = json.loads(data[offset:offset + topo_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt topology ({exc})") from None
    offset += topo_len

    def build(descs):
        return [layer_from_description(d) for d in descs]

    model = ModelGraph(
        tuple(topo["input_shape"]), topo["num_classes"],
        [build(b) for b in topo["blocks"]], build(topo["final_head"]),
        [ExitHead(e["block"], build(e["layers"])) for e in topo["exits"]],
    )
    for layer in model.iter_layers():
        for name, p in layer.params.items():
            nbytes = p.size * 4
            if len(data) < offset + nbytes:
                raise CheckpointError(f"{path}: truncated parameter data")
            layer.params[name] = np.frombuffer(data, dtype="<f4", count=p.size, offset=offset) \
                .astype(DTYPE).reshape(p.shape)
            offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} unexpected trailing bytes")
    return model


def batched_exit_logits(model: ModelGraph, images: np.ndarray, batch_size: int = 256) -> List[np.ndarray]:
    """``forward_all_exits`` over a large image array, in fixed-size chunks."""
    chunks = [forward_all_exits(model, images[s:s + batch_size]) for s in range(0, len(images), batch_size)]
    return [np.concatenate([c[k] for c in chunks]) for k in range(model.M + 1)]
