"""Single- and multi-level attention models assembled from an architecture string.

An architecture string like ``"2-A-1-A"`` lists embedding blocks: two dense
layers, an attention head, one more dense layer, another attention head.
Every dense layer is width ``hidden_units`` and is followed by batch norm,
ReLU and (at train time) dropout.  Each head pools its block's output into
a per-class probability vector; the level vectors are concatenated and a
final dense+sigmoid layer maps the concatenation to the clip probabilities.

Weight file format (all little-endian): magic ``WLAM``, version u32,
n_blocks u32, block depths (u32 each), hidden_units u32, n_classes u32,
input_dim u32, then every state array as raw float64 in the fixed traversal
order of :meth:`MultiLevelModel.state_params` (per block, per layer: dense
weight, dense bias, gamma, beta, running mean, running var; per head:
attention weight/bias, classifier weight/bias; then output weight, output
bias).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Iterable

import numpy as np

from . import nn
from .attention import AttentionHead, LevelPrediction, backward_batch, forward_batch
from .nn import INFER, TRAIN, BatchNormState, DenseLayer, dropout_mask
from .rng import new_rng

WEIGHTS_MAGIC = b"WLAM"
WEIGHTS_VERSION = 1

# The architecture grammar: dense-layer counts separated by attention taps.
PRESET_ARCHS = (
    "1-A-1-A-1-A",
    "2-A-1-A",
    "2-A-2-A-2-A",
    "3-A",
    "3-A-3-A",
    "3-A-3-A-3-A",
    "5-A-4-A",
    "6-A",
    "9-A",
)


class WeightFormatError(ValueError):
    """Raised for malformed weight bytes or a spec/file mismatch."""


@dataclass(frozen=True)
class ArchSpec:
    block_depths: tuple[int, ...]
    hidden_units: int
    n_classes: int

    def __post_init__(self) -> None:
        if len(self.block_depths) < 1 or any(d < 1 for d in self.block_depths):
            raise ValueError(f"block depths must be positive, got {self.block_depths}")
        if self.hidden_units < 1 or self.n_classes < 1:
            raise ValueError("hidden_units and n_classes must be >= 1")

    @property
    def n_levels(self) -> int:
        return len(self.block_depths)


def parse_arch(text: str, hidden_units: int = 600, n_classes: int = 527) -> ArchSpec:
    """Parse ``"<depth>-A-<depth>-A-..."`` into an :class:`ArchSpec`.

    Raises ValueError naming the character position of the first bad token.
    """
    tokens = text.split("-")
    if len(tokens) % 2 != 0:
        raise ValueError(f"arch {text!r}: expected '<int>-A' pairs, got an odd token")
    depths = []
    pos = 0
    for i, token in enumerate(tokens):
        if i % 2 == 0:
            if not token.isdigit():
                raise ValueError(f"arch {text!r}: expected integer at position {pos}, got {token!r}")
            depth = int(token)
            if depth < 1:
                raise ValueError(f"arch {text!r}: depth must be positive at position {pos}")
            depths.append(depth)
        elif token != "A":
            raise ValueError(f"arch {text!r}: expected 'A' at position {pos}, got {token!r}")
        pos += len(token) + 1
    return ArchSpec(tuple(depths), hidden_units, n_classes)


@dataclass
class LayerStack:
    """One hidden unit of an embedding block: dense + batch norm (+ ReLU/dropout)."""

    dense: DenseLayer
    bn: BatchNormState


@dataclass
class MultiLevelModel:
    spec: ArchSpec
    input_dim: int
    blocks: list[list[LayerStack]]
    heads: list[AttentionHead]
    out_weight: np.ndarray  # (n_classes * n_levels, n_classes)
    out_bias: np.ndarray  # (n_classes,)
    dropout_rate: float = 0.4

    def trainable_params(self) -> dict[str, np.ndarray]:
        """Live views of every trainable array, in fixed traversal order."""
        params: dict[str, np.ndarray] = {}
        for b, block in enumerate(self.blocks):
            for j, layer in enumerate(block):
                prefix = f"block{b}.layer{j}"
                params[f"{prefix}.weight"] = layer.dense.weight
                params[f"{prefix}.bias"] = layer.dense.bias
                params[f"{prefix}.gamma"] = layer.bn.gamma
                params[f"{prefix}.beta"] = layer.bn.beta
        for l, head in enumerate(self.heads):
            params[f"head{l}.att.weight"] = head.att_dense.weight
            params[f"head{l}.att.bias"] = head.att_dense.bias
            params[f"head{l}.cls.weight"] = head.cls_dense.weight
            params[f"head{l}.cls.bias"] = head.cls_dense.bias
        params["out.weight"] = self.out_weight
        params["out.bias"] = self.out_bias
        return params

    def state_params(self) -> dict[str, np.ndarray]:
        """Trainables plus batch-norm running statistics (the persisted state)."""
        params: dict[str, np.ndarray] = {}
        for b, block in enumerate(self.blocks):
            for j, layer in enumerate(block):
                prefix = f"block{b}.layer{j}"
                params[f"{prefix}.weight"] = layer.dense.weight
                params[f"{prefix}.bias"] = layer.dense.bias
                params[f"{prefix}.gamma"] = layer.bn.gamma
                params[f"{prefix}.beta"] = layer.bn.beta
                params[f"{prefix}.running_mean"] = layer.bn.running_mean
                params[f"{prefix}.running_var"] = layer.bn.running_var
        for l, head in enumerate(self.heads):
            params[f"head{l}.att.weight"] = head.att_dense.weight
            params[f"head{l}.att.bias"] = head.att_dense.bias
            params[f"head{l}.cls.weight"] = head.cls_dense.weight
            params[f"head{l}.cls.bias"] = head.cls_dense.bias
        params["out.weight"] = self.out_weight
        params["out.bias"] = self.out_bias
        return params

    def copy_state(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.state_params().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_params()
        if own.keys() != state.keys():
            raise ValueError("state dict does not match model structure")
        for name, arr in own.items():
            arr[...] = state[name]


def build_model(
    spec: ArchSpec, input_dim: int, init_seed: int, dropout_rate: float = 0.4
) -> MultiLevelModel:
    """Deterministically initialize a model: Glorot-uniform weights, zero biases.

    Draws come from one PCG64 stream seeded by ``init_seed``, consumed in
    traversal order, so identical (spec, input_dim, seed) give bitwise-
    identical parameters.
    """
    if input_dim < 1:
        raise ValueError(f"input_dim must be >= 1, got {input_dim}")
    rng = new_rng(init_seed)
    blocks = []
    width_in = input_dim
    for depth in spec.block_depths:
        block = []
        for _ in range(depth):
            dense = DenseLayer.init(rng, width_in, spec.hidden_units)
            block.append(LayerStack(dense, BatchNormState.init(spec.hidden_units)))
            width_in = spec.hidden_units
        blocks.append(block)
    heads = [AttentionHead.init(rng, spec.hidden_units, spec.n_classes) for _ in spec.block_depths]
    out_weight = nn.glorot_uniform(rng, spec.n_classes * spec.n_levels, spec.n_classes)
    out_bias = np.zeros(spec.n_classes)
    return MultiLevelModel(spec, input_dim, blocks, heads, out_weight, out_bias, dropout_rate)


@dataclass(frozen=True)
class BatchPrediction:
    """Forward results for a batch of clips."""

    z: np.ndarray  # (n_clips, n_classes), final probabilities
    u: np.ndarray  # (n_clips, n_classes * n_levels), concatenated level outputs
    level_y: list[np.ndarray]  # per level (n_clips, n_classes)
    level_att: list[np.ndarray]  # per level (n_clips, n_frames, n_classes)

    @property
    def n_levels(self) -> int:
        return len(self.level_y)

    def clip(self, i: int) -> "ClipPrediction":
        levels = [
            LevelPrediction(self.level_y[l][i], self.level_att[l][i])
            for l in range(self.n_levels)
        ]
        return ClipPrediction(self.z[i], levels, self.u[i])


@dataclass(frozen=True)
class ClipPrediction:
    z: np.ndarray  # (n_classes,)
    levels: list[LevelPrediction]
    u: np.ndarray  # (n_classes * n_levels,)


@dataclass
class _ForwardCache:
    """Intermediates retained by a train-mode forward for the backward pass."""

    mode: str
    n_clips: int
    n_frames: int
    # per block, per layer: (dense input, dense output, batch-norm output, dropout mask)
    layer_io: list[list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray | None]]]
    # per level: (block output (n_clips, n_frames, width), weights, frame_probs, denom)
    level_io: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]
    u: np.ndarray
    z: np.ndarray


def forward(
    model: MultiLevelModel,
    features: np.ndarray,
    mode: str = INFER,
    rng: np.random.Generator | None = None,
    update_running: bool = True,
) -> BatchPrediction:
    """Run clips of shape (n_clips, n_frames, input_dim) through the model.

    Train mode normalizes with batch statistics (over all frames of all
    clips), applies dropout masks from ``rng``, and updates running
    statistics; infer mode uses running statistics and no dropout.
    """
    prediction, _ = forward_cached(model, features, mode, rng, update_running)
    return prediction


def forward_cached(
    model: MultiLevelModel,
    features: np.ndarray,
    mode: str,
    rng: np.random.Generator | None = None,
    update_running: bool = True,
) -> tuple[BatchPrediction, _ForwardCache]:
    if features.ndim != 3 or features.shape[2] != model.input_dim:
        raise ValueError(
            f"features shape {features.shape} incompatible with input_dim={model.input_dim}"
        )
    use_dropout = mode == TRAIN and model.dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ValueError("train-mode forward with dropout needs an rng for the masks")

    n_clips, n_frames, _ = features.shape
    x = features.reshape(n_clips * n_frames, model.input_dim)

    layer_io = []
    level_io = []
    level_y = []
    level_att = []
    for block, head in zip(model.blocks, model.heads):
        block_io = []
        for layer in block:
            dense_in = x
            dense_out = nn.dense_forward(dense_in, layer.dense)
            bn_out = nn.batchnorm_forward(dense_out, layer.bn, mode, update_running)
            x = nn.relu(bn_out)
            mask = None
            if use_dropout:
                mask = dropout_mask(rng, x.shape, model.dropout_rate)
                x = x * mask
            block_io.append((dense_in, dense_out, bn_out, mask))
        layer_io.append(block_io)

        h = x.reshape(n_clips, n_frames, -1)
        y, weights, frame_probs, denom = forward_batch(h, head)
        level_io.append((h, weights, frame_probs, denom))
        level_y.append(y)
        level_att.append(weights)

    u = np.concatenate(level_y, axis=1)
    z = nn.sigmoid(u @ model.out_weight + model.out_bias)
    prediction = BatchPrediction(z, u, level_y, level_att)
    cache = _ForwardCache(mode, n_clips, n_frames, layer_io, level_io, u, z)
    return prediction, cache


def backward(
    model: MultiLevelModel, cache: _ForwardCache, grad_z: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradients of every trainable parameter, keyed like ``trainable_params``.

    Requires the cache of a matching train-mode forward (dropout masks are
    reused, batch-norm gradients assume batch statistics).
    """
    if cache.mode != TRAIN:
        raise ValueError("backward requires a cache from a train-mode forward")
    if grad_z.shape != cache.z.shape:
        raise ValueError(f"grad_z shape {grad_z.shape} != {cache.z.shape}")

    grads: dict[str, np.ndarray] = {}
    k = model.spec.n_classes

    grad_pre = grad_z * cache.z * (1.0 - cache.z)
    grads["out.weight"] = cache.u.T @ grad_pre
    grads["out.bias"] = grad_pre.sum(axis=0)
    grad_u = grad_pre @ model.out_weight.T

    # Levels feed only the concatenation, so walk blocks from deepest to
    # shallowest, merging each head's gradient with the one flowing down
    # from the block above.
    grad_from_above: np.ndarray | None = None
    for l in range(model.spec.n_levels - 1, -1, -1):
        h, weights, frame_probs, denom = cache.level_io[l]
        grad_y = grad_u[:, l * k : (l + 1) * k]
        grad_h, head_grads = backward_batch(h, model.heads[l], weights, frame_probs, denom, grad_y)
        for name, value in head_grads.items():
            grads[f"head{l}.{name}"] = value
        grad_x = grad_h.reshape(cache.n_clips * cache.n_frames, -1)
        if grad_from_above is not None:
            grad_x = grad_x + grad_from_above

        for j in range(len(model.blocks[l]) - 1, -1, -1):
            layer = model.blocks[l][j]
            dense_in, dense_out, bn_out, mask = cache.layer_io[l][j]
            if mask is not None:
                grad_x = grad_x * mask
            grad_x = nn.relu_backward(bn_out, grad_x)
            grad_x, grad_gamma, grad_beta = nn.batchnorm_backward(dense_out, layer.bn, grad_x)
            grad_x, grad_w, grad_b = nn.dense_backward(dense_in, layer.dense, grad_x)
            prefix = f"block{l}.layer{j}"
            grads[f"{prefix}.weight"] = grad_w
            grads[f"{prefix}.bias"] = grad_b
            grads[f"{prefix}.gamma"] = grad_gamma
            grads[f"{prefix}.beta"] = grad_beta
        grad_from_above = grad_x
    return grads


def predict_scores(
    model: MultiLevelModel, features: np.ndarray, chunk_size: int = 1000
) -> np.ndarray:
    """Infer-mode class probabilities (n_clips, n_classes), chunked for memory."""
    outputs = [
        forward(model, features[start : start + chunk_size], INFER).z
        for start in range(0, features.shape[0], chunk_size)
    ]
    return np.concatenate(outputs, axis=0)


def model_grad_check(
    model: MultiLevelModel,
    features: np.ndarray,
    loss_on_z: Callable[[np.ndarray], tuple[float, np.ndarray]],
    step: float = 1e-5,
) -> float:
    """Finite-difference check of the full backward pass; see nn.grad_check.

    The model must be deterministic: dropout disabled.  Runs in train mode
    (batch statistics) with running-stat updates off.
    """
    if model.dropout_rate > 0.0:
        raise ValueError("non-deterministic configuration: dropout is enabled")

    def loss_fn() -> float:
        pred, _ = forward_cached(model, features, TRAIN, update_running=False)
        return loss_on_z(pred.z)[0]

    pred, cache = forward_cached(model, features, TRAIN, update_running=False)
    _, grad_z = loss_on_z(pred.z)
    analytic = backward(model, cache, grad_z)
    return nn.grad_check(loss_fn, model.trainable_params(), analytic, step)


def save_weights(model: MultiLevelModel, sink: BinaryIO) -> int:
    """Serialize spec echo + state arrays; returns bytes written."""
    spec = model.spec
    written = sink.write(WEIGHTS_MAGIC)
    written += sink.write(struct.pack("<2I", WEIGHTS_VERSION, spec.n_levels))
    written += sink.write(struct.pack(f"<{spec.n_levels}I", *spec.block_depths))
    written += sink.write(struct.pack("<3I", spec.hidden_units, spec.n_classes, model.input_dim))
    for arr in model.state_params().values():
        written += sink.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return written


def _read_exact(source: BinaryIO, count: int, context: str) -> bytes:
    data = source.read(count)
    if len(data) != count:
        raise WeightFormatError(f"truncated weight stream while reading {context}")
    return data


def load_weights(source: BinaryIO, spec: ArchSpec, dropout_rate: float = 0.4) -> MultiLevelModel:
    """Rebuild a model from :func:`save_weights` bytes; spec must match the echo."""
    magic = _read_exact(source, 4, "magic")
    if magic != WEIGHTS_MAGIC:
        raise WeightFormatError(f"bad magic {magic!r}, expected {WEIGHTS_MAGIC!r}")
    version, n_levels = struct.unpack("<2I", _read_exact(source, 8, "header"))
    if version != WEIGHTS_VERSION:
        raise WeightFormatError(f"unsupported weight version {version}")
    depths = struct.unpack(f"<{n_levels}I", _read_exact(source, 4 * n_levels, "block depths"))
    hidden, n_classes, input_dim = struct.unpack("<3I", _read_exact(source, 12, "dims"))
    stored = ArchSpec(tuple(depths), hidden, n_classes)
    if stored != spec:
        raise WeightFormatError(f"weight file holds {stored}, expected {spec}")

    model = build_model(spec, input_dim, init_seed=0, dropout_rate=dropout_rate)
    for name, arr in model.state_params().items():
        raw = _read_exact(source, arr.size * 8, name)
        arr[...] = np.frombuffer(raw, dtype="<f8").reshape(arr.shape)
    if source.read(1) != b"":
        raise WeightFormatError("trailing bytes after final parameter array")
    return model
