"""Assembly of the patch classifier: spec, parameter store, forward/backward.

The architecture is fixed in shape: six 3x3 stride-1 conv layers (the first
two each followed by 2x2 max pooling), then dense layers of 64 and
`class_count` units. Every layer except the final dense one is followed by
batch normalization and ReLU; dropout acts on the 64-unit activations.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import neural

DEFAULT_CONV_WIDTHS = (16, 16, 32, 32, 64, 64)
HIDDEN_UNITS = 64
POOLED_LAYERS = (0, 1)  # conv layers followed by 2x2 max pooling
WEIGHT_MAGIC = b"MCNN"
WEIGHT_FORMAT_VERSION = 1
CONV_MODES = ("valid", "same")


class WeightFileError(ValueError):
    """Base for weight-file load failures."""


class BadMagicError(WeightFileError):
    pass


class BadVersionError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass


class SpecMismatchError(WeightFileError):
    pass


class StaleCacheError(RuntimeError):
    """Raised when backward receives a cache from outdated weights."""


@dataclass(frozen=True)
class NetworkSpec:
    """Immutable description of one classifier network."""

    patch_size: int = 49
    conv_mode: str = "same"
    conv_widths: tuple = DEFAULT_CONV_WIDTHS
    dropout_keep: float = 0.5
    class_count: int = 2

    def __post_init__(self):
        object.__setattr__(self, "conv_widths", tuple(int(v) for v in self.conv_widths))
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValueError(f"patch_size must be a positive odd int, got {self.patch_size}")
        if self.conv_mode not in CONV_MODES:
            raise ValueError(f"conv_mode must be one of {CONV_MODES}, got {self.conv_mode!r}")
        if len(self.conv_widths) != 6 or any(v < 1 for v in self.conv_widths):
            raise ValueError(f"conv_widths must be six positive ints, got {self.conv_widths}")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ValueError(f"dropout_keep must be in (0, 1], got {self.dropout_keep}")
        if self.class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {self.class_count}")
        spatial_chain(self)  # rejects patch sizes the conv chain cannot reduce


def spatial_chain(spec: NetworkSpec) -> list[int]:
    """Spatial extents from the input through each conv/pool stage.

    For a 49-patch valid-mode network this is 49,47,23,21,10,8,6,4,2. Same
    mode preserves extents across convs and pools with ceil division.
    """
    s = spec.patch_size
    chain = [s]
    for i in range(6):
        if spec.conv_mode == "valid":
            if s < 3:
                raise ValueError(
                    f"patch_size {spec.patch_size} too small: conv layer {i + 1} "
                    f"would see a {s}-pixel extent in valid mode")
            s -= 2
        chain.append(s)
        if i in POOLED_LAYERS:
            if s < 2:
                raise ValueError(
                    f"patch_size {spec.patch_size} too small: pool after conv "
                    f"layer {i + 1} would see a {s}-pixel extent")
            s = (s + 1) // 2 if spec.conv_mode == "same" else s // 2
            chain.append(s)
    if s < 1:
        raise ValueError(f"patch_size {spec.patch_size} leaves no spatial extent")
    return chain


def flatten_width(spec: NetworkSpec) -> int:
    s = spatial_chain(spec)[-1]
    return spec.conv_widths[-1] * s * s


def param_layout(spec: NetworkSpec) -> list[tuple[str, tuple]]:
    """Fixed (name, shape) order of every stored array, serialization order."""
    layout = []
    in_ch = 1
    for i, width in enumerate(spec.conv_widths, start=1):
        layout.append((f"conv{i}/kernels", (width, in_ch, 3, 3)))
        layout.append((f"conv{i}/bias", (width,)))
        for stat in ("gamma", "beta", "run_mean", "run_var"):
            layout.append((f"conv{i}/{stat}", (width,)))
        in_ch = width
    d = flatten_width(spec)
    layout.append(("fc1/weight", (d, HIDDEN_UNITS)))
    layout.append(("fc1/bias", (HIDDEN_UNITS,)))
    for stat in ("gamma", "beta", "run_mean", "run_var"):
        layout.append((f"fc1/{stat}", (HIDDEN_UNITS,)))
    layout.append(("fc2/weight", (HIDDEN_UNITS, spec.class_count)))
    layout.append(("fc2/bias", (spec.class_count,)))
    return layout


def trainable_names(spec: NetworkSpec) -> list[str]:
    return [name for name, _ in param_layout(spec)
            if not name.endswith(("run_mean", "run_var"))]


@dataclass
class NetworkWeights:
    """All parameter arrays keyed by layer/name, plus a revision counter
    that stamps forward caches so backward can reject stale ones."""

    spec: NetworkSpec
    params: dict = field(default_factory=dict)
    revision: int = 0

    def bump(self):
        self.revision += 1

    def clone(self) -> "NetworkWeights":
        return NetworkWeights(self.spec, {k: v.copy() for k, v in self.params.items()},
                              self.revision)

    def astype(self, dtype) -> "NetworkWeights":
        return NetworkWeights(self.spec,
                              {k: v.astype(dtype) for k, v in self.params.items()},
                              self.revision)

    @property
    def dtype(self):
        return self.params["conv1/kernels"].dtype


def build_network(spec: NetworkSpec, seed=0) -> NetworkWeights:
    """He-initialized weights; biases/betas zero, gammas one, running stats
    at the identity. Deterministic given the seed."""
    params = {}
    for idx, (name, shape) in enumerate(param_layout(spec)):
        kind = name.split("/")[1]
        if kind in ("kernels", "weight"):
            fan_in = int(np.prod(shape[1:])) if kind == "kernels" else shape[0]
            params[name] = neural.he_init(fan_in, shape,
                                          seed=_seed_list(seed) + [idx])
        elif kind in ("gamma", "run_var"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return NetworkWeights(spec, params)


def _seed_list(seed) -> list:
    parts = [int(v) for v in seed] if isinstance(seed, (list, tuple)) else [int(seed)]
    if any(v < 0 for v in parts):
        raise ValueError(f"seed entries must be >= 0, got {seed}")
    return parts


def _check_batch(spec: NetworkSpec, batch: np.ndarray):
    n = spec.patch_size
    if batch.ndim != 4 or batch.shape[1] != 1 or batch.shape[2:] != (n, n):
        raise ValueError(
            f"batch must be (B, 1, {n}, {n}), got {batch.shape}")


def forward(weights: NetworkWeights, batch: np.ndarray, phase: str = "infer",
            dropout_rng=None):
    """Full forward pass. Returns (class probabilities, cache).

    Train phase uses batch statistics (and updates the running ones in
    place), applies dropout (dropout_rng required when dropout_keep < 1),
    and produces the cache consumed by backward.
    """
    probs, _, cache = _forward_impl(weights, batch, phase, dropout_rng)
    return probs, cache


def penultimate_features(weights: NetworkWeights, batch: np.ndarray) -> np.ndarray:
    """64-unit activations (post batch norm and ReLU, dropout off)."""
    _, feats, _ = _forward_impl(weights, batch, "infer", None)
    return feats


def predict_with_features(weights: NetworkWeights, batch: np.ndarray):
    """(probabilities, 64-unit features) from one infer-phase pass."""
    probs, feats, _ = _forward_impl(weights, batch, "infer", None)
    return probs, feats


def _forward_impl(weights, batch, phase, dropout_rng):
    spec = weights.spec
    _check_batch(spec, batch)
    if phase not in ("train", "infer"):
        raise ValueError(f"phase must be 'train' or 'infer', got {phase!r}")
    if phase == "train" and spec.dropout_keep < 1.0 and dropout_rng is None:
        raise ValueError("train phase with dropout needs a dropout_rng")
    p = weights.params
    x = batch.astype(weights.dtype, copy=False)
    steps = []
    for i in range(1, 7):
        conv_in = x
        x = neural.conv2d(conv_in, p[f"conv{i}/kernels"], p[f"conv{i}/bias"],
                          spec.conv_mode)
        x, bn_cache = neural.batchnorm_forward(
            x, p[f"conv{i}/gamma"], p[f"conv{i}/beta"],
            p[f"conv{i}/run_mean"], p[f"conv{i}/run_var"], phase)
        pre_relu = x
        x = neural.relu(x)
        pool = None
        if i - 1 in POOLED_LAYERS:
            pool_in_shape = x.shape
            x, argmax = neural.maxpool2x2(x, ceil_mode=(spec.conv_mode == "same"))
            pool = (argmax, pool_in_shape)
        steps.append(("conv", i, conv_in, bn_cache, pre_relu, pool))
    conv_out_shape = x.shape
    x = x.reshape(x.shape[0], -1)
    fc1_in = x
    x = neural.dense(fc1_in, p["fc1/weight"], p["fc1/bias"])
    x, fc1_bn = neural.batchnorm_forward(
        x, p["fc1/gamma"], p["fc1/beta"], p["fc1/run_mean"], p["fc1/run_var"],
        phase)
    fc1_pre_relu = x
    x = neural.relu(x)
    feats = x
    x, drop_mask = neural.dropout(x, spec.dropout_keep, phase, dropout_rng)
    fc2_in = x
    scores = neural.dense(fc2_in, p["fc2/weight"], p["fc2/bias"])
    probs = neural.softmax(scores)
    cache = {
        "revision": weights.revision,
        "weights_id": id(weights),
        "phase": phase,
        "steps": steps,
        "conv_out_shape": conv_out_shape,
        "fc1_in": fc1_in,
        "fc1_bn": fc1_bn,
        "fc1_pre_relu": fc1_pre_relu,
        "drop_mask": drop_mask,
        "fc2_in": fc2_in,
    }
    return probs, feats, cache


def backward(weights: NetworkWeights, cache: dict, grad_scores: np.ndarray) -> dict:
    """Gradients of the logged loss w.r.t. every trainable parameter.

    grad_scores is the loss gradient at the pre-softmax scores, as returned
    by neural.cross_entropy. The cache must come from a train-phase forward
    on the current weights revision.
    """
    if cache["revision"] != weights.revision or cache["weights_id"] != id(weights):
        raise StaleCacheError("forward cache does not match the current weights")
    if cache["phase"] != "train":
        raise ValueError("backward needs a train-phase cache")
    p = weights.params
    grads = {}
    g, grads["fc2/weight"], grads["fc2/bias"] = neural.dense_grad(
        cache["fc2_in"], p["fc2/weight"], grad_scores)
    g = neural.dropout_backward(cache["drop_mask"], g)
    g = neural.relu_backward(cache["fc1_pre_relu"], g)
    g, grads["fc1/gamma"], grads["fc1/beta"] = neural.batchnorm_backward(
        cache["fc1_bn"], g)
    g, grads["fc1/weight"], grads["fc1/bias"] = neural.dense_grad(
        cache["fc1_in"], p["fc1/weight"], g)
    g = g.reshape(cache["conv_out_shape"])
    for step in reversed(cache["steps"]):
        _, i, conv_in, bn_cache, pre_relu, pool = step
        if pool is not None:
            argmax, pool_in_shape = pool
            g = neural.maxpool2x2_backward(argmax, pool_in_shape, g)
        g = neural.relu_backward(pre_relu, g)
        g, grads[f"conv{i}/gamma"], grads[f"conv{i}/beta"] = \
            neural.batchnorm_backward(bn_cache, g)
        g, grads[f"conv{i}/kernels"], grads[f"conv{i}/bias"] = neural.conv2d_grad(
            conv_in, p[f"conv{i}/kernels"], g, weights.spec.conv_mode)
    return grads


# --------------------------------------------------------------- weight file
#
# Little-endian binary layout:
#   magic "MCNN" | format version u32 | patch_size u32 | conv_mode u8
#   (0 = valid, 1 = same) | class_count u32 | dropout_keep f32 | six conv
#   widths u32 | then every array of param_layout() in order as float32.

_HEADER_FMT = "<4sIIBIf6I"


def save_weights(weights: NetworkWeights, path):
    """Writes the float32 weight file; float64 weights are quantized."""
    spec = weights.spec
    header = struct.pack(
        _HEADER_FMT, WEIGHT_MAGIC, WEIGHT_FORMAT_VERSION, spec.patch_size,
        CONV_MODES.index(spec.conv_mode), spec.class_count,
        spec.dropout_keep, *spec.conv_widths)
    with open(path, "wb") as fh:
        fh.write(header)
        for name, shape in param_layout(spec):
            arr = weights.params[name]
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_weights(path, expected_spec: NetworkSpec | None = None) -> NetworkWeights:
    """Reads a weight file back into float32 parameter arrays."""
    with open(path, "rb") as fh:
        data = fh.read()
    hsize = struct.calcsize(_HEADER_FMT)
    if len(data) < hsize:
        raise TruncatedFileError(f"{path}: file shorter than the header")
    magic, version, patch, mode_code, classes, keep, *widths = \
        struct.unpack_from(_HEADER_FMT, data)
    if magic != WEIGHT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != WEIGHT_FORMAT_VERSION:
        raise BadVersionError(f"{path}: unsupported format version {version}")
    if mode_code not in (0, 1):
        raise WeightFileError(f"{path}: bad conv mode code {mode_code}")
    spec = NetworkSpec(patch_size=patch, conv_mode=CONV_MODES[mode_code],
                       conv_widths=tuple(widths), dropout_keep=round(keep, 6),
                       class_count=classes)
    if expected_spec is not None and spec != expected_spec:
        raise SpecMismatchError(
            f"{path}: file spec {spec} does not match expected {expected_spec}")
    params = {}
    offset = hsize
    for name, shape in param_layout(spec):
        count = int(np.prod(shape))
        nbytes = count * 4
        if offset + nbytes > len(data):
            raise TruncatedFileError(f"{path}: truncated at array {name}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        params[name] = arr.astype(np.float32).reshape(shape)
        offset += nbytes
    if offset != len(data):
        raise WeightFileError(f"{path}: {len(data) - offset} unexpected trailing bytes")
    return NetworkWeights(spec, params)
