"""Configurable 3-D U-Net assembled on the autodiff engine.

Architecture: D encoder blocks (two conv/batch-norm/relu stages, dropout,
2x max pool; feature count doubles per level), a bottleneck of B
conv/batch-norm/relu stages without dropout, D decoder blocks (2x transpose
convolution, skip concatenation, two conv/batch-norm/relu stages, dropout;
feature count halves), and a final 1x1x1 convolution to class logits followed
by a channel softmax.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor

CHECKPOINT_MAGIC = b"NSU1"


class ModelSpecError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; all trainable shapes derive from it."""

    in_channels: int = 1
    num_classes: int = 28
    features: int = 16
    depth: int = 4
    bottleneck_layers: int = 2
    kernel: Tuple[int, int, int] = (3, 3, 3)
    dropout_rate: float = 0.2
    input_dims: Tuple[int, int, int] = (128, 128, 128)
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        if min(self.features, self.depth, self.bottleneck_layers) < 1:
            raise ModelSpecError("features, depth and bottleneck_layers must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ModelSpecError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if any(k % 2 == 0 or k < 1 for k in self.kernel):
            raise ModelSpecError(f"kernel dims must be odd, got {self.kernel}")
        step = 2 ** self.depth
        for axis, dim in zip("xyz", self.input_dims):
            if dim % step:
                raise ModelSpecError(
                    f"input axis {axis} has {dim} voxels, not divisible by 2^depth = {step}"
                )

    @property
    def encoder_features(self) -> Tuple[int, ...]:
        return tuple(self.features * 2 ** d for d in range(self.depth))

    @property
    def bottleneck_features(self) -> int:
        return self.features * 2 ** self.depth


def count_parameters(spec: ModelSpec) -> int:
    """Total trainable scalars: conv/transpose-conv weights and biases plus
    batch-norm gamma/beta. Running statistics are not trainable."""
    k = int(np.prod(spec.kernel))

    def conv(c_in, c_out):
        return k * c_in * c_out + c_out

    def bn(c):
        return 2 * c

    total = 0
    c_prev = spec.in_channels
    for f in spec.encoder_features:
        total += conv(c_prev, f) + bn(f) + conv(f, f) + bn(f)
        c_prev = f
    fb = spec.bottleneck_features
    for i in range(spec.bottleneck_layers):
        total += conv(c_prev if i == 0 else fb, fb) + bn(fb)
    c_prev = fb
    for f in reversed(spec.encoder_features):
        total += 8 * c_prev * f + f  # 2x2x2 transpose conv
        total += conv(2 * f, f) + bn(f) + conv(f, f) + bn(f)
        c_prev = f
    total += c_prev * spec.num_classes + spec.num_classes  # 1x1x1 head
    return total


class _Conv:
    def __init__(self, c_in, c_out, kernel, rng, dtype):
        fan_in = c_in * int(np.prod(kernel))
        bound = np.sqrt(6.0 / fan_in)
        self.w = Tensor(
            rng.uniform(-bound, bound, (c_out, c_in) + tuple(kernel)).astype(dtype),
            requires_grad=True,
        )
        self.b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ad.conv3d(x, self.w, self.b)


class _UpConv:
    def __init__(self, c_in, c_out, rng, dtype):
        fan_in = c_in * 8
        bound = np.sqrt(6.0 / fan_in)
        self.w = Tensor(
            rng.uniform(-bound, bound, (c_in, c_out, 2, 2, 2)).astype(dtype),
            requires_grad=True,
        )
        self.b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ad.transpose_conv3d(x, self.w, self.b)


class _BatchNorm:
    def __init__(self, channels, eps, momentum, dtype):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.state = BatchNormState.for_channels(channels)
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x, mode):
        return ad.batch_norm(
            x, self.gamma, self.beta, self.state, mode, self.momentum, self.eps
        )


class _ConvStage:
    """conv -> batch norm -> relu"""

    def __init__(self, c_in, c_out, spec, rng, dtype):
        self.conv = _Conv(c_in, c_out, spec.kernel, rng, dtype)
        self.bn = _BatchNorm(c_out, spec.bn_eps, spec.bn_momentum, dtype)

    def __call__(self, x, mode):
        return ad.relu(self.bn(self.conv(x), mode))


class UNet3D:
    """Model handle: owns the parameter store, batch-norm state and modes."""

    def __init__(self, spec: ModelSpec, seed: int, dtype=np.float32):
        self.spec = spec
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(self.seed)
        self.extras: Dict[str, np.ndarray] = {}

        self.encoders = []
        c_prev = spec.in_channels
        for f in spec.encoder_features:
            self.encoders.append(
                (
                    _ConvStage(c_prev, f, spec, rng, dtype),
                    _ConvStage(f, f, spec, rng, dtype),
                )
            )
            c_prev = f
        fb = spec.bottleneck_features
        self.bottleneck = []
        for i in range(spec.bottleneck_layers):
            self.bottleneck.append(
                _ConvStage(c_prev if i == 0 else fb, fb, spec, rng, dtype)
            )
        self.decoders = []
        c_prev = fb
        for f in reversed(spec.encoder_features):
            self.decoders.append(
                (
                    _UpConv(c_prev, f, rng, dtype),
                    _ConvStage(2 * f, f, spec, rng, dtype),
                    _ConvStage(f, f, spec, rng, dtype),
                )
            )
            c_prev = f
        self.head = _Conv(c_prev, spec.num_classes, (1, 1, 1), rng, dtype)
        self._params = self._collect_params()

    def _collect_params(self) -> "OrderedDict[str, Tensor]":
        params = OrderedDict()
        for d, (s1, s2) in enumerate(self.encoders, start=1):
            for i, stage in enumerate((s1, s2), start=1):
                params[f"enc{d}.conv{i}.w"] = stage.conv.w
                params[f"enc{d}.conv{i}.b"] = stage.conv.b
                params[f"enc{d}.bn{i}.gamma"] = stage.bn.gamma
                params[f"enc{d}.bn{i}.beta"] = stage.bn.beta
        for i, stage in enumerate(self.bottleneck, start=1):
            params[f"bott{i}.conv.w"] = stage.conv.w
            params[f"bott{i}.conv.b"] = stage.conv.b
            params[f"bott{i}.bn.gamma"] = stage.bn.gamma
            params[f"bott{i}.bn.beta"] = stage.bn.beta
        for d, (up, s1, s2) in enumerate(self.decoders, start=1):
            params[f"dec{d}.up.w"] = up.w
            params[f"dec{d}.up.b"] = up.b
            for i, stage in enumerate((s1, s2), start=1):
                params[f"dec{d}.conv{i}.w"] = stage.conv.w
                params[f"dec{d}.conv{i}.b"] = stage.conv.b
                params[f"dec{d}.bn{i}.gamma"] = stage.bn.gamma
                params[f"dec{d}.bn{i}.beta"] = stage.bn.beta
        params["out.w"] = self.head.w
        params["out.b"] = self.head.b
        return params

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return self._params

    def parameter_count(self) -> int:
        return sum(int(t.data.size) for t in self._params.values())

    def bn_layers(self) -> "OrderedDict[str, _BatchNorm]":
        layers = OrderedDict()
        for d, (s1, s2) in enumerate(self.encoders, start=1):
            layers[f"enc{d}.bn1"] = s1.bn
            layers[f"enc{d}.bn2"] = s2.bn
        for i, stage in enumerate(self.bottleneck, start=1):
            layers[f"bott{i}.bn"] = stage.bn
        for d, (up, s1, s2) in enumerate(self.decoders, start=1):
            layers[f"dec{d}.bn1"] = s1.bn
            layers[f"dec{d}.bn2"] = s2.bn
        return layers

    def layer_summary(self) -> dict:
        """Feature-count layout, e.g. for checking a depth-2 schematic."""
        return {
            "encoder_features": list(self.spec.encoder_features),
            "bottleneck_features": self.spec.bottleneck_features,
            "bottleneck_layers": self.spec.bottleneck_layers,
            "decoder_features": [f for f in reversed(self.spec.encoder_features)],
            "dropout_blocks": 2 * self.spec.depth,
            "num_classes": self.spec.num_classes,
        }

    def _dropout(self, h, active, rng):
        if active and self.spec.dropout_rate > 0.0:
            if rng is None:
                raise ValueError("active dropout requires an rng")
            return ad.dropout(h, self.spec.dropout_rate, rng)
        return h

    def forward(
        self,
        x,
        mode: str = "train",
        dropout_active: Optional[bool] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        """Run the network and return the per-voxel class distribution.

        ``mode`` selects batch-norm statistics; ``dropout_active`` controls
        stochasticity independently (MC sampling = eval statistics with
        active dropout) and defaults to mode == 'train'.
        """
        if isinstance(x, np.ndarray):
            x = Tensor(x)
        if x.data.ndim != 5:
            raise ad.ShapeError(f"input must be 5-D, got {x.shape}")
        if x.shape[1] != self.spec.in_channels or x.shape[2:] != self.spec.input_dims:
            raise ad.ShapeError(
                f"input shape {x.shape[1:]} does not match spec "
                f"({self.spec.in_channels}, {self.spec.input_dims})"
            )
        active = (mode == "train") if dropout_active is None else dropout_active
        skips = []
        h = x
        for s1, s2 in self.encoders:
            h = s2(s1(h, mode), mode)
            h = self._dropout(h, active, rng)
            skips.append(h)
            h = ad.max_pool3d(h)
        for stage in self.bottleneck:
            h = stage(h, mode)
        for (up, s1, s2), skip in zip(self.decoders, reversed(skips)):
            h = up(h)
            h = ad.concat_channels(h, skip)
            h = s2(s1(h, mode), mode)
            h = self._dropout(h, active, rng)
        logits = self.head(h)
        return ad.softmax_channels(logits)

    def named_arrays(self) -> "OrderedDict[str, np.ndarray]":
        """Parameters plus batch-norm running statistics, checkpoint order."""
        arrays = OrderedDict((name, t.data) for name, t in self._params.items())
        for name, bn in self.bn_layers().items():
            arrays[f"{name}.running_mean"] = bn.state.running_mean
            arrays[f"{name}.running_var"] = bn.state.running_var
        return arrays


def build_unet(spec: ModelSpec, seed: int, dtype=np.float32) -> UNet3D:
    return UNet3D(spec, seed, dtype)


def save_checkpoint(model: UNet3D, path, extras: Optional[Dict[str, np.ndarray]] = None) -> None:
    """Versioned container: JSON header (spec, seed, array table) + raw
    little-endian array payloads. Extras (e.g. optimizer state) ride along."""
    arrays = model.named_arrays()
    if extras:
        for name, arr in extras.items():
            arrays[f"extra.{name}"] = np.asarray(arr)
    bn_init = {name: bn.state.initialized for name, bn in model.bn_layers().items()}
    table = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.dtype.newbyteorder("<")
        blobs.append(arr.astype(le, copy=False).tobytes())
        table.append([name, list(arr.shape), le.str])
    header = {
        "format_version": 1,
        "spec": asdict(model.spec),
        "seed": model.seed,
        "dtype": model.dtype.str,
        "bn_initialized": bn_init,
        "arrays": table,
    }
    payload = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, into: Optional[UNet3D] = None) -> UNet3D:
    """Restore a model bitwise. ``into`` loads in place and must match the
    stored spec."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8 : 8 + hlen].decode())
    spec_dict = dict(header["spec"])
    spec_dict["kernel"] = tuple(spec_dict["kernel"])
    spec_dict["input_dims"] = tuple(spec_dict["input_dims"])
    spec = ModelSpec(**spec_dict)
    if into is not None:
        if into.spec != spec:
            raise CheckpointError(
                f"checkpoint spec {spec} does not match target model {into.spec}"
            )
        model = into
    else:
        model = UNet3D(spec, header["seed"], np.dtype(header["dtype"]))
    offset = 8 + hlen
    arrays = {}
    for name, shape, dtype_str in header["arrays"]:
        dt = np.dtype(dtype_str)
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(raw, dt, count=n, offset=offset).reshape(shape).copy()
        offset += n * dt.itemsize
    params = model.parameters()
    bn_layers = model.bn_layers()
    for name, arr in arrays.items():
        if name in params:
            params[name].data = arr.astype(model.dtype, copy=False)
        elif name.endswith(".running_mean"):
            bn_layers[name[: -len(".running_mean")]].state.running_mean = arr
        elif name.endswith(".running_var"):
            bn_layers[name[: -len(".running_var")]].state.running_var = arr
        elif name.startswith("extra."):
            model.extras[name[len("extra.") :]] = arr
        else:
            raise CheckpointError(f"{path}: unknown array {name!r}")
    for name, bn in bn_layers.items():
        bn.state.initialized = bool(header["bn_initialized"][name])
    return model
