"""Residual CNN for thickness regression and normal/abnormal classification.

The network follows the classic residual recipe: a strided 7x7 stem with
batch norm and 2x2 max pooling, then stages of basic blocks
(conv3x3-bn-relu-conv3x3-bn plus a shortcut, ReLU after the join). The
shortcut is the identity when shapes match and a stride-matched 1x1
convolution with batch norm otherwise. Global average pooling feeds one
or two linear heads: a single-scalar regression head (thickness) and a
single-logit classification head (abnormality).

Layer groups -- "stem", "stage1".."stageK", "head_regression",
"head_classification" -- are the unit of freezing and of differential
learning rates. A frozen group gets no optimizer updates and its batch
norm layers stop updating running statistics.

Regression trains on z-scored targets; the training-set mean/SD live on
the model and predictions are de-normalized back to micrometers.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import ndtensor as nd
from .ndtensor import Tensor

CHECKPOINT_MAGIC = "rnflnet-checkpoint v1"


class ConfigError(ValueError):
    """Invalid model configuration."""


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint file."""


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    in_channels: int = 1
    stem_channels: int = 8
    blocks_per_stage: tuple = (1, 1)
    channels_per_stage: tuple = (8, 16)
    head: str = "both"  # regression | classification | both

    def __post_init__(self):
        object.__setattr__(self, "blocks_per_stage", tuple(self.blocks_per_stage))
        object.__setattr__(self, "channels_per_stage", tuple(self.channels_per_stage))
        if len(self.blocks_per_stage) != len(self.channels_per_stage):
            raise ConfigError("blocks_per_stage and channels_per_stage must have equal length")
        if len(self.blocks_per_stage) < 1:
            raise ConfigError("at least one stage is required")
        stages = len(self.blocks_per_stage)
        divisor = 2 ** (stages + 1)
        if self.input_size % divisor:
            raise ConfigError(
                f"input_size {self.input_size} must be divisible by 2^(stages+1) = {divisor}"
            )
        if self.head not in ("regression", "classification", "both"):
            raise ConfigError(f"unknown head kind {self.head!r}")
        if self.in_channels < 1 or self.stem_channels < 1:
            raise ConfigError("channel counts must be positive")

    @property
    def num_stages(self):
        return len(self.blocks_per_stage)

    def head_names(self):
        names = []
        if self.head in ("regression", "both"):
            names.append("head_regression")
        if self.head in ("classification", "both"):
            names.append("head_classification")
        return names


PRESETS = {
    # matches the standard 34-layer residual topology on 256px inputs
    "resnet34": ModelConfig(input_size=256, in_channels=3, stem_channels=64,
                            blocks_per_stage=(3, 4, 6, 3),
                            channels_per_stage=(64, 128, 256, 512), head="both"),
    # two-stage desk-scale variant for 64px single-channel phantoms
    "micro": ModelConfig(input_size=64, in_channels=1, stem_channels=8,
                         blocks_per_stage=(1, 1), channels_per_stage=(8, 16),
                         head="both"),
}


class _Conv:
    def __init__(self, name, in_ch, out_ch, kernel, stride, pad, rng, bias=False):
        fan_in = in_ch * kernel * kernel
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(out_ch, in_ch, kernel, kernel))
        self.name = name
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None
        self.stride = stride
        self.pad = pad

    def __call__(self, x):
        return nd.conv2d(x, self.weight, self.bias, self.stride, self.pad)

    def named_tensors(self):
        yield self.name + ".weight", self.weight, True
        if self.bias is not None:
            yield self.name + ".bias", self.bias, True


class _BatchNorm:
    def __init__(self, name, channels, momentum=0.1, eps=1e-5):
        self.name = name
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels))
        self.running_var = Tensor(np.ones(channels))
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x, train, update_running):
        return nd.batchnorm2d(x, self.gamma, self.beta, self.running_mean,
                              self.running_var, train=train, momentum=self.momentum,
                              eps=self.eps, update_running=update_running)

    def named_tensors(self):
        yield self.name + ".gamma", self.gamma, True
        yield self.name + ".beta", self.beta, True
        yield self.name + ".running_mean", self.running_mean, False
        yield self.name + ".running_var", self.running_var, False


class _Linear:
    def __init__(self, name, in_features, out_features, rng):
        w = rng.normal(0.0, math.sqrt(2.0 / in_features), size=(in_features, out_features))
        self.name = name
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x):
        return nd.linear(x, self.weight, self.bias)

    def named_tensors(self):
        yield self.name + ".weight", self.weight, True
        yield self.name + ".bias", self.bias, True


class _ResidualBlock:
    """out = relu(F(x) + shortcut(x)); F = conv-bn-relu-conv-bn."""

    def __init__(self, name, in_ch, out_ch, stride, rng):
        self.conv1 = _Conv(name + ".conv1", in_ch, out_ch, 3, stride, 1, rng)
        self.bn1 = _BatchNorm(name + ".bn1", out_ch)
        self.conv2 = _Conv(name + ".conv2", out_ch, out_ch, 3, 1, 1, rng)
        self.bn2 = _BatchNorm(name + ".bn2", out_ch)
        if stride != 1 or in_ch != out_ch:
            self.proj = _Conv(name + ".proj", in_ch, out_ch, 1, stride, 0, rng)
            self.proj_bn = _BatchNorm(name + ".proj_bn", out_ch)
        else:
            self.proj = None
            self.proj_bn = None

    def __call__(self, x, train, update_running):
        h = nd.relu(self.bn1(self.conv1(x), train, update_running))
        h = self.bn2(self.conv2(h), train, update_running)
        if self.proj is None:
            shortcut = x
        else:
            shortcut = self.proj_bn(self.proj(x), train, update_running)
        return nd.relu(nd.add(h, shortcut))

    def named_tensors(self):
        for unit in (self.conv1, self.bn1, self.conv2, self.bn2, self.proj, self.proj_bn):
            if unit is not None:
                yield from unit.named_tensors()


class Model:
    """Built network plus trainable masks and target normalization."""

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)

        self.stem_conv = _Conv("stem.conv", config.in_channels, config.stem_channels,
                               7, 2, 3, rng)
        self.stem_bn = _BatchNorm("stem.bn", config.stem_channels)

        self.stages = []
        in_ch = config.stem_channels
        for s, (n_blocks, out_ch) in enumerate(
                zip(config.blocks_per_stage, config.channels_per_stage), start=1):
            blocks = []
            for b in range(n_blocks):
                stride = 2 if (s > 1 and b == 0) else 1
                blocks.append(_ResidualBlock(f"stage{s}.block{b + 1}", in_ch, out_ch,
                                             stride, rng))
                in_ch = out_ch
            self.stages.append(blocks)

        self.head_regression = None
        self.head_classification = None
        if config.head in ("regression", "both"):
            self.head_regression = _Linear("head_regression.fc", in_ch, 1, rng)
        if config.head in ("classification", "both"):
            self.head_classification = _Linear("head_classification.fc", in_ch, 1, rng)

        self.group_order = (["stem"]
                            + [f"stage{s}" for s in range(1, config.num_stages + 1)]
                            + config.head_names())
        self.trainable = {g: True for g in self.group_order}
        self.target_mean = 0.0
        self.target_sd = 1.0

    # -- structure ---------------------------------------------------------

    def _group_units(self, group):
        if group == "stem":
            return [self.stem_conv, self.stem_bn]
        if group.startswith("stage"):
            blocks = self.stages[int(group[5:]) - 1]
            return list(blocks)
        if group == "head_regression":
            return [self.head_regression]
        if group == "head_classification":
            return [self.head_classification]
        raise KeyError(group)

    def named_tensors(self):
        """Yield (name, tensor, is_parameter, group) in declared order."""
        for group in self.group_order:
            for unit in self._group_units(group):
                for name, tensor, is_param in unit.named_tensors():
                    yield name, tensor, is_param, group

    def parameters(self):
        for name, tensor, is_param, group in self.named_tensors():
            if is_param:
                yield name, tensor, group

    def num_parameters(self):
        return sum(t.size for _, t, _ in self.parameters())

    def num_stored_floats(self):
        """Every float the checkpoint stores: parameters plus running stats."""
        return sum(t.size for _, t, _, _ in self.named_tensors())

    def zero_grad(self):
        for _, tensor, _ in self.parameters():
            tensor.zero_grad()

    def last_two_groups(self):
        """Head group(s) plus the deepest stage: the progressive-unfreeze start."""
        return set(self.config.head_names()) | {f"stage{self.config.num_stages}"}

    # -- trainability ------------------------------------------------------

    def set_trainable(self, groups):
        unknown = set(groups) - set(self.group_order)
        if unknown:
            raise KeyError(f"unknown layer groups: {sorted(unknown)}")
        for g in self.group_order:
            self.trainable[g] = g in groups

    # -- forward -----------------------------------------------------------

    def forward(self, x, train=False, capture_features=False):
        """Run the network. Returns a dict with head outputs.

        ``x`` is a Tensor of shape (N, C, H, W) matching the config.
        ``capture_features`` additionally returns the final stage's
        feature map (the activations feeding global average pooling).
        """
        n, c, h, w = x.data.shape
        if c != self.config.in_channels or h != self.config.input_size or h != w:
            raise nd.ShapeError(
                f"expected input (N, {self.config.in_channels}, {self.config.input_size}, "
                f"{self.config.input_size}), got {x.data.shape}"
            )
        upd = lambda group: train and self.trainable[group]

        h_ = nd.relu(self.stem_bn(self.stem_conv(x), train, upd("stem")))
        h_ = nd.maxpool2x2(h_)
        for s, blocks in enumerate(self.stages, start=1):
            for block in blocks:
                h_ = block(h_, train, upd(f"stage{s}"))
        features = h_
        pooled = nd.global_avg_pool(features)

        out = {}
        if self.head_regression is not None:
            out["regression"] = self.head_regression(pooled)
        if self.head_classification is not None:
            out["classification"] = self.head_classification(pooled)
        if capture_features:
            out["features"] = features
        return out

    # -- inference ---------------------------------------------------------

    def predict(self, images):
        """Predicted thickness in micrometers for an (N, C, H, W) batch."""
        batch = np.asarray(images, dtype=np.float64)
        if batch.ndim == 3:
            batch = batch[None]
        if self.head_regression is None:
            raise ValueError("model has no regression head")
        with nd.no_grad():
            z = self.forward(Tensor(batch), train=False)["regression"].data[:, 0]
        um = z * self.target_sd + self.target_mean
        if not np.isfinite(um).all():
            raise nd.NonFiniteError("prediction produced non-finite values")
        return um

    def predict_prob(self, images):
        """Probability of abnormality in [0, 1] for an (N, C, H, W) batch."""
        batch = np.asarray(images, dtype=np.float64)
        if batch.ndim == 3:
            batch = batch[None]
        if self.head_classification is None:
            raise ValueError("model has no classification head")
        with nd.no_grad():
            logit = self.forward(Tensor(batch), train=False)["classification"]
            prob = nd.sigmoid(logit).data[:, 0]
        if not np.isfinite(prob).all():
            raise nd.NonFiniteError("probability output is non-finite")
        return prob

    # -- state -------------------------------------------------------------

    def state_arrays(self):
        return [t.data.copy() for _, t, _, _ in self.named_tensors()]

    def load_state_arrays(self, arrays):
        tensors = [t for _, t, _, _ in self.named_tensors()]
        if len(arrays) != len(tensors):
            raise ValueError("state array count mismatch")
        for tensor, arr in zip(tensors, arrays):
            if tensor.data.shape != arr.shape:
                raise ValueError("state array shape mismatch")
            tensor.data[...] = arr

    def clone(self):
        other = Model(self.config, self.seed)
        other.load_state_arrays(self.state_arrays())
        other.trainable = dict(self.trainable)
        other.target_mean = self.target_mean
        other.target_sd = self.target_sd
        return other


def build_model(config: ModelConfig, seed: int) -> Model:
    """Deterministically initialized model: He fan-in conv/linear weights,
    zero biases and betas, unit gammas, zero/one running stats."""
    return Model(config, seed)


# ---------------------------------------------------------------------------
# checkpoint file format
#
# Plain-text header terminated by a blank line, then the raw little-endian
# float64 buffers of every tensor named in the header, concatenated in
# declared order.


def save_checkpoint(model: Model, path):
    lines = [CHECKPOINT_MAGIC]
    cfg = model.config
    lines.append(f"input_size={cfg.input_size}")
    lines.append(f"in_channels={cfg.in_channels}")
    lines.append(f"stem_channels={cfg.stem_channels}")
    lines.append("blocks_per_stage=" + ",".join(str(b) for b in cfg.blocks_per_stage))
    lines.append("channels_per_stage=" + ",".join(str(c) for c in cfg.channels_per_stage))
    lines.append(f"head={cfg.head}")
    lines.append(f"target_mean={model.target_mean!r}")
    lines.append(f"target_sd={model.target_sd!r}")
    lines.append("groups=" + ",".join(model.group_order))
    lines.append("trainable=" + ",".join(g for g in model.group_order if model.trainable[g]))
    entries = list(model.named_tensors())
    lines.append(f"tensors={len(entries)}")
    for name, tensor, _, _ in entries:
        shape = ",".join(str(s) for s in tensor.data.shape) or "0"
        lines.append(f"tensor={name} shape={shape}")
    header = "\n".join(lines) + "\n\n"

    blob = io.BytesIO()
    blob.write(header.encode("ascii"))
    for _, tensor, _, _ in entries:
        blob.write(tensor.data.astype("<f8").tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(blob.getvalue())


def _parse_header(text):
    fields = {}
    tensor_specs = []
    for line in text.split("\n")[1:]:
        key, _, value = line.partition("=")
        if key == "tensor":
            name, _, shape = value.partition(" shape=")
            dims = tuple(int(d) for d in shape.split(",")) if shape != "0" else ()
            tensor_specs.append((name, dims))
        else:
            fields[key] = value
    return fields, tensor_specs


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        raw = fh.read()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise CheckpointError(f"{path}: missing header terminator")
    header = raw[:sep].decode("ascii", errors="replace")
    if not header.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: bad magic or unsupported checkpoint version")
    fields, tensor_specs = _parse_header(header)

    try:
        config = ModelConfig(
            input_size=int(fields["input_size"]),
            in_channels=int(fields["in_channels"]),
            stem_channels=int(fields["stem_channels"]),
            blocks_per_stage=tuple(int(v) for v in fields["blocks_per_stage"].split(",")),
            channels_per_stage=tuple(int(v) for v in fields["channels_per_stage"].split(",")),
            head=fields["head"],
        )
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from exc

    model = Model(config, seed=0)
    entries = list(model.named_tensors())
    if [name for name, _ in tensor_specs] != [name for name, _, _, _ in entries]:
        raise CheckpointError(f"{path}: tensor list does not match the declared architecture")

    payload = raw[sep + 2:]
    expected = sum(int(np.prod(dims)) if dims else 1 for _, dims in tensor_specs) * 8
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: payload has {len(payload)} bytes, expected {expected} (truncated?)"
        )
    offset = 0
    for (name, dims), (_, tensor, _, _) in zip(tensor_specs, entries):
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        if dims != tensor.data.shape:
            raise CheckpointError(f"{path}: tensor {name} shape mismatch")
        tensor.data[...] = arr.reshape(dims)

    model.target_mean = float(fields["target_mean"])
    model.target_sd = float(fields["target_sd"])
    trainable = set(filter(None, fields.get("trainable", "").split(",")))
    model.set_trainable(trainable)
    return model
