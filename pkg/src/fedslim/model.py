"""Small grid detector: stacked conv/BN/leaky-ReLU blocks plus a 1x1 head.

The backbone halves the spatial resolution once per block with max pooling,
so a valid configuration ends at exactly grid_size x grid_size cells. Every
output component (box offsets, sizes, confidences, class probabilities) is
squashed into [0, 1] by a final sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    BatchNormLayer,
    ShapeError,
    Tensor,
    add,
    batchnorm_forward,
    conv2d,
    leaky_relu,
    make_batchnorm,
    max_pool2d,
    reshape,
    sigmoid,
    transpose,
)

BN_GAMMA_INIT = 0.5
LEAKY_SLOPE = 0.1


class BuildError(ValueError):
    """Raised when a detector configuration cannot produce the requested grid."""


@dataclass(frozen=True)
class DetectorConfig:
    grid_size: int = 4
    boxes_per_cell: int = 2
    num_classes: int = 3
    channel_widths: tuple[int, ...] = (16, 32, 64, 64)
    input_size: tuple[int, int] = (64, 64)

    @property
    def head_channels(self) -> int:
        return self.boxes_per_cell * 5 + self.num_classes

    def validate(self) -> None:
        if self.grid_size < 1 or self.boxes_per_cell < 1 or self.num_classes < 1:
            raise BuildError(
                f"grid_size, boxes_per_cell and num_classes must be >= 1, got "
                f"{self.grid_size}, {self.boxes_per_cell}, {self.num_classes}"
            )
        if not self.channel_widths or any(w < 1 for w in self.channel_widths):
            raise BuildError(f"channel widths must be positive, got {self.channel_widths}")
        h, w = self.input_size
        for i in range(len(self.channel_widths)):
            if h % 2 or w % 2:
                raise BuildError(
                    f"block {i} cannot pool {h}x{w} activations: spatial dims must stay even"
                )
            h, w = h // 2, w // 2
        if (h, w) != (self.grid_size, self.grid_size):
            raise BuildError(
                f"after {len(self.channel_widths)} blocks the spatial size is {h}x{w}, "
                f"expected {self.grid_size}x{self.grid_size}"
            )


@dataclass
class ConvLayer:
    kernel: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0


@dataclass
class ModelParams:
    """Ordered detector state: backbone blocks, head, and the shape config."""

    config: DetectorConfig
    blocks: list[tuple[ConvLayer, BatchNormLayer]]
    head: ConvLayer

    def trainable_tensors(self):
        """Yield (name, Tensor) for every trainable parameter, in fixed order."""
        for i, (conv, bn) in enumerate(self.blocks):
            yield f"block{i}.conv.kernel", conv.kernel
            yield f"block{i}.bn.gamma", bn.gamma
            yield f"block{i}.bn.beta", bn.beta
        yield "head.kernel", self.head.kernel
        yield "head.bias", self.head.bias

    def state_arrays(self):
        """Yield (name, ndarray) for all transmitted state, trainables plus BN stats."""
        for i, (conv, bn) in enumerate(self.blocks):
            yield f"block{i}.conv.kernel", conv.kernel.data
            yield f"block{i}.bn.gamma", bn.gamma.data
            yield f"block{i}.bn.beta", bn.beta.data
            yield f"block{i}.bn.running_mean", bn.running_mean
            yield f"block{i}.bn.running_var", bn.running_var
        yield "head.kernel", self.head.kernel.data
        yield "head.bias", self.head.bias.data

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.trainable_tensors())

    def clone(self) -> "ModelParams":
        blocks = []
        for conv, bn in self.blocks:
            blocks.append(
                (
                    ConvLayer(
                        kernel=Tensor(conv.kernel.data.copy(), requires_grad=True),
                        stride=conv.stride,
                        padding=conv.padding,
                    ),
                    BatchNormLayer(
                        gamma=Tensor(bn.gamma.data.copy(), requires_grad=True),
                        beta=Tensor(bn.beta.data.copy(), requires_grad=True),
                        running_mean=bn.running_mean.copy(),
                        running_var=bn.running_var.copy(),
                        epsilon=bn.epsilon,
                        momentum=bn.momentum,
                    ),
                )
            )
        head = ConvLayer(
            kernel=Tensor(self.head.kernel.data.copy(), requires_grad=True),
            bias=Tensor(self.head.bias.data.copy(), requires_grad=True),
            stride=self.head.stride,
            padding=self.head.padding,
        )
        return ModelParams(config=self.config, blocks=blocks, head=head)

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        """Overwrite all state arrays in place from a name -> array mapping."""
        for name, arr in self.state_arrays():
            src = state[name]
            if src.shape != arr.shape:
                raise ShapeError(f"state entry {name}: expected {arr.shape}, got {src.shape}")
            arr[...] = src


def build_model(config: DetectorConfig, seed: int) -> ModelParams:
    """He-initialized detector parameters, deterministic in (config, seed)."""
    config.validate()
    rng = np.random.default_rng(seed)
    blocks: list[tuple[ConvLayer, BatchNormLayer]] = []
    c_in = 3
    for width in config.channel_widths:
        fan_in = c_in * 9
        kernel = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(width, c_in, 3, 3))
        conv = ConvLayer(kernel=Tensor(kernel, requires_grad=True), stride=1, padding=1)
        bn = make_batchnorm(width, gamma_init=BN_GAMMA_INIT)
        blocks.append((conv, bn))
        c_in = width
    head_kernel = rng.normal(0.0, np.sqrt(2.0 / c_in), size=(config.head_channels, c_in, 1, 1))
    head = ConvLayer(
        kernel=Tensor(head_kernel, requires_grad=True),
        bias=Tensor(np.zeros(config.head_channels), requires_grad=True),
    )
    return ModelParams(config=config, blocks=blocks, head=head)


def forward(params: ModelParams, images, training: bool = False) -> Tensor:
    """Run the detector; returns (N, S, S, B*5 + num_classes) sigmoid outputs."""
    cfg = params.config
    x = images if isinstance(images, Tensor) else Tensor(images)
    h, w = cfg.input_size
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != h or x.shape[3] != w:
        raise ShapeError(f"expected images of shape (N, 3, {h}, {w}), got {x.shape}")
    for conv, bn in params.blocks:
        x = conv2d(x, conv.kernel, stride=conv.stride, padding=conv.padding)
        x = batchnorm_forward(x, bn, training=training)
        x = leaky_relu(x, slope=LEAKY_SLOPE)
        x = max_pool2d(x, 2)
    x = conv2d(x, params.head.kernel)
    x = add(x, reshape(params.head.bias, (1, cfg.head_channels, 1, 1)))
    x = transpose(x, (0, 2, 3, 1))
    return sigmoid(x)


def sgd_step(params: ModelParams, learning_rate: float) -> ModelParams:
    """In-place w <- w - lr * grad on every trainable tensor, then clear grads."""
    if learning_rate <= 0:
        raise ValueError(f"learning rate must be positive, got {learning_rate}")
    for name, t in params.trainable_tensors():
        if t.grad is None:
            raise ValueError(f"sgd_step: no gradient populated for {name}")
        t.data -= learning_rate * t.grad
        t.grad = None
    return params
