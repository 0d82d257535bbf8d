# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""Shared residual feature extractor and the PS, FC and CNN classifier heads."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import NamedTuple
from typing import Optional

import torch
from torch import nn

from t2caps import backend
from t2caps.capsule import FcCapsuleLayer
from t2caps.capsule import PsCapsuleLayer
from t2caps.capsule import RoutingTrace
from t2caps.capsule import capsule_lengths
from t2caps.util.constants import CNN_HIDDEN_FEATURES
from t2caps.util.constants import DEFAULT_ROUTING_ITERATIONS
from t2caps.util.constants import FEATURE_CHANNELS
from t2caps.util.constants import HEAD_KINDS
from t2caps.util.constants import HIGH_CAPSULE_DIM
from t2caps.util.constants import LOW_CAPSULE_DIM
from t2caps.util.constants import NUM_CLASSES
from t2caps.util.constants import POOLED_SIZE
from t2caps.util.errors import ConfigurationError

MIN_INPUT_EXTENT = 8
STAGE_CHANNELS = (16, 32, 64)
STAGE_BLOCKS = (3, 2, 2)


class HeadOutput(NamedTuple):
    """Class probabilities and, for capsule heads, the routing trace.

    :param probabilities: [batch, q] values in [0, 1]
    :param trace: Routing trace, None for the CNN head
    """

    probabilities: torch.Tensor
    trace: Optional[RoutingTrace]


class ModelOutput(NamedTuple):
    """Everything a forward pass exposes to training, evaluation and visualization.

    :param probabilities: [batch, q] class probabilities
    :param trace: Routing trace of capsule heads, None for the CNN head
    :param stem: First convolution feature map after BN and ReLU
    :param features: Last extractor feature map [batch, 64, H, W]
    """

    probabilities: torch.Tensor
    trace: Optional[RoutingTrace]
    stem: torch.Tensor
    features: torch.Tensor


class Conv2d(nn.Module):
    """Bias-free square convolution running through ``backend.conv2d``.

    :param in_channels: Input channel count
    :param out_channels: Output channel count
    :param kernel_size: Kernel extent
    :param stride: Stride
    :param padding: Zero padding
    """

    def __init__(  # pylint: disable=too-many-arguments
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
    ):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = nn.Parameter(
            torch.empty(out_channels, in_channels, kernel_size, kernel_size),
        )
        # Same initialization as torch.nn.Conv2d
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return backend.conv2d(x, self.weight, self.stride, self.padding)


class BatchNorm2d(nn.Module):
    """Per-channel batch normalization running through ``backend.batchnorm2d``.

    :param channels: Channel count
    """

    running_mean: torch.Tensor
    running_var: torch.Tensor

    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return backend.batchnorm2d(
            x,
            self.weight,
            self.bias,
            self.running_mean,
            self.running_var,
            self.training,
        )


def _conv3x3(in_ch: int, out_ch: int, stride: int = 1) -> Conv2d:
    return Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1)


class BasicBlock(nn.Module):
    """Two 3x3 convolutions with an identity shortcut, ReLU after the addition.

    :param channels: Input and output channel count
    """

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = _conv3x3(channels, channels)
        self.bn1 = BatchNorm2d(channels)
        self.conv2 = _conv3x3(channels, channels)
        self.bn2 = BatchNorm2d(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Apply the block.

        :param x: Input map
        :return: Output map of the same shape
        """
        out = backend.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return backend.relu(out + x)


class DownsampleBlock(nn.Module):
    """Stride-2 residual block with a 1x1 stride-2 projection shortcut.

    :param in_channels: Input channel count
    :param out_channels: Output channel count
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = _conv3x3(in_channels, out_channels, stride=2)
        self.bn1 = BatchNorm2d(out_channels)
        self.conv2 = _conv3x3(out_channels, out_channels)
        self.bn2 = BatchNorm2d(out_channels)
        self.shortcut = nn.Sequential(
            OrderedDict(
                [
                    (
                        "conv",
                        Conv2d(in_channels, out_channels, kernel_size=1, stride=2),
                    ),
                    ("bn", BatchNorm2d(out_channels)),
                ],
            ),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Apply the block.

        :param x: Input map
        :return: Output map with halved (rounded up) spatial extent
        """
        out = backend.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return backend.relu(out + self.shortcut(x))


class FeatureExtractor(nn.Module):
    """Stem conv, then 3 basic blocks @16, down 16->32, 2 @32, down 32->64, 2 @64.

    :param in_channels: 1 for grayscale datasets, 3 for RGB
    :raise ConfigurationError: On unsupported channel counts
    """

    def __init__(self, in_channels: int):
        super().__init__()
        if in_channels not in (1, 3):
            raise ConfigurationError(f"Unsupported in_channels: {in_channels}")
        self.in_channels = in_channels
        first, second, third = STAGE_CHANNELS
        self.stem = nn.Sequential(
            OrderedDict(
                [
                    ("conv", _conv3x3(in_channels, first, stride=2)),
                    ("bn", BatchNorm2d(first)),
                    ("relu", nn.ReLU()),
                ],
            ),
        )
        self.stage1 = nn.Sequential(
            *[BasicBlock(first) for _ in range(STAGE_BLOCKS[0])],
        )
        self.down1 = DownsampleBlock(first, second)
        self.stage2 = nn.Sequential(
            *[BasicBlock(second) for _ in range(STAGE_BLOCKS[1])],
        )
        self.down2 = DownsampleBlock(second, third)
        self.stage3 = nn.Sequential(
            *[BasicBlock(third) for _ in range(STAGE_BLOCKS[2])],
        )

    def forward(
        self,
        image: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Extract features from single- or two-label images.

        :param image: [batch, c, h, w] with h, w >= 8
        :raise ConfigurationError: On wrong channel counts or too-small inputs
        :return: Stem map and final map [batch, 64, ceil(h/8), ceil(w/8)]
        """
        if image.dim() != 4 or image.shape[1] != self.in_channels:
            raise ConfigurationError(
                f"Expected [batch, {self.in_channels}, h, w], got {tuple(image.shape)}",
            )
        if image.shape[2] < MIN_INPUT_EXTENT or image.shape[3] < MIN_INPUT_EXTENT:
            raise ConfigurationError(
                f"Input {tuple(image.shape[2:])} smaller than "
                f"{MIN_INPUT_EXTENT}x{MIN_INPUT_EXTENT}",
            )
        stem = self.stem(image)
        out = self.stage3(self.down2(self.stage2(self.down1(self.stage1(stem)))))
        return stem, out


def reshape_to_capsules(features: torch.Tensor, capsule_dim: int) -> torch.Tensor:
    """Cut a feature map into capsules along the channel axis.

    Capsule k at site (y, x) takes channels [k*d, (k+1)*d); capsule index is
    i = k*H*W + y*W + x.

    :param features: [batch, C, H, W] with C divisible by capsule_dim
    :param capsule_dim: Capsule dimension d
    :raise ConfigurationError: If C is not divisible by d
    :return: Capsules [batch, (C/d)*H*W, d]
    """
    batch, channels, height, width = features.shape
    if channels % capsule_dim:
        raise ConfigurationError(
            f"{channels} channels cannot be cut into capsules of dim {capsule_dim}",
        )
    slots = channels // capsule_dim
    return (
        features.reshape(batch, slots, capsule_dim, height, width)
        .permute(0, 1, 3, 4, 2)
        .reshape(batch, slots * height * width, capsule_dim)
    )


def invert_reshape(
    weights: torch.Tensor,
    slots: int,
    height: int,
    width: int,
) -> torch.Tensor:
    """Place per-capsule scalars back at their (slot, y, x) positions.

    :param weights: [..., N] one value per low-level capsule, N = slots*H*W
    :param slots: Capsules per site (C/d)
    :param height: Feature map height
    :param width: Feature map width
    :raise ConfigurationError: If N does not match the geometry
    :return: [..., slots, H, W]
    """
    if weights.shape[-1] != slots * height * width:
        raise ConfigurationError(
            f"{weights.shape[-1]} capsules do not fit geometry "
            f"{slots}x{height}x{width}",
        )
    return weights.reshape(*weights.shape[:-1], slots, height, width)


class PsHead(nn.Module):
    """Reshape the unpooled map into capsules and route them with a PS layer.

    :param num_classes: Number of high-level capsules q
    :param iterations: Routing iterations
    """

    kind = "ps"

    def __init__(self, num_classes: int, iterations: int):
        super().__init__()
        self.capsules = PsCapsuleLayer(
            num_classes,
            LOW_CAPSULE_DIM,
            HIGH_CAPSULE_DIM,
            iterations,
        )

    def forward(self, features: torch.Tensor) -> HeadOutput:
        """Classify a map of any spatial size, N = 2*H*W capsules.

        :param features: [batch, 64, H, W]
        :return: Capsule lengths and routing trace
        """
        trace = self.capsules(reshape_to_capsules(features, LOW_CAPSULE_DIM))
        return HeadOutput(capsule_lengths(trace.outputs), trace)


class FcHead(nn.Module):
    """Pool to 4x4, reshape into 32 capsules and route them with an FC layer.

    :param num_classes: Number of high-level capsules q
    :param iterations: Routing iterations
    """

    kind = "fc"

    def __init__(self, num_classes: int, iterations: int):
        super().__init__()
        num_in = (FEATURE_CHANNELS // LOW_CAPSULE_DIM) * POOLED_SIZE * POOLED_SIZE
        self.capsules = FcCapsuleLayer(
            num_classes,
            num_in,
            LOW_CAPSULE_DIM,
            HIGH_CAPSULE_DIM,
            iterations,
        )

    def forward(self, features: torch.Tensor) -> HeadOutput:
        """Classify a map pooled to a fixed 4x4 size.

        :param features: [batch, 64, H, W] with H, W >= 4
        :return: Capsule lengths and routing trace
        """
        pooled = backend.adaptive_avg_pool(features, POOLED_SIZE, POOLED_SIZE)
        trace = self.capsules(reshape_to_capsules(pooled, LOW_CAPSULE_DIM))
        return HeadOutput(capsule_lengths(trace.outputs), trace)


class CnnHead(nn.Module):
    """Pool to 4x4, flatten, linear 1024->256, ReLU, linear 256->q, sigmoid.

    :param num_classes: Number of outputs q
    """

    kind = "cnn"

    def __init__(self, num_classes: int):
        super().__init__()
        self.fc1 = nn.Linear(
            FEATURE_CHANNELS * POOLED_SIZE * POOLED_SIZE,
            CNN_HIDDEN_FEATURES,
        )
        self.fc2 = nn.Linear(CNN_HIDDEN_FEATURES, num_classes)

    def forward(self, features: torch.Tensor) -> HeadOutput:
        """Classify a map pooled to a fixed 4x4 size.

        :param features: [batch, 64, H, W] with H, W >= 4
        :return: Sigmoid outputs, no routing trace
        """
        pooled = backend.adaptive_avg_pool(features, POOLED_SIZE, POOLED_SIZE)
        hidden = backend.relu(self.fc1(torch.flatten(pooled, start_dim=1)))
        return HeadOutput(backend.sigmoid(self.fc2(hidden)), None)


class Top2Model(nn.Module):
    """Feature extractor composed with one classifier head.

    :param in_channels: Image channel count
    :param head_kind: One of "ps", "fc", "cnn"
    :param num_classes: Class count q
    :param iterations: Routing iterations for capsule heads
    :raise ConfigurationError: On an unknown head kind
    """

    def __init__(
        self,
        in_channels: int,
        head_kind: str,
        num_classes: int = NUM_CLASSES,
        iterations: int = DEFAULT_ROUTING_ITERATIONS,
    ):
        super().__init__()
        if head_kind not in HEAD_KINDS:
            raise ConfigurationError(f"Unknown head kind: {head_kind}")
        self.head_kind = head_kind
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.iterations = iterations
        self.extractor = FeatureExtractor(in_channels)
        self.head: nn.Module
        if head_kind == "ps":
            self.head = PsHead(num_classes, iterations)
        elif head_kind == "fc":
            self.head = FcHead(num_classes, iterations)
        else:
            self.head = CnnHead(num_classes)

    def forward(self, image: torch.Tensor) -> ModelOutput:
        """Run the whole model.

        :param image: [batch, c, h, w] images, h and w at least 8
        :return: Probabilities plus the intermediate maps and routing trace
        """
        stem, features = self.extractor(image)
        head_out = self.head(features)
        return ModelOutput(head_out.probabilities, head_out.trace, stem, features)


def build_model(
    in_channels: int,
    head_kind: str,
    num_classes: int = NUM_CLASSES,
    iterations: int = DEFAULT_ROUTING_ITERATIONS,
) -> Top2Model:
    """Build one of the three benchmark models.

    :param in_channels: 1 (MNIST, FashionMNIST) or 3 (CIFAR10)
    :param head_kind: One of "ps", "fc", "cnn"
    :param num_classes: Class count q
    :param iterations: Routing iterations for capsule heads
    :return: The model
    """
    return Top2Model(in_channels, head_kind, num_classes, iterations)


def count_parameters(model: nn.Module) -> tuple[int, OrderedDict[str, int]]:
    """Count trainable scalars, grouped by the layer that owns them.

    BN running statistics are buffers, not parameters, and are not counted.

    :param model: Built model
    :return: Total count and an ordered census of layer name to count
    """
    census: OrderedDict[str, int] = OrderedDict()
    for name, param in model.named_parameters():
        layer = name.rsplit(".", 1)[0]
        census[layer] = census.get(layer, 0) + param.numel()
    return sum(census.values()), census
