# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""Differentiable tensor contract the rest of t2caps computes against.

Everything is backed by torch: tensors record their graph, ``backward`` runs reverse
mode and ADAM comes from ``torch.optim``. The wrappers here only add the shape checks,
finiteness checks and defaults the models rely on.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable
from typing import Iterable
from typing import Iterator
from typing import Sequence

import torch
from torch.nn import functional as F  # noqa: N812

from t2caps.util.errors import ConfigurationError
from t2caps.util.errors import NumericError

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1
ADAM_LR = 1e-3
ADAM_BETAS = (0.9, 0.999)
ADAM_EPSILON = 1e-8

GRADCHECK_STEP = 1e-6
GRADCHECK_RTOL = 1e-4
GRADCHECK_ATOL = 1e-6


def ensure_finite(tensor: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    """Refuse NaN or Inf values.

    :param tensor: Values to check
    :param what: Name used in the error message
    :raise NumericError: If any value is not finite
    :return: The same tensor, for chaining
    """
    if not bool(torch.isfinite(tensor.detach()).all()):
        raise NumericError(f"Non-finite values found in {what}")
    return tensor


def conv_output_size(dim: int, kernel: int, stride: int, padding: int) -> int:
    """Spatial output extent of a convolution.

    :param dim: Input extent
    :param kernel: Kernel extent
    :param stride: Stride
    :param padding: Zero padding on both sides
    :return: floor((dim + 2 * padding - kernel) / stride) + 1
    """
    return (dim + 2 * padding - kernel) // stride + 1


def conv2d(
    inp: torch.Tensor,
    weight: torch.Tensor,
    stride: int = 1,
    padding: int = 0,
) -> torch.Tensor:
    """Bias-free 2D convolution.

    :param inp: Input of shape [batch, in_ch, h, w]
    :param weight: Kernel of shape [out_ch, in_ch, kh, kw]
    :param stride: Stride in both directions
    :param padding: Zero padding in both directions
    :raise ConfigurationError: On rank or channel mismatches
    :return: Output of shape [batch, out_ch, h', w']
    """
    if inp.dim() != 4 or weight.dim() != 4:
        raise ConfigurationError(
            f"conv2d needs rank-4 input and weight, got {tuple(inp.shape)} "
            f"and {tuple(weight.shape)}",
        )
    if inp.shape[1] != weight.shape[1]:
        raise ConfigurationError(
            f"conv2d input has {inp.shape[1]} channels, "
            f"weight expects {weight.shape[1]}",
        )
    if any(
        conv_output_size(dim, k, stride, padding) < 1
        for dim, k in zip(inp.shape[2:], weight.shape[2:])
    ):
        raise ConfigurationError(
            f"conv2d input {tuple(inp.shape)} too small for kernel "
            f"{tuple(weight.shape[2:])}",
        )
    return F.conv2d(inp, weight, bias=None, stride=stride, padding=padding)


def batchnorm2d(  # pylint: disable=too-many-arguments
    inp: torch.Tensor,
    gamma: torch.Tensor,
    beta: torch.Tensor,
    running_mean: torch.Tensor,
    running_var: torch.Tensor,
    training: bool,
) -> torch.Tensor:
    """Batch normalization over the channel axis of a rank-4 input.

    Train mode normalizes with batch statistics and updates the running statistics in
    place with momentum 0.1; eval mode uses the running statistics. A training batch
    holding a single value per channel has zero variance, so its output is beta.

    :param inp: Input of shape [batch, channels, h, w]
    :param gamma: Per-channel scale
    :param beta: Per-channel shift
    :param running_mean: Running mean, updated in train mode
    :param running_var: Running variance, updated in train mode
    :param training: Whether batch statistics are used
    :raise ConfigurationError: If the affine parameters do not match the channel count
    :return: Normalized output
    """
    if inp.dim() != 4:
        raise ConfigurationError(f"batchnorm2d needs rank 4, got {inp.dim()}")
    channels = inp.shape[1]
    if gamma.numel() != channels or beta.numel() != channels:
        raise ConfigurationError(
            f"batchnorm2d affine parameters must have {channels} entries",
        )
    if training and inp.shape[0] * inp.shape[2] * inp.shape[3] == 1:
        mean = inp.mean(dim=(0, 2, 3))
        with torch.no_grad():
            running_mean.mul_(1 - BN_MOMENTUM).add_(BN_MOMENTUM * mean.detach())
            running_var.mul_(1 - BN_MOMENTUM)
        centered = inp - mean.view(1, channels, 1, 1)
        scale = gamma / math.sqrt(BN_EPSILON)
        return centered * scale.view(1, channels, 1, 1) + beta.view(1, channels, 1, 1)
    return F.batch_norm(
        inp,
        running_mean,
        running_var,
        weight=gamma,
        bias=beta,
        training=training,
        momentum=BN_MOMENTUM,
        eps=BN_EPSILON,
    )


def relu(inp: torch.Tensor) -> torch.Tensor:
    """Rectified linear unit.

    :param inp: Input
    :return: max(inp, 0)
    """
    return F.relu(inp)


def sigmoid(inp: torch.Tensor) -> torch.Tensor:
    """Logistic sigmoid.

    :param inp: Input
    :return: 1 / (1 + exp(-inp))
    """
    return torch.sigmoid(inp)


def softmax(inp: torch.Tensor, axis: int) -> torch.Tensor:
    """Softmax along one axis.

    :param inp: Input
    :param axis: Axis that sums to one afterwards
    :raise ConfigurationError: If the axis does not exist
    :return: Normalized values
    """
    if not -inp.dim() <= axis < inp.dim():
        raise ConfigurationError(f"softmax axis {axis} invalid for rank {inp.dim()}")
    return torch.softmax(inp, dim=axis)


def adaptive_avg_pool(inp: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Average-pool a rank-4 map down to a fixed spatial size.

    Output cell i along an axis of extent H averages rows floor(i*H/out) up to
    ceil((i+1)*H/out), so neighbouring cells may share a row when H is not a multiple.

    :param inp: Input of shape [batch, channels, h, w]
    :param out_h: Target height
    :param out_w: Target width
    :raise ConfigurationError: If the input is smaller than the target
    :return: Pooled output of shape [batch, channels, out_h, out_w]
    """
    if inp.dim() != 4:
        raise ConfigurationError(f"adaptive_avg_pool needs rank 4, got {inp.dim()}")
    if inp.shape[2] < out_h or inp.shape[3] < out_w:
        raise ConfigurationError(
            f"Cannot pool {tuple(inp.shape[2:])} down to {(out_h, out_w)}",
        )
    return F.adaptive_avg_pool2d(inp, (out_h, out_w))


def backward(loss: torch.Tensor) -> None:
    """Populate gradients of every parameter reachable from a scalar loss.

    Calling this twice without clearing gradients accumulates them, as torch does.

    :param loss: Scalar produced by a recorded computation
    :raise ConfigurationError: If the loss is not a scalar
    """
    if loss.numel() != 1:
        raise ConfigurationError(
            f"backward needs a scalar loss, got shape {tuple(loss.shape)}",
        )
    ensure_finite(loss, "loss")
    loss.backward()


def make_optimizer(
    params: Iterable[torch.nn.Parameter],
    lr: float = ADAM_LR,
) -> torch.optim.Adam:
    """Create the ADAM optimizer with its default constants.

    :param params: Parameters to optimize
    :param lr: Learning rate
    :return: ADAM optimizer holding the first/second moments and step counts
    """
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPSILON)


def adam_step(optimizer: torch.optim.Optimizer) -> None:
    """Apply one bias-corrected ADAM update and clear gradients afterwards.

    :param optimizer: Optimizer created by make_optimizer
    """
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)


@contextmanager
def compute_dtype(dtype: torch.dtype) -> Iterator[None]:
    """Temporarily switch the default floating point type.

    64-bit mode exists for gradient checks; training runs in 32-bit.

    :param dtype: torch.float32 or torch.float64
    :yield: Nothing, the dtype is restored on exit
    """
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def gradient_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
) -> bool:
    """Compare analytic gradients against central finite differences in float64.

    :param fn: Function of the inputs returning a tensor
    :param inputs: float64 tensors with requires_grad set
    :raise ConfigurationError: If an input is not float64
    :return: True when every gradient agrees within tolerance
    """
    if any(t.dtype != torch.float64 for t in inputs):
        raise ConfigurationError("gradient_check needs float64 inputs")
    return bool(
        torch.autograd.gradcheck(
            fn,
            tuple(inputs),
            eps=GRADCHECK_STEP,
            atol=GRADCHECK_ATOL,
            rtol=GRADCHECK_RTOL,
        ),
    )
