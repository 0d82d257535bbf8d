# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""Capsule transforms and the modified k-means routing procedure.

Shapes used throughout:
    U      [batch, N, d_in]         low-level capsules
    U_hat  [batch, N, M, d_out]     transformed capsules, one per (low, high) pair
    V      [batch, M, d_out]        squashed high-level capsules
    C      [batch, N, M]            coupling coefficients, rows sum to one over M
"""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
from torch import nn

from t2caps import backend
from t2caps.util.errors import ConfigurationError


class RoutingTrace(NamedTuple):
    """Outputs of one routing pass.

    :param outputs: Squashed high-level capsules V, [batch, M, d_out]
    :param couplings: Coupling coefficients C from the final iteration, [batch, N, M]
    """

    outputs: torch.Tensor
    couplings: torch.Tensor


def squash(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Bound capsule lengths to [0, 1) while keeping their direction.

    Computes ||v|| / (1 + ||v||^2) * v, which maps the zero vector to zero without
    dividing by the norm.

    :param v: Capsules, the capsule axis given by dim
    :param dim: Axis holding the capsule components
    :return: Squashed capsules of the same shape
    """
    norm = torch.linalg.vector_norm(v, dim=dim, keepdim=True)
    return norm / (1 + norm**2) * v


def capsule_lengths(v: torch.Tensor) -> torch.Tensor:
    """L2 length of each capsule.

    :param v: Capsules of shape [batch, M, d]
    :return: Lengths of shape [batch, M]
    """
    return torch.linalg.vector_norm(v, dim=-1)


def _check_capsules(u: torch.Tensor, d_in: int) -> None:
    if u.dim() != 3:
        raise ConfigurationError(
            f"Capsules must have shape [batch, N, d], got {tuple(u.shape)}",
        )
    if u.shape[2] != d_in:
        raise ConfigurationError(
            f"Capsule dimension {u.shape[2]} does not match transform input {d_in}",
        )


def transform_ps(u: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Apply one shared transform matrix per high-level capsule.

    :param u: Low-level capsules [batch, N, d_in], any N
    :param weight: PS weights [M, d_in, d_out]
    :return: Transformed capsules [batch, N, M, d_out] with out[b, i, j] = W_j u_i
    """
    _check_capsules(u, weight.shape[1])
    return torch.einsum("bni,mio->bnmo", u, weight)


def transform_fc(u: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Apply an exclusive transform matrix per (low, high) capsule pair.

    :param u: Low-level capsules [batch, N, d_in]
    :param weight: FC weights [M, N, d_in, d_out]
    :raise ConfigurationError: If the run-time N differs from the N baked into weight
    :return: Transformed capsules [batch, N, M, d_out] with out[b, i, j] = W_ij u_i
    """
    _check_capsules(u, weight.shape[2])
    if u.shape[1] != weight.shape[1]:
        raise ConfigurationError(
            f"FC capsule layer was built for N={weight.shape[1]} low-level capsules, "
            f"got N={u.shape[1]}",
        )
    return torch.einsum("bni,mnio->bnmo", u, weight)


def kmeans_route(u_hat: torch.Tensor, iterations: int) -> RoutingTrace:
    """Cluster transformed capsules into high-level capsules by dot-product k-means.

    v_j starts at (1/M) * sum_i u_hat_ij. Each iteration recomputes
    b_ij = (u_hat_ij . v_j) / ||v_j|| from scratch, takes c_ij = softmax_j(b_ij) and
    sets v_j = sum_i c_ij u_hat_ij. A high-level capsule with zero norm contributes
    b_ij = 0. With zero iterations C is uniform 1/M.

    :param u_hat: Transformed capsules [batch, N, M, d_out]
    :param iterations: Number of routing iterations r >= 0
    :raise ConfigurationError: On a negative iteration count or a wrong rank
    :return: Squashed high-level capsules and the final coupling coefficients
    """
    if iterations < 0:
        raise ConfigurationError(f"Routing iterations must be >= 0, got {iterations}")
    if u_hat.dim() != 4:
        raise ConfigurationError(
            f"Routing needs u_hat of shape [batch, N, M, d], got {tuple(u_hat.shape)}",
        )
    batch, num_in, num_out, _ = u_hat.shape

    v = u_hat.sum(dim=1) / num_out
    couplings = u_hat.new_full((batch, num_in, num_out), 1.0 / num_out)
    for _ in range(iterations):
        norm = torch.linalg.vector_norm(v, dim=-1).unsqueeze(1)  # [batch, 1, M]
        dots = torch.einsum("bnmd,bmd->bnm", u_hat, v)
        nonzero = norm > 0
        logits = torch.where(
            nonzero,
            dots / torch.where(nonzero, norm, torch.ones_like(norm)),
            torch.zeros_like(dots),
        )
        couplings = backend.softmax(logits, axis=2)
        v = torch.einsum("bnm,bnmd->bmd", couplings, u_hat)
    return RoutingTrace(squash(v), couplings)


def ps_capsule_layer(
    u: torch.Tensor,
    weight: torch.Tensor,
    iterations: int,
) -> RoutingTrace:
    """Parameter-sharing capsule layer: transform_ps followed by k-means routing.

    :param u: Low-level capsules [batch, N, d_in]
    :param weight: PS weights [M, d_in, d_out]
    :param iterations: Routing iterations
    :return: Routing trace
    """
    return kmeans_route(transform_ps(u, weight), iterations)


def fc_capsule_layer(
    u: torch.Tensor,
    weight: torch.Tensor,
    iterations: int,
) -> RoutingTrace:
    """Fully connected capsule layer: transform_fc followed by k-means routing.

    :param u: Low-level capsules [batch, N, d_in]
    :param weight: FC weights [M, N, d_in, d_out]
    :param iterations: Routing iterations
    :return: Routing trace
    """
    return kmeans_route(transform_fc(u, weight), iterations)


def _init_transform(weight: torch.Tensor, d_in: int) -> None:
    bound = 1.0 / math.sqrt(d_in)
    nn.init.uniform_(weight, -bound, bound)


class PsCapsuleLayer(nn.Module):
    """PS capsule layer holding M transform matrices of shape [d_in, d_out].

    :param num_out: Number of high-level capsules M
    :param d_in: Low-level capsule dimension
    :param d_out: High-level capsule dimension
    :param iterations: Routing iterations
    """

    def __init__(self, num_out: int, d_in: int, d_out: int, iterations: int):
        super().__init__()
        self.iterations = iterations
        self.weight = nn.Parameter(torch.empty(num_out, d_in, d_out))
        _init_transform(self.weight, d_in)

    def forward(self, u: torch.Tensor) -> RoutingTrace:
        """Route any number of low-level capsules.

        :param u: Low-level capsules [batch, N, d_in]
        :return: Routing trace
        """
        return ps_capsule_layer(u, self.weight, self.iterations)


class FcCapsuleLayer(nn.Module):
    """FC capsule layer holding M * N transform matrices of shape [d_in, d_out].

    :param num_out: Number of high-level capsules M
    :param num_in: Number of low-level capsules N, fixed at build time
    :param d_in: Low-level capsule dimension
    :param d_out: High-level capsule dimension
    :param iterations: Routing iterations
    """

    def __init__(  # pylint: disable=too-many-arguments
        self,
        num_out: int,
        num_in: int,
        d_in: int,
        d_out: int,
        iterations: int,
    ):
        super().__init__()
        self.iterations = iterations
        self.weight = nn.Parameter(torch.empty(num_out, num_in, d_in, d_out))
        _init_transform(self.weight, d_in)

    def forward(self, u: torch.Tensor) -> RoutingTrace:
        """Route exactly N low-level capsules.

        :param u: Low-level capsules [batch, N, d_in]
        :return: Routing trace
        """
        return fc_capsule_layer(u, self.weight, self.iterations)
