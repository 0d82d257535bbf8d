# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""Test the capsule.py file."""

from __future__ import annotations

import math

import pytest
import torch

from t2caps import backend
from t2caps import capsule
from t2caps.util.errors import ConfigurationError


def _route_by_loops(
    u_hat: list[list[list[float]]],
    iterations: int,
) -> tuple[list[list[float]], list[list[float]]]:
    """Scalar re-statement of k-means routing used as an oracle.

    :param u_hat: Nested [N][M][d] transformed capsules
    :param iterations: Routing iterations
    :return: Squashed outputs [M][d] and couplings [N][M]
    """
    num_in, num_out, dim = len(u_hat), len(u_hat[0]), len(u_hat[0][0])
    v = [
        [sum(u_hat[i][j][k] for i in range(num_in)) / num_out for k in range(dim)]
        for j in range(num_out)
    ]
    c = [[1.0 / num_out] * num_out for _ in range(num_in)]
    for _ in range(iterations):
        norms = [math.sqrt(sum(x * x for x in v[j])) for j in range(num_out)]
        for i in range(num_in):
            logits = [
                sum(u_hat[i][j][k] * v[j][k] for k in range(dim)) / norms[j]
                if norms[j] > 0
                else 0.0
                for j in range(num_out)
            ]
            top = max(logits)
            exps = [math.exp(b - top) for b in logits]
            c[i] = [e / sum(exps) for e in exps]
        v = [
            [sum(c[i][j] * u_hat[i][j][k] for i in range(num_in)) for k in range(dim)]
            for j in range(num_out)
        ]
    squashed = []
    for vec in v:
        norm = math.sqrt(sum(x * x for x in vec))
        squashed.append([norm / (1 + norm * norm) * x for x in vec])
    return squashed, c


def test_squash_bounds() -> None:
    """Test that squash keeps direction, bounds length below 1 and maps 0 to 0."""
    v = torch.tensor([[3.0, 4.0], [0.0, 0.0]])
    out = capsule.squash(v)
    assert out[0].tolist() == pytest.approx([5 / 26 * 3, 5 / 26 * 4])
    assert out[1].tolist() == [0.0, 0.0]
    lengths = capsule.capsule_lengths(capsule.squash(torch.randn(50, 8) * 10))
    assert bool((lengths < 1).all())


def test_squash_gradient() -> None:
    """Test squash against central finite differences in float64."""
    inp = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    assert backend.gradient_check(capsule.squash, [inp])


def test_transform_shapes() -> None:
    """Test PS and FC transform output shapes and the FC capsule count check."""
    u = torch.randn(2, 5, 4)
    assert capsule.transform_ps(u, torch.randn(3, 4, 6)).shape == (2, 5, 3, 6)
    assert capsule.transform_ps(torch.randn(2, 9, 4), torch.randn(3, 4, 6)).shape == (
        2,
        9,
        3,
        6,
    )
    assert capsule.transform_fc(u, torch.randn(3, 5, 4, 6)).shape == (2, 5, 3, 6)
    with pytest.raises(ConfigurationError):
        capsule.transform_fc(torch.randn(2, 6, 4), torch.randn(3, 5, 4, 6))
    with pytest.raises(ConfigurationError):
        capsule.transform_ps(torch.randn(2, 5, 3), torch.randn(3, 4, 6))


def test_couplings_sum_to_one() -> None:
    """Test that every low-level capsule distributes exactly one unit of coupling."""
    trace = capsule.kmeans_route(torch.randn(3, 12, 10, 8), 3)
    assert torch.allclose(trace.couplings.sum(dim=2), torch.ones(3, 12), atol=1e-5)
    assert trace.outputs.shape == (3, 10, 8)


def test_zero_iterations_are_uniform() -> None:
    """Test that r = 0 leaves couplings at 1/M and outputs the squashed mean."""
    u_hat = torch.randn(1, 4, 5, 3, dtype=torch.float64)
    trace = capsule.kmeans_route(u_hat, 0)
    uniform = torch.full((1, 4, 5), 0.2, dtype=torch.float64)
    assert torch.allclose(trace.couplings, uniform)
    assert torch.allclose(trace.outputs, capsule.squash(u_hat.sum(dim=1) / 5))


def test_zero_capsules_route_uniformly() -> None:
    """Test the zero-norm guard: all-zero capsules give uniform couplings, no NaN."""
    trace = capsule.kmeans_route(torch.zeros(2, 3, 4, 5), 3)
    assert torch.allclose(trace.couplings, torch.full((2, 3, 4), 0.25))
    assert torch.equal(trace.outputs, torch.zeros(2, 4, 5))


def test_negative_iterations_rejected() -> None:
    """Test that a negative iteration count is a configuration error."""
    with pytest.raises(ConfigurationError):
        capsule.kmeans_route(torch.randn(1, 2, 2, 2), -1)


@pytest.mark.parametrize("num_in, num_out, dim", [(1, 1, 1), (2, 3, 2), (4, 3, 3)])
@pytest.mark.parametrize("iterations", [0, 1, 3])
def test_routing_matches_loop_oracle(
    num_in: int,
    num_out: int,
    dim: int,
    iterations: int,
) -> None:
    """Test the vectorized routing against a scalar loop re-statement.

    :param num_in: Low-level capsules N
    :param num_out: High-level capsules M
    :param dim: Capsule dimension d
    :param iterations: Routing iterations
    """
    generator = torch.Generator().manual_seed(num_in * 100 + num_out * 10 + dim)
    u_hat = torch.randn(num_in, num_out, dim, dtype=torch.float64, generator=generator)
    expected_v, expected_c = _route_by_loops(u_hat.tolist(), iterations)

    trace = capsule.kmeans_route(u_hat[None], iterations)
    assert torch.allclose(
        trace.outputs[0],
        torch.tensor(expected_v, dtype=torch.float64),
        rtol=0,
        atol=1e-9,
    )
    assert torch.allclose(
        trace.couplings[0],
        torch.tensor(expected_c, dtype=torch.float64),
        rtol=0,
        atol=1e-9,
    )


def test_ps_layer_permutation_equivariance() -> None:
    """Test that permuting low-level capsules permutes coupling rows and leaves the
    high-level capsules unchanged."""
    torch.manual_seed(1)
    u = torch.randn(2, 7, 4, dtype=torch.float64)
    weight = torch.randn(3, 4, 5, dtype=torch.float64)
    perm = torch.randperm(7)

    trace = capsule.ps_capsule_layer(u, weight, 3)
    permuted = capsule.ps_capsule_layer(u[:, perm], weight, 3)
    assert torch.allclose(trace.outputs, permuted.outputs, rtol=0, atol=1e-6)
    assert torch.allclose(
        trace.couplings[:, perm],
        permuted.couplings,
        rtol=0,
        atol=1e-6,
    )


def test_fc_with_shared_weights_equals_ps() -> None:
    """Test that an FC layer whose matrices are shared over i reproduces the PS
    layer."""
    torch.manual_seed(2)
    u = torch.randn(3, 6, 4)
    ps_weight = torch.randn(5, 4, 2)
    fc_weight = ps_weight[:, None].expand(5, 6, 4, 2).contiguous()

    ps_trace = capsule.ps_capsule_layer(u, ps_weight, 3)
    fc_trace = capsule.fc_capsule_layer(u, fc_weight, 3)
    assert torch.allclose(ps_trace.outputs, fc_trace.outputs, atol=1e-6)
    assert torch.allclose(ps_trace.couplings, fc_trace.couplings, atol=1e-6)


def test_ps_layer_gradient() -> None:
    """Test the full PS layer through three routing iterations against finite
    differences in float64."""
    torch.manual_seed(3)
    u = torch.randn(2, 3, 4, dtype=torch.float64, requires_grad=True)
    weight = torch.randn(2, 4, 3, dtype=torch.float64, requires_grad=True)

    def layer(u_in: torch.Tensor, w_in: torch.Tensor) -> torch.Tensor:
        return capsule.ps_capsule_layer(u_in, w_in, 3).outputs

    assert backend.gradient_check(layer, [u, weight])


def test_layer_modules() -> None:
    """Test the module wrappers' parameter shapes and their capsule count rules."""
    ps_layer = capsule.PsCapsuleLayer(10, 32, 8, 3)
    fc_layer = capsule.FcCapsuleLayer(10, 32, 32, 8, 3)
    assert ps_layer.weight.numel() == 2560
    assert fc_layer.weight.numel() == 81920

    assert ps_layer(torch.randn(2, 56, 32)).outputs.shape == (2, 10, 8)
    assert fc_layer(torch.randn(2, 32, 32)).couplings.shape == (2, 32, 10)
    with pytest.raises(ConfigurationError):
        fc_layer(torch.randn(2, 56, 32))
