# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""Probability-guided activation maps, first-layer maps and their overlays."""

from __future__ import annotations

from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image
import torch
from torch.nn import functional as F  # noqa: N812

from t2caps.archnet import invert_reshape
from t2caps.capsule import RoutingTrace
from t2caps.capsule import capsule_lengths
from t2caps.util.constants import FEATURE_CHANNELS
from t2caps.util.constants import LOW_CAPSULE_DIM
from t2caps.util.constants import POOLED_SIZE
from t2caps.util.errors import ConfigurationError
from t2caps.util.errors import DataFormatError

DEFAULT_ALPHA = 0.5

# Colormap anchors for map values 0, 0.5 and 1 (blue, green, red), linear in between
COLORMAP_STOPS = np.array([0.0, 0.5, 1.0])
COLORMAP_RGB = np.array(
    [
        [0, 0, 255],
        [0, 255, 0],
        [255, 0, 0],
    ],
    dtype=np.float64,
)


class CapsuleGeometry(NamedTuple):
    """Shape of the feature map the low-level capsules were cut from.

    :param channels: Feature channels C
    :param height: Feature map height H
    :param width: Feature map width W
    :param capsule_dim: Low-level capsule dimension d
    """

    channels: int
    height: int
    width: int
    capsule_dim: int

    @property
    def slots(self) -> int:
        """Capsules per spatial site.

        :return: C / d
        """
        return self.channels // self.capsule_dim

    @property
    def num_capsules(self) -> int:
        """Low-level capsule count.

        :return: (C / d) * H * W
        """
        return self.slots * self.height * self.width


class ActivationMap(NamedTuple):
    """Normalized map, values in [0, 1].

    :param values: [H, W] float64
    :param geometry: Geometry of the map's source, None for first-layer maps
    """

    values: np.ndarray
    geometry: CapsuleGeometry | None = None


def geometry_for(head_kind: str, features: torch.Tensor) -> CapsuleGeometry:
    """Geometry of the capsules a head routed.

    :param head_kind: "ps" (unpooled map) or "fc" (map pooled to 4x4)
    :param features: Extractor output [batch, 64, H, W]
    :raise ConfigurationError: For heads without capsules
    :return: Capsule geometry
    """
    if head_kind == "ps":
        return CapsuleGeometry(
            FEATURE_CHANNELS,
            int(features.shape[2]),
            int(features.shape[3]),
            LOW_CAPSULE_DIM,
        )
    if head_kind == "fc":
        return CapsuleGeometry(
            FEATURE_CHANNELS,
            POOLED_SIZE,
            POOLED_SIZE,
            LOW_CAPSULE_DIM,
        )
    raise ConfigurationError(f"The {head_kind} head has no routing trace")


def _scale_by_max(values: np.ndarray) -> np.ndarray:
    top = values.max()
    return values / top if top > 0 else np.zeros_like(values)


def min_max_normalize(values: np.ndarray) -> np.ndarray:
    """Map values to [0, 1], all-equal inputs become zeros.

    :param values: Any float array
    :return: Normalized float64 array
    """
    values = np.asarray(values, dtype=np.float64)
    low, high = values.min(), values.max()
    if high <= low:
        return np.zeros_like(values)
    return (values - low) / (high - low)


def capsule_weights(trace: RoutingTrace, index: int = 0) -> np.ndarray:
    """Per low-level capsule weight w_i = sum_j c_ij * ||v_j||.

    :param trace: Routing trace of a batch
    :param index: Sample within the batch
    :return: [N] non-negative weights
    """
    couplings = trace.couplings[index].detach().to(torch.float64)  # [N, M]
    lengths = capsule_lengths(trace.outputs[index : index + 1])[0]
    weights = couplings @ lengths.detach().to(torch.float64)
    return weights.cpu().numpy()


def probam_map(
    trace: RoutingTrace,
    geometry: CapsuleGeometry,
    index: int = 0,
) -> ActivationMap:
    """Activation map of one sample from its routing trace.

    Capsule weights are put back at their (slot, y, x) positions, summed over slots
    and scaled so the maximum is 1. A map without any positive weight stays zero.

    :param trace: Routing trace of a batch
    :param geometry: Geometry the capsules were cut from
    :param index: Sample within the batch
    :raise ConfigurationError: If the trace's N does not match the geometry
    :return: [H, W] map at feature map resolution
    """
    if trace.couplings.shape[1] != geometry.num_capsules:
        raise ConfigurationError(
            f"Trace holds {trace.couplings.shape[1]} capsules, geometry "
            f"{geometry.channels}x{geometry.height}x{geometry.width}/d="
            f"{geometry.capsule_dim} needs {geometry.num_capsules}",
        )
    weights = torch.from_numpy(capsule_weights(trace, index))
    spatial = invert_reshape(
        weights,
        geometry.slots,
        geometry.height,
        geometry.width,
    ).sum(dim=0)
    return ActivationMap(_scale_by_max(spatial.numpy()), geometry)


def channel_sum(stem: torch.Tensor | np.ndarray) -> np.ndarray:
    """Sum a feature map over its channels.

    :param stem: Feature map of one sample, [C, H, W]
    :return: [H, W] float64 sums
    """
    if isinstance(stem, torch.Tensor):
        stem = stem.detach().cpu().numpy()
    return np.asarray(stem, dtype=np.float64).sum(axis=0)


def conv1_map(stem: torch.Tensor | np.ndarray) -> ActivationMap:
    """First-layer map: channel sum followed by min-max normalization.

    :param stem: First convolution output of one sample, [C1, H1, W1]
    :return: [H1, W1] map
    """
    return ActivationMap(min_max_normalize(channel_sum(stem)))


def resize(activation: ActivationMap, height: int, width: int) -> ActivationMap:
    """Bilinear upsampling of a map to the input image size.

    :param activation: Map to resize
    :param height: Target height, at least the map height
    :param width: Target width, at least the map width
    :raise ConfigurationError: When asked to shrink a map
    :return: Resized map, values still in [0, 1]
    """
    src_h, src_w = activation.values.shape
    if height < src_h or width < src_w:
        raise ConfigurationError(
            f"Cannot resize a {src_h}x{src_w} map down to {height}x{width}",
        )
    tensor = torch.from_numpy(np.ascontiguousarray(activation.values))[None, None]
    resized = F.interpolate(
        tensor,
        size=(height, width),
        mode="bilinear",
        align_corners=False,
    )[0, 0]
    return ActivationMap(resized.clamp(0.0, 1.0).numpy(), activation.geometry)


def colorize(values: np.ndarray) -> np.ndarray:
    """Blue-green-red lookup of map values.

    :param values: [H, W] values in [0, 1]
    :return: [H, W, 3] float64 RGB in [0, 255]
    """
    clipped = np.clip(values, 0.0, 1.0)
    return np.stack(
        [np.interp(clipped, COLORMAP_STOPS, COLORMAP_RGB[:, ch]) for ch in range(3)],
        axis=-1,
    )


def to_rgb(pixels: np.ndarray) -> np.ndarray:
    """Channel-last 8-bit RGB version of a dataset image.

    :param pixels: (c, h, w) values in [0, 1], c = 1 or 3
    :return: [h, w, 3] uint8
    """
    image = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    return np.rint(image.transpose(1, 2, 0) * 255).astype(np.uint8)


def overlay(
    activation: ActivationMap,
    pixels: np.ndarray,
    alpha: float = DEFAULT_ALPHA,
) -> np.ndarray:
    """Blend a colorized map onto its input image.

    :param activation: Map already resized to the image size
    :param pixels: (c, h, w) image in [0, 1], grayscale is replicated to RGB
    :param alpha: Map weight in [0, 1]
    :raise ConfigurationError: On size mismatches or alpha outside [0, 1]
    :return: [h, w, 3] uint8 RGB
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha must lie in [0, 1], got {alpha}")
    base = to_rgb(pixels)
    if activation.values.shape != base.shape[:2]:
        raise ConfigurationError(
            f"Map {activation.values.shape} does not match image {base.shape[:2]}",
        )
    blended = (1.0 - alpha) * base + alpha * colorize(activation.values)
    return np.rint(blended).clip(0, 255).astype(np.uint8)


def write_image(rgb: np.ndarray, path: Path) -> Path:
    """Write an 8-bit RGB buffer as a lossless PNG.

    :param rgb: [h, w, 3] uint8
    :param path: Destination
    :raise DataFormatError: If the file cannot be written
    :return: The path written
    """
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8)).save(
            path,
            format="PNG",
        )
    except OSError as ex:
        raise DataFormatError(f"Unable to write image {path}: {ex}") from ex
    return path


def read_image(path: Path) -> np.ndarray:
    """Read an image written by write_image.

    :param path: PNG file
    :raise DataFormatError: If the file cannot be read
    :return: [h, w, 3] uint8
    """
    try:
        with Image.open(path) as image:
            return np.asarray(image.convert("RGB")).copy()
    except OSError as ex:
        raise DataFormatError(f"Unable to read image {path}: {ex}") from ex
