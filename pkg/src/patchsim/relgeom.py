"""Relative spacetime descriptors between stamped poses.

A descriptor captures everything one scene element needs to know about
another under a rigid-motion-invariant encoding: planar distance, bearing
of the displacement in the receiver's heading frame, heading difference,
height difference, and time difference. Angles are fed to the embedding
MLP as (sin, cos) pairs so wrapped representatives embed identically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MLP, Module

N_RAW_FEATURES = 5
N_MLP_FEATURES = 7  # dist, sin/cos bearing, sin/cos dyaw, dz, dtau


def wrap_angle(theta):
    """Wrap radians into (-pi, pi]."""
    wrapped = np.mod(-np.asarray(theta, dtype=np.float64) + np.pi, 2.0 * np.pi)
    return -(wrapped - np.pi)


@dataclass(frozen=True)
class PoseStamped:
    """Position (m), heading (rad, wrapped), and time-step index."""

    position: tuple[float, float, float]
    heading: float
    t: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([*self.position, self.heading, self.t], dtype=np.float64)


@dataclass(frozen=True)
class RelDescriptor:
    dist: float
    bearing: float
    dyaw: float
    dz: float
    dtau: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.dist, self.bearing, self.dyaw, self.dz, self.dtau], dtype=np.float64
        )


def pairwise_descriptors(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Descriptors of src poses relative to dst poses, elementwise.

    src/dst are broadcastable arrays of stamped poses laid out as
    [..., 5] = (x, y, z, heading, t); the result is [..., 5] raw
    descriptor rows (dist, bearing, dyaw, dz, dtau) describing src -> dst.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    dx = dst[..., 0] - src[..., 0]
    dy = dst[..., 1] - src[..., 1]
    dist = np.hypot(dx, dy)
    # zero displacement has no direction; pin its bearing to 0
    bearing = np.where(dist > 0.0, wrap_angle(np.arctan2(dy, dx) - dst[..., 3]), 0.0)
    dyaw = wrap_angle(dst[..., 3] - src[..., 3])
    dz = dst[..., 2] - src[..., 2]
    dtau = dst[..., 4] - src[..., 4]
    return np.stack([dist, bearing, dyaw, dz, dtau], axis=-1)


def rel_descriptor(j: PoseStamped, i: PoseStamped) -> RelDescriptor:
    """Descriptor of j as seen from i (displacement j -> i in i's frame)."""
    row = pairwise_descriptors(j.as_array(), i.as_array())
    return RelDescriptor(*[float(v) for v in row])


def descriptor_features(raw: np.ndarray) -> np.ndarray:
    """Expand raw [..., 5] descriptors into the [..., 7] MLP input layout."""
    raw = np.asarray(raw, dtype=np.float64)
    return np.stack(
        [
            raw[..., 0],
            np.sin(raw[..., 1]),
            np.cos(raw[..., 1]),
            np.sin(raw[..., 2]),
            np.cos(raw[..., 2]),
            raw[..., 3],
            raw[..., 4],
        ],
        axis=-1,
    )


class RelEmbed(Module):
    """Shared MLP mapping descriptor features to the model width.

    One instance serves every relation kind (state-in-patch, patch-patch,
    map-agent, agent-agent), as the same geometry vocabulary underlies all
    of them.
    """

    def __init__(self, rng, d: int):
        self.mlp = MLP(rng, [N_MLP_FEATURES, d, d])

    def __call__(self, raw: np.ndarray) -> Tensor:
        feats = descriptor_features(raw)
        return self.mlp(ad.tensor(feats))

    def embed_descriptor(self, desc: RelDescriptor) -> Tensor:
        return self(desc.as_array()[None, :])
