"""Shared fixtures: synthetic textures and a small trained network.

Everything is seeded; no fixture touches the network or the clock, so
the whole suite is reproducible run to run.
"""

import numpy as np
import pytest

from lamsr.zoo import TrainConfig, build_plain_cnn, train_tiny


def texture(seed: int, size: int = 96, channels: int = 3) -> np.ndarray:
    """A band-limited sinusoid mixture in [0, 1], shape (channels, size, size)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    img = np.zeros((size, size), dtype=np.float64)
    for _ in range(4):
        fy, fx = rng.uniform(0.02, 0.25, size=2)
        img += rng.uniform(0.2, 0.5) * np.sin(2 * np.pi * (fy * yy + fx * xx)
                                              + rng.uniform(0, 2 * np.pi))
    img = (img - img.min()) / (img.max() - img.min())
    return np.repeat(img[None], channels, axis=0).astype(np.float32)


@pytest.fixture(scope="session")
def train_textures():
    return [texture(seed) for seed in range(3)]


@pytest.fixture(scope="session")
def trained_plain4(train_textures):
    """A depth-4 plain CNN trained far enough that its detector landscape
    is smooth; several attribution tests need that, not SR quality."""
    net = build_plain_cnn(4, 16, 4, seed=0)
    cfg = TrainConfig(iterations=800, patch_size=16, minibatch=8, seed=0,
                      learning_rate=3e-4)
    train_tiny(net, train_textures, cfg)
    return net
