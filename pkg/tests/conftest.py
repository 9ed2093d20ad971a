import pytest

from kvsim import (
    DeviceConfig,
    TensorPool,
    VirtualMemoryDevice,
    VTensorOps,
    VTensorScheduler,
)
from kvsim.verify import tiny_config


@pytest.fixture
def cfg():
    """Small geometry: 32 bytes/token, 128-byte chunks, 4 tokens per chunk."""
    return tiny_config()


@pytest.fixture
def stack(cfg):
    device = VirtualMemoryDevice(
        DeviceConfig(
            capacity_bytes=cfg.capacity_bytes,
            chunk_size_bytes=cfg.chunk_size_bytes,
            weights_bytes=cfg.weights_bytes,
        )
    )
    pool = TensorPool(cfg.tokens_per_chunk)
    ops = VTensorOps(device, pool, cfg)
    return device, pool, ops


@pytest.fixture
def sched(stack, cfg):
    _, _, ops = stack
    return VTensorScheduler(ops)
