import numpy as np
import pytest
from fastapi.testclient import TestClient

from sdservice.app import create_app
from sdservice.backbones.tiny import TinyBackbone
from sdservice.wire import decode_tensor, encode_tensor


@pytest.fixture(scope="session")
def backbone():
    return TinyBackbone()


@pytest.fixture(scope="session")
def client(backbone):
    return TestClient(create_app(backbone))


def natural_image(seed=0, size=512):
    """Smooth synthetic photo stand-in: gradients plus soft blobs."""
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    img = np.stack(
        [
            0.25 + 0.5 * ys,
            0.45 + 0.25 * np.sin(2 * np.pi * (xs + 0.1 * rng.uniform())),
            0.55 - 0.35 * ys * xs,
        ],
        axis=-1,
    )
    for _ in range(3):
        cy, cx = rng.uniform(0.2, 0.8, 2)
        radius = rng.uniform(0.05, 0.2)
        blob = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * radius**2))
        img += 0.15 * blob[..., None] * rng.uniform(-1, 1, 3)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def image_payload(img):
    return {"image": encode_tensor(img)}


def tensor_of(doc, name):
    return decode_tensor(doc[name])
