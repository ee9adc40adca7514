import numpy as np
import pytest
from PIL import Image


def make_image(seed: int, size=(32, 32)) -> Image.Image:
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 256, size=(size[1], size[0], 3), dtype=np.uint8)
    return Image.fromarray(arr, "RGB")


@pytest.fixture
def image_root(tmp_path):
    """Two classes, four images each (the acceptance fixture shape)."""
    root = tmp_path / "images"
    for ci, name in enumerate(("cat", "dog")):
        cdir = root / name
        cdir.mkdir(parents=True)
        for i in range(4):
            make_image(seed=100 * ci + i).save(cdir / f"img_{i}.png")
    return root
