#!/usr/bin/env python3
"""Regenerate the bundled image corpus under data/ from scikit-image sample images.

Each image is center-cropped to a square and resized to 256x256 (data/images)
and 64x64 (data/images_small) with Lanczos filtering. Output is 8-bit RGB PNG.
"""
import pathlib

import numpy as np
from PIL import Image
import skimage.data

# Chosen so that thinned Canny edges can cover at least 20% of the 256x256
# version; smooth photos (astronaut, coffee, rocket) top out below that.
NAMES = [
    "camera", "chelsea", "immunohistochemistry", "hubble_deep_field", "brick",
    "gravel", "grass", "moon", "coins", "page",
]


def square(img):
    h, w = img.shape[:2]
    s = min(h, w)
    y, x = (h - s) // 2, (w - s) // 2
    return img[y:y + s, x:x + s]


def main():
    root = pathlib.Path(__file__).resolve().parent.parent / "data"
    for name in NAMES:
        arr = getattr(skimage.data, name)()
        if arr.ndim == 2:
            arr = np.stack([arr] * 3, axis=-1)
        arr = square(arr[..., :3].astype(np.uint8))
        im = Image.fromarray(arr, "RGB")
        im.resize((256, 256), Image.LANCZOS).save(root / "images" / f"{name}.png")
        im.resize((64, 64), Image.LANCZOS).save(root / "images_small" / f"{name}.png")


if __name__ == "__main__":
    main()
