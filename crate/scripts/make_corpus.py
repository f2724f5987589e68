#!/usr/bin/env python3
"""Builds data/natural/{train,heldout}: 256x256 8-bit grayscale PNG crops
from photographs bundled with scikit-image, scikit-learn and matplotlib.

Held-out crops come from source photos that never appear in train.
Output is deterministic.
"""
import argparse
import os

import numpy as np
from PIL import Image

SIZE = 256


def gray(img):
    img = np.asarray(img)
    if img.ndim == 3:
        img = img[..., :3].astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    return img.astype(np.float64)


def area_down(img, k):
    h, w = (img.shape[0] // k) * k, (img.shape[1] // k) * k
    return img[:h, :w].reshape(h // k, k, w // k, k).mean(axis=(1, 3))


def crops(img, count):
    """`count` crops spread evenly over the image, after a 2x area
    reduction when the image is large enough to afford it."""
    if min(img.shape) >= 2 * SIZE:
        img = area_down(img, 2)
    h, w = img.shape
    if h < SIZE or w < SIZE:
        raise ValueError(f"source too small: {img.shape}")
    out = []
    ys = np.linspace(0, h - SIZE, num=max(1, int(np.ceil(np.sqrt(count))))).astype(int)
    xs = np.linspace(0, w - SIZE, num=max(1, int(np.ceil(count / len(ys))))).astype(int)
    for y in ys:
        for x in xs:
            if len(out) < count:
                out.append(img[y:y + SIZE, x:x + SIZE])
    return out


def sources():
    import matplotlib.cbook as cbook
    import skimage.data as d
    from sklearn.datasets import load_sample_images

    sk = load_sample_images()
    china, flower = (gray(i) for i in sk.images)
    with cbook.get_sample_data("grace_hopper.jpg") as fh:
        hopper = gray(Image.open(fh))
    left, _, _ = d.stereo_motorcycle()
    heldout = [
        ("astronaut", gray(d.astronaut()), 1),
        ("camera", gray(d.camera()), 1),
        ("coffee", gray(d.coffee()), 1),
        ("chelsea", gray(d.chelsea()), 1),
        ("china", china, 1),
        ("grace_hopper", hopper, 1),
        ("motorcycle", gray(left), 1),
        ("retina", gray(d.retina()), 1),
    ]
    train = [
        ("rocket", gray(d.rocket()), 3),
        ("flower", flower, 4),
        ("hubble", gray(d.hubble_deep_field()), 4),
        ("immunohistochemistry", gray(d.immunohistochemistry()), 2),
        ("brick", gray(d.brick()), 1),
        ("grass", gray(d.grass()), 1),
        ("gravel", gray(d.gravel()), 1),
        ("moon", gray(d.moon()), 1),
        ("coins", gray(d.coins()), 2),
        ("clock", gray(d.clock()), 2),
        ("cell", gray(d.cell()), 2),
    ]
    return train, heldout


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data", "natural"))
    args = ap.parse_args()
    train, heldout = sources()
    for split, items in (("train", train), ("heldout", heldout)):
        d = os.path.join(args.out, split)
        os.makedirs(d, exist_ok=True)
        for name, img, count in items:
            for k, c in enumerate(crops(img, count)):
                q = np.clip(np.rint(c), 0, 255).astype(np.uint8)
                Image.fromarray(q, mode="L").save(os.path.join(d, f"{name}_{k}.png"), optimize=False)
        print(split, len(os.listdir(d)))


if __name__ == "__main__":
    main()
