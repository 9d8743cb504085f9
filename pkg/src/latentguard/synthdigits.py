"""Procedural digit corpus in the raw IDX file layout.

Renders digit glyphs with randomized fonts, sizes, rotations, shears, offsets,
blur and pixel noise into 28x28 grayscale images, then writes them as standard
IDX image/label files so they can be ingested exactly like a downloaded digit
dataset. Useful for smoke tests and demo runs on machines without the real
source files; the rendering is deterministic for a given seed.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from .data import write_idx_images, write_idx_labels

_CANVAS = 40
_SIZE = 28


def _font_paths() -> list[str]:
    import matplotlib

    ttf = Path(matplotlib.get_data_path()) / "fonts" / "ttf"
    names = ["DejaVuSans.ttf", "DejaVuSans-Bold.ttf", "DejaVuSerif.ttf",
             "DejaVuSerif-Bold.ttf", "DejaVuSansMono.ttf"]
    paths = [str(ttf / n) for n in names if (ttf / n).exists()]
    if not paths:
        raise RuntimeError(f"no usable fonts under {ttf}")
    return paths


class DigitRenderer:
    def __init__(self, seed: int = 0):
        from PIL import ImageFont

        self.rng = np.random.default_rng(seed)
        self._fonts = {}
        self._paths = _font_paths()
        self._ImageFont = ImageFont

    def _font(self, path: str, size: int):
        key = (path, size)
        if key not in self._fonts:
            self._fonts[key] = self._ImageFont.truetype(path, size)
        return self._fonts[key]

    def render(self, digit: int) -> np.ndarray:
        """One uint8 28x28 image of the digit."""
        from PIL import Image, ImageDraw, ImageFilter

        rng = self.rng
        font = self._font(self._paths[int(rng.integers(len(self._paths)))],
                          int(rng.integers(22, 34)))
        img = Image.new("L", (_CANVAS, _CANVAS), 0)
        draw = ImageDraw.Draw(img)
        draw.text((_CANVAS // 2, _CANVAS // 2), str(digit), fill=255, font=font,
                  anchor="mm")
        shear = float(rng.uniform(-0.25, 0.25))
        img = img.transform((_CANVAS, _CANVAS), Image.AFFINE,
                            (1.0, shear, -shear * _CANVAS / 2, 0.0, 1.0, 0.0),
                            resample=Image.BILINEAR)
        img = img.rotate(float(rng.uniform(-20.0, 20.0)), resample=Image.BILINEAR)
        dx, dy = rng.integers(-3, 4, size=2)
        img = img.transform((_CANVAS, _CANVAS), Image.AFFINE,
                            (1.0, 0.0, float(dx), 0.0, 1.0, float(dy)),
                            resample=Image.BILINEAR)
        img = img.resize((_SIZE, _SIZE), resample=Image.BILINEAR)
        radius = float(rng.uniform(0.0, 0.9))
        if radius > 0.05:
            img = img.filter(ImageFilter.GaussianBlur(radius))
        arr = np.asarray(img, dtype=np.float32) / 255.0
        arr = arr * float(rng.uniform(0.75, 1.0))
        arr = arr + rng.normal(0.0, float(rng.uniform(0.02, 0.10)), arr.shape)
        return (np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)

    def corpus(self, n: int, num_classes: int = 10) -> tuple[np.ndarray, np.ndarray]:
        """n images with labels cycling through the classes (prefixes stay balanced)."""
        labels = np.arange(n, dtype=np.uint8) % num_classes
        images = np.stack([self.render(int(c)) for c in labels])
        return images, labels


def generate(out_dir: str | Path, *, n_train: int = 6000, n_test: int = 2000,
             seed: int = 0, num_classes: int = 10) -> Path:
    """Write train/test IDX files under out_dir and return the directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = DigitRenderer(seed)
    test = DigitRenderer(seed + 1)
    images, labels = train.corpus(n_train, num_classes)
    write_idx_images(out / "train-images-idx3-ubyte", images)
    write_idx_labels(out / "train-labels-idx1-ubyte", labels)
    images, labels = test.corpus(n_test, num_classes)
    write_idx_images(out / "t10k-images-idx3-ubyte", images)
    write_idx_labels(out / "t10k-labels-idx1-ubyte", labels)
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir")
    parser.add_argument("--train", type=int, default=6000)
    parser.add_argument("--test", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    out = generate(args.out_dir, n_train=args.train, n_test=args.test, seed=args.seed)
    print(f"wrote IDX corpus to {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
