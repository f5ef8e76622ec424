"""Minimal binary portable any-map (P5/P6) reading and writing."""
import re

import numpy as np


class PnmError(ValueError):
    pass


def write_pgm(path, image, maxval=255):
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("PGM needs a 2-D image")
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n{maxval}\n".encode())
        fh.write(np.ascontiguousarray(image, dtype=dtype).tobytes())


def write_ppm(path, image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("PPM needs an (H, W, 3) image")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


_HEADER = re.compile(rb"\A(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def read_pnm(path):
    """Returns an (H, W) array for P5 or (H, W, 3) for P6."""
    with open(path, "rb") as fh:
        data = fh.read()
    m = _HEADER.match(data)
    if not m:
        raise PnmError(f"{path}: not a binary PGM/PPM file")
    kind, width, height, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    channels = 3 if kind == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    body = data[m.end():]
    if len(body) < count * dtype.itemsize:
        raise PnmError(f"{path}: truncated pixel data")
    arr = np.frombuffer(body, dtype=dtype, count=count)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape).astype(np.uint16 if maxval > 255 else np.uint8)


def class_palette(num_classes):
    """Deterministic distinct RGB colors; class 0 is a gum pink, empty is black."""
    rng = np.random.default_rng(12345)
    pal = rng.integers(40, 256, size=(max(num_classes, 1), 3)).astype(np.uint8)
    pal[0] = (220, 120, 130)
    return pal


def colorize_labels(label_image, num_classes):
    pal = class_palette(num_classes)
    out = np.zeros(label_image.shape + (3,), dtype=np.uint8)
    set_ = label_image >= 0
    out[set_] = pal[label_image[set_]]
    return out


SERIES_COLORS = np.array([(31, 119, 180), (214, 39, 40), (44, 160, 44), (148, 103, 189),
                          (255, 127, 14), (23, 190, 207)], dtype=np.uint8)


def line_plot(series, width=480, height=320, margin=24):
    """Rasterize ``{name: y-values}`` as polylines on a white RGB canvas.

    The x axis is the sample index, the y axis spans the finite range of all
    series. Non-finite samples break the line. Returns an (H, W, 3) array.
    """
    img = np.full((height, width, 3), 255, dtype=np.uint8)
    x0, x1, y0, y1 = margin, width - margin, margin, height - margin
    img[y1, x0:x1 + 1] = 0
    img[y0:y1 + 1, x0] = 0
    vals = [np.asarray(v, dtype=np.float64) for v in series.values()]
    finite = np.concatenate([v[np.isfinite(v)] for v in vals]) if vals else np.zeros(0)
    if finite.size == 0:
        return img
    lo, hi = float(finite.min()), float(finite.max())
    if hi == lo:
        hi = lo + 1.0
    for k, v in enumerate(vals):
        color = SERIES_COLORS[k % len(SERIES_COLORS)]
        n = len(v)
        xs = x0 + (np.arange(n) / max(n - 1, 1)) * (x1 - x0)
        ys = y1 - (v - lo) / (hi - lo) * (y1 - y0)
        for i in range(n - 1):
            if not (np.isfinite(ys[i]) and np.isfinite(ys[i + 1])):
                continue
            steps = int(max(abs(xs[i + 1] - xs[i]), abs(ys[i + 1] - ys[i]))) + 2
            cols = np.rint(np.linspace(xs[i], xs[i + 1], steps)).astype(int)
            rows = np.rint(np.linspace(ys[i], ys[i + 1], steps)).astype(int)
            img[rows, cols] = color
        if n == 1 and np.isfinite(ys[0]):
            img[int(round(ys[0])), int(round(xs[0]))] = color
        # legend swatch
        img[4:10, x0 + 12 * k:x0 + 12 * k + 8] = color
    return img
