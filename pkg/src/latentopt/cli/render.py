"""Binary PPM scatter plots."""

from __future__ import annotations

import numpy as np

from latentopt.errors import InvalidArgumentError

SIZE = 512
EXTENT = 2.0  # plotted window is [-EXTENT, EXTENT]^2

PALETTE = np.array(
    [
        [228, 26, 28], [55, 126, 184], [77, 175, 74], [152, 78, 163],
        [255, 127, 0], [166, 86, 40], [247, 129, 191], [90, 90, 90],
    ],
    dtype=np.uint8,
)


def scatter_image(points, labels=None, extent: float = EXTENT) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        pts = np.zeros((0, 2))
    elif pts.ndim != 2 or pts.shape[1] != 2:
        raise InvalidArgumentError(f"render_scatter needs (N, 2) points, got shape {pts.shape}")
    labels = np.zeros(len(pts), dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    img = np.full((SIZE, SIZE, 3), 255, dtype=np.uint8)
    scale = SIZE / (2.0 * extent)
    cols = np.floor((pts[:, 0] + extent) * scale).astype(np.int64)
    rows = np.floor((extent - pts[:, 1]) * scale).astype(np.int64)
    for r, c, lab in zip(rows, cols, labels):
        if 0 <= r < SIZE and 0 <= c < SIZE:
            img[max(r - 1, 0) : r + 2, max(c - 1, 0) : c + 2] = PALETTE[lab % len(PALETTE)]
    return img


def render_scatter(points, labels, path) -> None:
    """512x512 P6 image, 3x3 marks coloured by label on white."""
    img = scatter_image(points, labels)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (SIZE, SIZE))
        f.write(img.tobytes())
