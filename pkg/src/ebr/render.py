"""Binary PPM (P6) overlays of signed saliency maps on grayscale frames.

PPM needs no image library and is byte-stable, so rendered overlays can be
compared exactly in tests. Positive saliency blends toward red, negative
toward blue, with blend weight linear in |value| / max|value| over the
whole sequence; a zero map reproduces the grayscale frame exactly.
"""

from __future__ import annotations

import numpy as np

from .grounding import upsample_nearest


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an [H, W, 3] uint8 array as binary PPM."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"expected [H, W, 3] uint8, got {rgb.shape} {rgb.dtype}")
    h, w = rgb.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def frame_to_gray(frame: np.ndarray) -> np.ndarray:
    """[C, H, W] in [0,1] -> [H, W] grayscale in [0,1] (channel mean)."""
    if frame.ndim != 3:
        raise ValueError(f"expected [C, H, W], got shape {frame.shape}")
    return frame.mean(axis=0)


def overlay_sequence(clip_frames: np.ndarray, maps: np.ndarray) -> list[np.ndarray]:
    """Blend each frame with its (possibly signed) map; returns uint8 images.

    ``maps`` is [T, h, w] at any spatial resolution; it is upsampled with
    nearest-neighbor to the frame size. Normalization is by the maximum
    absolute value over the entire sequence, so colors are comparable
    across frames.
    """
    T, _, H, W = clip_frames.shape
    if maps.shape[0] != T:
        raise ValueError(f"{maps.shape[0]} maps for {T} frames")
    vmax = float(np.abs(maps).max())
    images = []
    for t in range(T):
        gray = frame_to_gray(clip_frames[t]) * 255.0
        rgb = np.repeat(gray[:, :, None], 3, axis=2)
        if vmax > 0.0:
            m = upsample_nearest(np.asarray(maps[t], dtype=np.float64), (H, W))
            weight = np.abs(m) / vmax
            color = np.zeros((H, W, 3), dtype=np.float64)
            color[:, :, 0] = np.where(m > 0, 255.0, 0.0)
            color[:, :, 2] = np.where(m < 0, 255.0, 0.0)
            rgb = (1.0 - weight[:, :, None]) * rgb + weight[:, :, None] * color
        images.append(np.clip(np.rint(rgb), 0, 255).astype(np.uint8))
    return images
