from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

# ---- SETTINGS ----
MASK_THRESHOLD = 0.5


@dataclass
class PixelTable:
    """All pixels of a dataset flattened view-major, row-major (u fastest)."""
    colors: np.ndarray   # (P, 3)
    masks: np.ndarray    # (P,) float 0/1
    view: np.ndarray     # (P,) int
    u: np.ndarray        # (P,) int column
    v: np.ndarray        # (P,) int row

    def __len__(self) -> int:
        return len(self.view)


# ---- HELPERS ----
def _to_rgb(image: np.ndarray, name: str) -> np.ndarray:
    """
    Return an (H, W, 3) float64 image:
    - gray (H, W) is replicated to three channels
    - alpha channels are dropped
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return np.repeat(img[..., None], 3, axis=2)
    if img.ndim == 3 and img.shape[2] >= 3:
        return img[..., :3]
    raise ValueError(f"{name}: expected an RGB image, got shape {img.shape}")


def _to_gray(mask: np.ndarray, name: str) -> np.ndarray:
    """Masks may arrive as RGB; the first channel is the mask."""
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 3:
        m = m[..., 0]
    if m.ndim != 2:
        raise ValueError(f"{name}: expected a gray mask, got shape {np.shape(mask)}")
    return m


def binarize_mask(mask: np.ndarray, threshold: float = MASK_THRESHOLD) -> np.ndarray:
    """Hard 0/1 mask (values >= threshold are inside)."""
    return (np.asarray(mask, dtype=np.float64) >= threshold).astype(np.float64)


# ---- MAIN FUNCTION ----
def preprocess_view(image: np.ndarray, mask: np.ndarray, resolution: Tuple[int, int],
                    name: str) -> Tuple[np.ndarray, np.ndarray]:
    """
    Clean one view for training:
    1) Bring the image to (H, W, 3) and the mask to (H, W)
    2) Check both against the camera resolution (width, height)
    3) Clip colors into [0, 1] (images are stored linear; no gamma is removed)
    4) Binarize the mask at 0.5
    """
    img = _to_rgb(image, name)
    m = _to_gray(mask, name)

    width, height = resolution
    if img.shape[:2] != (height, width):
        raise ValueError(f"{name}: image is {img.shape[1]}x{img.shape[0]}, camera says {width}x{height}")
    if m.shape != (height, width):
        raise ValueError(f"{name}: mask is {m.shape[1]}x{m.shape[0]}, camera says {width}x{height}")

    return np.clip(img, 0.0, 1.0), binarize_mask(m)


def build_pixel_table(images: List[np.ndarray], masks: List[np.ndarray]) -> PixelTable:
    """Flatten every view into one table so that ray sampling is uniform over all pixels."""
    colors, flags, views, us, vs = [], [], [], [], []
    for k, (img, m) in enumerate(zip(images, masks)):
        height, width = m.shape
        vv, uu = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
        colors.append(img.reshape(-1, 3))
        flags.append(m.reshape(-1))
        views.append(np.full(height * width, k, dtype=np.int64))
        us.append(uu.reshape(-1))
        vs.append(vv.reshape(-1))
    return PixelTable(
        colors=np.concatenate(colors),
        masks=np.concatenate(flags),
        view=np.concatenate(views),
        u=np.concatenate(us).astype(np.int64),
        v=np.concatenate(vs).astype(np.int64),
    )
