"""Image planes, file I/O, and color conversion.

Planes are float64 arrays normalized to [0, 1]; the 8-bit integer domain
exists only at the file boundary. Color math follows the BT.601 studio-swing
convention used throughout the SR evaluation literature: Y spans 16..235 on
the 8-bit scale, chroma is centered at 128.
"""

from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError

# Studio-swing BT.601: rows produce (Y, Cb, Cr) on the 0..255 scale from
# RGB in [0, 1]. The inverse is the exact matrix inverse, so round trips
# are limited only by the 8-bit file boundary, not by rounded constants.
_RGB2YCC = np.array(
    [
        [65.481, 128.553, 24.966],
        [-37.797, -74.203, 112.0],
        [112.0, -93.786, -18.214],
    ]
)
_YCC_OFFSET = np.array([16.0, 128.0, 128.0])
_YCC2RGB = np.linalg.inv(_RGB2YCC)


@dataclass(frozen=True)
class ImagePlane:
    """One channel of an image: a (height, width) float64 array plus its
    declared value range."""

    data: np.ndarray
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise DataError(f"plane must be a non-empty 2-D array, got shape {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def clamped(self) -> "ImagePlane":
        return ImagePlane(np.clip(self.data, self.lo, self.hi), self.lo, self.hi)


def plane_from_uint8(arr: np.ndarray) -> ImagePlane:
    return ImagePlane(np.asarray(arr, dtype=np.float64) / 255.0)


def plane_to_uint8(plane: ImagePlane) -> np.ndarray:
    # floor(x*255 + 0.5): classic round-half-up, deterministic across platforms
    x = np.clip(plane.data, 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def load_image(path) -> list[ImagePlane]:
    """Load an 8-bit raster file into [0,1] planes: 1 for grayscale, 3 for RGB."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                if im.mode in ("P", "RGBA", "LA", "I", "I;16", "1"):
                    im = im.convert("RGB" if im.mode in ("P", "RGBA") else "L")
                else:
                    raise DataError(f"unsupported image mode {im.mode!r} in {path}")
            arr = np.asarray(im)
    except FileNotFoundError as exc:
        raise DataError(f"cannot read image: {path}") from exc
    except UnidentifiedImageError as exc:
        raise DataError(f"unsupported or corrupt image file: {path}") from exc
    if arr.size == 0:
        raise DataError(f"zero-dimension image: {path}")
    if arr.ndim == 2:
        return [plane_from_uint8(arr)]
    return [plane_from_uint8(arr[:, :, c]) for c in range(3)]


def save_image(path, planes: list[ImagePlane]) -> None:
    """Write 1 (grayscale) or 3 (RGB) planes as an 8-bit PNG/BMP."""
    if len(planes) == 1:
        arr = plane_to_uint8(planes[0])
    elif len(planes) == 3:
        _check_same_shape(planes)
        arr = np.stack([plane_to_uint8(p) for p in planes], axis=-1)
    else:
        raise DataError(f"expected 1 or 3 planes, got {len(planes)}")
    Image.fromarray(arr).save(path)


def _check_same_shape(planes) -> None:
    shapes = {p.data.shape for p in planes}
    if len(shapes) != 1:
        raise DataError(f"plane dimensions differ: {sorted(shapes)}")


def rgb_to_ycbcr(r: ImagePlane, g: ImagePlane, b: ImagePlane):
    """BT.601 studio-swing conversion; outputs stay on the [0,1] scale."""
    _check_same_shape((r, g, b))
    rgb = np.stack([r.data, g.data, b.data], axis=-1)
    ycc = (rgb @ _RGB2YCC.T + _YCC_OFFSET) / 255.0
    return tuple(ImagePlane(ycc[:, :, c]) for c in range(3))


def ycbcr_to_rgb(y: ImagePlane, cb: ImagePlane, cr: ImagePlane):
    """Exact inverse of rgb_to_ycbcr, clamped to [0,1]."""
    _check_same_shape((y, cb, cr))
    ycc = np.stack([y.data, cb.data, cr.data], axis=-1) * 255.0 - _YCC_OFFSET
    rgb = np.clip(ycc @ _YCC2RGB.T, 0.0, 1.0)
    return tuple(ImagePlane(rgb[:, :, c]) for c in range(3))


def luminance(planes: list[ImagePlane]) -> ImagePlane:
    """Y plane of an image given as 1 or 3 channel planes."""
    if len(planes) == 1:
        return planes[0]
    if len(planes) == 3:
        return rgb_to_ycbcr(*planes)[0]
    raise DataError(f"expected 1 or 3 planes, got {len(planes)}")


def modcrop(plane: ImagePlane, modulo: int) -> ImagePlane:
    """Crop so both dimensions are multiples of `modulo`."""
    h = plane.height - plane.height % modulo
    w = plane.width - plane.width % modulo
    if h == 0 or w == 0:
        raise DataError(f"image {plane.height}x{plane.width} too small for modulo {modulo}")
    return ImagePlane(plane.data[:h, :w], plane.lo, plane.hi)


def shave(plane: ImagePlane, border: int) -> ImagePlane:
    """Drop `border` pixels from every edge (SR metric convention)."""
    if border == 0:
        return plane
    if plane.height <= 2 * border or plane.width <= 2 * border:
        raise DataError(f"cannot shave {border}px from {plane.height}x{plane.width} plane")
    return ImagePlane(plane.data[border:-border, border:-border], plane.lo, plane.hi)
