"""Binary PGM / PPM output and the numbered-fixation overlay."""
import numpy as np
from PIL import Image, ImageDraw

MARKER = (255, 255, 0)
TEXT = (255, 255, 255)


def _to_u8(a):
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("image has non-finite values")
    return np.round(np.clip(a, 0.0, 1.0) * 255).astype(np.uint8)


def normalise(a):
    """Scale to [0, 1] by the maximum (a zero map stays zero)."""
    a = np.asarray(a, dtype=np.float64)
    m = a.max()
    return a / m if m > 0 else np.zeros_like(a)


def write_pgm(path, image):
    """Write a 2-D array with values in [0, 1] as 8-bit binary PGM."""
    img = _to_u8(image)
    if img.ndim != 2:
        raise ValueError("PGM needs a 2-D array")
    Image.fromarray(img, mode="L").save(path, format="PPM")


def write_ppm(path, image):
    """Write an (H, W, 3) uint8 array or float array in [0, 1] as binary PPM."""
    img = image if image.dtype == np.uint8 else _to_u8(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM needs an (H, W, 3) array")
    Image.fromarray(np.ascontiguousarray(img), mode="RGB").save(path, format="PPM")


def read_pnm(path):
    """Read a binary PGM (2-D) or PPM (H, W, 3) as uint8."""
    with Image.open(path) as im:
        return np.asarray(im).copy()


def fixation_overlay(image, fixations, scale=3):
    """RGB overlay of numbered fixations on a (3, H, W) image.

    Returns the (H*scale, W*scale, 3) uint8 picture and the list of marker
    centres in overlay pixels.
    """
    rgb = _to_u8(np.transpose(np.asarray(image), (1, 2, 0)))
    pic = Image.fromarray(rgb, mode="RGB").resize((rgb.shape[1] * scale, rgb.shape[0] * scale),
                                                   Image.NEAREST)
    draw = ImageDraw.Draw(pic)
    W, H = pic.size
    r = 2 * scale
    markers = []
    for k, (fx, fy) in enumerate(np.asarray(fixations)):
        cx, cy = float(fx) * W, float(fy) * H
        draw.ellipse((cx - r, cy - r, cx + r, cy + r), outline=MARKER, width=2)
        draw.text((cx + r, cy - 3 * r), str(k + 1), fill=TEXT)
        markers.append((cx, cy))
    return np.asarray(pic).copy(), markers
