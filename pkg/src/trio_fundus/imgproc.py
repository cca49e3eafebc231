"""Fundus preprocessing, augmentation and the edge/posterize/emboss filter bank.

Images are ``uint8`` arrays of shape ``(H, W, 3)`` in RGB order. The filters
work in integer arithmetic so their output is bit-identical across platforms.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import cv2
import numpy as np

SOBEL_KX = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.int64)
SOBEL_KY = SOBEL_KX.T.copy()
EMBOSS_KERNEL = np.array([[-1, -1, 0], [-1, 0, 1], [0, 1, 1]], dtype=np.int64)
EMBOSS_BIAS = 128
GRAY_WEIGHTS = (299, 587, 114)  # per mille

STACK_MAGIC = b"FSTK1"
STACK_PLANES = ("original", "sobel_mag", "posterized", "embossed")


class ImageError(Exception):
    pass


@dataclass(frozen=True)
class FilterSpec:
    posterize_bits: int = 3
    posterize_mode: str = "truncate"

    def __post_init__(self):
        if not 1 <= self.posterize_bits <= 8:
            raise ValueError(f"posterize_bits must be in [1, 8], got {self.posterize_bits}")
        if self.posterize_mode not in ("truncate", "nearest"):
            raise ValueError(f"posterize_mode must be 'truncate' or 'nearest', got {self.posterize_mode!r}")


@dataclass(frozen=True)
class FilteredStack:
    original: np.ndarray
    sobel_mag: np.ndarray
    posterized: np.ndarray
    embossed: np.ndarray

    def planes(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in STACK_PLANES}

    def channels(self) -> np.ndarray:
        """Concatenate to an ``(H, W, 10)`` uint8 array: RGB, Sobel, posterized, embossed."""
        return np.concatenate(
            [self.original, self.sobel_mag[..., None], self.posterized, self.embossed], axis=-1)


def check_image(img: np.ndarray, min_side: int = 1) -> np.ndarray:
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ImageError(f"expected uint8 HxWx3 image, got {img.dtype} {img.shape}")
    if min(img.shape[:2]) < min_side:
        raise ImageError(f"image smaller than {min_side}px: {img.shape[:2]}")
    return img


def read_image(path: str | Path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ImageError(f"cannot read image {path}: {exc.strerror or exc}") from None
    try:
        return decode_image(data)
    except ImageError:
        raise ImageError(f"cannot decode image {path}") from None


def decode_image(data: bytes) -> np.ndarray:
    bgr = cv2.imdecode(np.frombuffer(data, dtype=np.uint8), cv2.IMREAD_COLOR)
    if bgr is None:
        raise ImageError("undecodable image data")
    return np.ascontiguousarray(bgr[..., ::-1])


def encode_png(img: np.ndarray) -> bytes:
    ok, buf = cv2.imencode(".png", np.ascontiguousarray(img[..., ::-1]))
    if not ok:
        raise ImageError("PNG encoding failed")
    return buf.tobytes()


def write_image(path: str | Path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_png(img))


def resize(img: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    h, w = (size, size) if isinstance(size, int) else size
    if img.shape[:2] == (h, w):
        return img
    shrinking = h < img.shape[0] or w < img.shape[1]
    interp = cv2.INTER_AREA if shrinking else cv2.INTER_LINEAR
    return cv2.resize(img, (w, h), interpolation=interp)


def to_gray(img: np.ndarray) -> np.ndarray:
    """Luma with weights (0.299, 0.587, 0.114), rounded half up, as int64."""
    rgb = img.astype(np.int64)
    wr, wg, wb = GRAY_WEIGHTS
    return (wr * rgb[..., 0] + wg * rgb[..., 1] + wb * rgb[..., 2] + 500) // 1000


def crop_fundus(img: np.ndarray, border_threshold: int = 20) -> np.ndarray:
    """Tight box around pixels brighter than ``border_threshold``, padded square with black."""
    check_image(img)
    mask = img.max(axis=2) > border_threshold
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ImageError(f"no pixel above border threshold {border_threshold}")
    box = img[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    h, w = box.shape[:2]
    side = max(h, w)
    out = np.zeros((side, side, 3), dtype=np.uint8)
    top, left = (side - h) // 2, (side - w) // 2
    out[top:top + h, left:left + w] = box
    return out


def balance_histogram(img: np.ndarray, clip_limit: float = 2.0, grid: int = 8) -> np.ndarray:
    """Contrast-limited adaptive equalization of the luma channel (YCrCb)."""
    check_image(img)
    ycc = cv2.cvtColor(img, cv2.COLOR_RGB2YCrCb)
    clahe = cv2.createCLAHE(clipLimit=clip_limit, tileGridSize=(grid, grid))
    ycc[..., 0] = clahe.apply(np.ascontiguousarray(ycc[..., 0]))
    return cv2.cvtColor(ycc, cv2.COLOR_YCrCb2RGB)


def _correlate3(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """3x3 correlation with replicate borders on an integer plane."""
    h, w = plane.shape
    p = np.pad(plane.astype(np.int64), 1, mode="edge")
    out = np.zeros((h, w), dtype=np.int64)
    for dy in range(3):
        for dx in range(3):
            k = int(kernel[dy, dx])
            if k:
                out += k * p[dy:dy + h, dx:dx + w]
    return out


def sobel_magnitude(img: np.ndarray) -> np.ndarray:
    """Gradient magnitude of the luma plane, clipped to [0, 255]."""
    gray = to_gray(check_image(img))
    gx = _correlate3(gray, SOBEL_KX)
    gy = _correlate3(gray, SOBEL_KY)
    # sqrt of an integer is never exactly k + 0.5, so floor(x + 0.5) is unambiguous
    mag = np.floor(np.sqrt((gx * gx + gy * gy).astype(np.float64)) + 0.5)
    return np.clip(mag, 0, 255).astype(np.uint8)


def posterize(img: np.ndarray, bits: int, mode: str = "truncate") -> np.ndarray:
    if not 1 <= bits <= 8:
        raise ValueError(f"bits must be in [1, 8], got {bits}")
    if mode == "truncate":
        mask = np.uint8((0xFF << (8 - bits)) & 0xFF)
        return img & mask
    if mode == "nearest":
        step = 1 << (8 - bits)
        q = (img.astype(np.int64) + step // 2) // step * step
        return np.minimum(q, 256 - step).astype(np.uint8)
    raise ValueError(f"unknown posterize mode {mode!r}")


def emboss(img: np.ndarray) -> np.ndarray:
    check_image(img)
    out = np.empty_like(img)
    for c in range(3):
        v = _correlate3(img[..., c], EMBOSS_KERNEL) + EMBOSS_BIAS
        out[..., c] = np.clip(v, 0, 255)
    return out


def filter_stack(img: np.ndarray, spec: FilterSpec = FilterSpec()) -> FilteredStack:
    return FilteredStack(
        original=img,
        sobel_mag=sobel_magnitude(img),
        posterized=posterize(img, spec.posterize_bits, spec.posterize_mode),
        embossed=emboss(img),
    )


@dataclass(frozen=True)
class AugmentSpec:
    """Parameter ranges for training-time augmentation.

    Each range is ``(low, high)``; a value is drawn uniformly per image.
    ``crop_fraction`` is the kept side fraction, ``gauss_sigma`` is in
    intensity levels, ``pixel_noise_amp`` the fraction of salt-and-pepper
    pixels, ``brightness_delta`` a relative gain offset, ``flip`` the
    horizontal-flip probability.
    """

    rotation_deg: tuple[float, float] = (-20.0, 20.0)
    crop_fraction: tuple[float, float] = (0.85, 1.0)
    shear_deg: tuple[float, float] = (-10.0, 10.0)
    gauss_sigma: tuple[float, float] = (0.0, 2.0)
    pixel_noise_amp: tuple[float, float] = (0.0, 0.01)
    blur_radius: tuple[float, float] = (0.0, 1.5)
    zoom_factor: tuple[float, float] = (0.9, 1.1)
    flip: float = 0.5
    brightness_delta: tuple[float, float] = (-0.15, 0.15)

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            vals = v if isinstance(v, tuple) else (v,)
            if not all(np.isfinite(x) for x in vals):
                raise ValueError(f"{f.name}: non-finite range {v}")
            if isinstance(v, tuple) and (len(v) != 2 or v[0] > v[1]):
                raise ValueError(f"{f.name}: invalid range {v}")
        if self.crop_fraction[0] <= 0 or self.crop_fraction[1] > 1:
            raise ValueError(f"crop_fraction must lie in (0, 1], got {self.crop_fraction}")
        if self.zoom_factor[0] <= 0:
            raise ValueError(f"zoom_factor must be positive, got {self.zoom_factor}")
        if not 0.0 <= self.flip <= 1.0:
            raise ValueError(f"flip probability must be in [0, 1], got {self.flip}")
        if self.gauss_sigma[0] < 0 or self.blur_radius[0] < 0 or not 0 <= self.pixel_noise_amp[0] <= self.pixel_noise_amp[1] <= 1:
            raise ValueError("noise and blur ranges must be nonnegative")

    @classmethod
    def identity(cls) -> "AugmentSpec":
        return cls((0.0, 0.0), (1.0, 1.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0),
                   (0.0, 0.0), (1.0, 1.0), 0.0, (0.0, 0.0))


def augment(img: np.ndarray, spec: AugmentSpec, seed: int,
            output_size: int | None = None) -> np.ndarray:
    """Apply the randomized augmentation chain.

    All parameters are drawn up front in a fixed order, so a transform's
    draw never depends on which others are enabled. Quarter-turn rotations
    without shear or zoom take an exact index-permutation path.
    """
    check_image(img)
    rng = np.random.default_rng(seed)
    u = lambda r: float(rng.uniform(r[0], r[1])) if r[0] != r[1] else float(r[0])  # noqa: E731
    do_flip = rng.random() < spec.flip
    angle, shear, zoom = u(spec.rotation_deg), u(spec.shear_deg), u(spec.zoom_factor)
    crop = u(spec.crop_fraction)
    crop_pos = rng.random(2)
    gain = 1.0 + u(spec.brightness_delta)
    sigma = u(spec.gauss_sigma)
    sp_frac = u(spec.pixel_noise_amp)
    blur = u(spec.blur_radius)
    noise_seed = int(rng.integers(2**32))

    out = img
    h, w = img.shape[:2]
    if do_flip:
        out = out[:, ::-1]
    if shear == 0.0 and zoom == 1.0 and angle % 90.0 == 0.0:
        if angle:
            out = np.rot90(out, int(angle // 90) % 4)
    else:
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        m = cv2.getRotationMatrix2D((cx, cy), angle, zoom)
        sh = np.tan(np.deg2rad(shear))
        shear_m = np.array([[1.0, sh, -sh * cy], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        m = m @ shear_m
        out = cv2.warpAffine(np.ascontiguousarray(out), m, (w, h), flags=cv2.INTER_LINEAR,
                             borderMode=cv2.BORDER_CONSTANT, borderValue=(0, 0, 0))
    if crop < 1.0:
        ch, cw = out.shape[:2]
        kh, kw = max(1, int(round(ch * crop))), max(1, int(round(cw * crop)))
        y0 = int(crop_pos[0] * (ch - kh + 1)) if ch > kh else 0
        x0 = int(crop_pos[1] * (cw - kw + 1)) if cw > kw else 0
        out = resize(out[y0:y0 + kh, x0:x0 + kw], (ch, cw))
    noisy = gain != 1.0 or sigma > 0 or sp_frac > 0
    if noisy:
        f = out.astype(np.float64) * gain
        nrng = np.random.default_rng(noise_seed)
        if sigma > 0:
            f = f + nrng.normal(0.0, sigma, size=f.shape)
        out = np.clip(np.floor(f + 0.5), 0, 255).astype(np.uint8)
        if sp_frac > 0:
            hit = nrng.random(out.shape[:2]) < sp_frac
            salt = nrng.random(out.shape[:2]) < 0.5
            out = out.copy()
            out[hit & salt] = 255
            out[hit & ~salt] = 0
    if blur > 0:
        out = cv2.GaussianBlur(np.ascontiguousarray(out), (0, 0), sigmaX=blur,
                               borderType=cv2.BORDER_REPLICATE)
    out = np.ascontiguousarray(out)
    if output_size is not None:
        out = resize(out, output_size)
    return out


def preprocess(img: np.ndarray, size: int, border_threshold: int = 20,
               clip_limit: float = 2.0, grid: int = 8) -> np.ndarray:
    """Crop, equalize and resize a raw fundus photograph to ``size`` x ``size``."""
    return resize(balance_histogram(crop_fundus(img, border_threshold), clip_limit, grid), size)


def pack_stack(planes: dict[str, np.ndarray]) -> bytes:
    """Serialize named uint8 planes into the ``FSTK1`` container.

    Layout: magic, then per plane a little-endian ``u16`` name length, the
    UTF-8 name, ``u32`` H, W, C and the raw row-major bytes.
    """
    buf = io.BytesIO()
    buf.write(STACK_MAGIC)
    for name, arr in planes.items():
        a = np.ascontiguousarray(arr, dtype=np.uint8)
        if a.ndim == 2:
            a = a[..., None]
        if a.ndim != 3:
            raise ValueError(f"plane {name!r} must be 2-D or 3-D")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<III", *a.shape))
        buf.write(a.tobytes())
    return buf.getvalue()


def unpack_stack(data: bytes) -> dict[str, np.ndarray]:
    if not data.startswith(STACK_MAGIC):
        raise ImageError("not an FSTK1 container")
    pos, planes = len(STACK_MAGIC), {}
    while pos < len(data):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + n].decode()
        pos += n
        h, w, c = struct.unpack_from("<III", data, pos)
        pos += 12
        size = h * w * c
        if pos + size > len(data):
            raise ImageError(f"truncated plane {name!r}")
        arr = np.frombuffer(data, dtype=np.uint8, count=size, offset=pos).reshape(h, w, c)
        planes[name] = arr[..., 0] if c == 1 else arr
        pos += size
    return planes


def write_stack(path: str | Path, stack: FilteredStack) -> None:
    Path(path).write_bytes(pack_stack(stack.planes()))


def read_stack(path: str | Path) -> FilteredStack:
    planes = unpack_stack(Path(path).read_bytes())
    missing = [p for p in STACK_PLANES if p not in planes]
    if missing:
        raise ImageError(f"{path}: missing planes {missing}")
    return FilteredStack(**{p: planes[p] for p in STACK_PLANES})


def component_input(img: np.ndarray, component: int, size: int,
                    spec: FilterSpec = FilterSpec()) -> np.ndarray:
    """Network input for one component: RGB for 1 and 3, the 10-channel stack for 2."""
    small = resize(img, size)
    if component == 2:
        return filter_stack(small, spec).channels()
    return small
