"""Domain containers and bit-exact file codecs.

Array layout conventions used everywhere in the package:

* images are channel-planar ``(C, H, W)`` float arrays in ``[0, 1]``
* depth, disparity and masks are ``(H, W)``
* flow fields are ``(H, W, 2)`` holding ``(du, dv)`` per pixel
* pixel coordinates are ``(u, v)`` = (column, row), pixel centers at integers

The numerical routines accept plain ndarrays (float64 is used internally),
while the containers below validate their invariants on construction and are
read-only afterwards.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import cv2
import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

VOID = 255
MAX_INSTANCE = 65535
FLO_MAGIC = 202021.25
_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class PdkError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(PdkError, ValueError):
    """An argument violates the operation's preconditions."""


class FormatError(PdkError, ValueError):
    """A file decoded fine but does not follow the expected format."""


class DecodeError(PdkError, ValueError):
    """A file could not be decoded at all."""


class DegenerateInputError(PdkError, ValueError):
    """Input is well-formed but the quantity is undefined on it."""


class TruncatedFileError(PdkError, OSError):
    """A binary payload ended before the advertised size."""


def _frozen(arr):
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def as_array(x, dtype=np.float64):
    """Return the ndarray behind a container (or ``x`` itself) as ``dtype``."""
    data = getattr(x, "data", x)
    return np.asarray(data, dtype=dtype)


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Image:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or data.shape[0] not in (1, 3):
            raise ParameterError(f"image must be (C,H,W) with C in (1,3), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ParameterError("image contains non-finite values")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ParameterError("image values must lie in [0, 1]")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Metric depth in meters; 0 marks an invalid pixel."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise ParameterError(f"depth map must be 2-D, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ParameterError("depth map contains non-finite values")
        if np.any(data < 0):
            raise ParameterError("depth must be positive (valid) or exactly 0 (invalid)")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def valid(self):
        return self.data > 0

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class DisparityMap:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise ParameterError(f"disparity map must be 2-D, got {data.shape}")
        if not np.all(np.isfinite(data)) or np.any(data < 0):
            raise ParameterError("disparity must be finite and non-negative")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class PanopticMap:
    """Per-pixel (class, instance) labels.

    ``class_id == 255`` is void. ``instance_id == 0`` marks stuff (or a
    thing region without an instance). Any pixel with a positive instance id
    must belong to a class listed in ``thing_classes``.
    """

    class_id: np.ndarray
    instance_id: np.ndarray
    thing_classes: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        cls = np.asarray(self.class_id)
        inst = np.asarray(self.instance_id)
        if cls.ndim != 2 or cls.shape != inst.shape:
            raise ParameterError("class and instance maps must be 2-D and of equal shape")
        if cls.size and (cls.min() < 0 or cls.max() > VOID):
            raise ParameterError("class ids must lie in [0, 255]")
        if inst.size and (inst.min() < 0 or inst.max() > MAX_INSTANCE):
            raise ParameterError("instance ids must lie in [0, 65535]")
        things = frozenset(int(c) for c in self.thing_classes)
        if VOID in things:
            raise ParameterError("void cannot be a thing class")
        if np.any(inst[cls == VOID] != 0):
            raise ParameterError("void pixels must carry instance id 0")
        with_instance = np.unique(cls[inst > 0])
        bad = [int(c) for c in with_instance if int(c) not in things]
        if bad:
            raise ParameterError(f"classes {bad} carry instance ids but are not thing classes")
        object.__setattr__(self, "class_id", _frozen(cls.astype(np.int32)))
        object.__setattr__(self, "instance_id", _frozen(inst.astype(np.int32)))
        object.__setattr__(self, "thing_classes", things)

    @property
    def shape(self):
        return self.class_id.shape

    @property
    def height(self):
        return self.class_id.shape[0]

    @property
    def width(self):
        return self.class_id.shape[1]

    @property
    def void(self):
        return self.class_id == VOID

    def segment_ids(self):
        """Single int64 key per pixel (``class * 65536 + instance``), -1 on void."""
        key = self.class_id.astype(np.int64) * (MAX_INSTANCE + 1) + self.instance_id
        return np.where(self.void, -1, key)

    def replace(self, class_id=None, instance_id=None):
        return PanopticMap(
            self.class_id if class_id is None else class_id,
            self.instance_id if instance_id is None else instance_id,
            self.thing_classes,
        )

    def with_void(self, mask):
        """Copy with pixels where ``mask`` is true set to void."""
        mask = np.asarray(mask, dtype=bool)
        return self.replace(
            np.where(mask, VOID, self.class_id), np.where(mask, 0, self.instance_id)
        )

    def __eq__(self, other):
        if not isinstance(other, PanopticMap):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.class_id, other.class_id)
            and np.array_equal(self.instance_id, other.instance_id)
            and self.thing_classes == other.thing_classes
        )

    __hash__ = None


def split_segment_ids(keys):
    keys = np.asarray(keys, dtype=np.int64)
    return keys // (MAX_INSTANCE + 1), keys % (MAX_INSTANCE + 1)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            value = float(getattr(self, name))
            if not np.isfinite(value):
                raise ParameterError(f"{name} must be finite")
            object.__setattr__(self, name, value)
        if self.fx <= 0 or self.fy <= 0:
            raise ParameterError("focal lengths must be positive")

    @property
    def matrix(self):
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def inverse(self):
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def rescaled(self, factor):
        """Intrinsics for an image resized by ``factor`` (pixel-center aligned)."""
        return Intrinsics(
            self.fx * factor,
            self.fy * factor,
            (self.cx + 0.5) * factor - 0.5,
            (self.cy + 0.5) * factor - 0.5,
        )


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Rigid transform ``x -> R x + t`` (target camera to source camera)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if rot.shape != (3, 3) or trans.shape != (3,):
            raise ParameterError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise ParameterError("pose contains non-finite values")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-9:
            raise ParameterError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ParameterError("rotation determinant must be +1")
        object.__setattr__(self, "rotation", _frozen(rot))
        object.__setattr__(self, "translation", _frozen(trans))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4) or not np.allclose(m[3], [0, 0, 0, 1]):
            raise ParameterError("expected a homogeneous 4x4 rigid transform")
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __eq__(self, other):
        if not isinstance(other, PoseSE3):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class FlowField:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or data.shape[2] != 2:
            raise ParameterError(f"flow must be (H,W,2), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ParameterError("flow contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class MaskMap:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ParameterError("mask must be 2-D")
        if data.dtype != bool and not np.all((data == 0) | (data == 1)):
            raise ParameterError("mask values must be 0 or 1")
        object.__setattr__(self, "data", _frozen(data.astype(np.uint8)))

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class LossResult:
    """Scalar loss with an optional gradient w.r.t. one named input.

    ``gradient`` is an array shaped like the differentiated input, or a tuple
    of arrays when the input is a list (e.g. the levels of a pyramid).
    """

    value: float
    gradient: object = None
    grad_input_name: str = ""

    def __post_init__(self):
        value = float(self.value)
        if not np.isfinite(value):
            raise ParameterError("loss value is not finite")
        object.__setattr__(self, "value", value)
        grad = self.gradient
        if grad is None:
            return
        if isinstance(grad, (list, tuple)):
            grad = tuple(_frozen(np.asarray(g, dtype=np.float32)) for g in grad)
            parts = grad
        else:
            grad = _frozen(np.asarray(grad, dtype=np.float32))
            parts = (grad,)
        if not all(np.all(np.isfinite(g)) for g in parts):
            raise ParameterError("gradient contains non-finite values")
        object.__setattr__(self, "gradient", grad)


# ---------------------------------------------------------------------------
# Codecs
# ---------------------------------------------------------------------------


def _png_header(path):
    """Return (bit_depth, color_type) from the IHDR chunk."""
    with open(path, "rb") as fh:
        head = fh.read(33)
    if len(head) < 33 or head[:8] != _PNG_SIGNATURE or head[12:16] != b"IHDR":
        raise DecodeError(f"{path}: not a PNG file")
    return head[24], head[25]


def _open_png(path):
    try:
        img = PILImage.open(path)
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"{path}: {exc}") from exc
    return img


def read_depth_png(path):
    """Decode a 16-bit single-channel depth PNG (meters = raw / 256, 0 = invalid)."""
    bit_depth, color_type = _png_header(path)
    if bit_depth != 16 or color_type != 0:
        raise FormatError(
            f"{path}: depth PNG must be 16-bit grayscale "
            f"(got bit depth {bit_depth}, color type {color_type})"
        )
    raw = np.array(_open_png(path), dtype=np.uint16)
    return DepthMap(raw.astype(np.float32) / 256.0)


def encode_depth(depth):
    data = as_array(depth)
    raw = np.rint(data * 256.0)
    if raw.max(initial=0) > 65535:
        raise ParameterError("depth exceeds the 16-bit PNG range (max 255.996 m)")
    return raw.astype(np.uint16)


def write_depth_png(path, depth):
    """Write depth as 16-bit PNG. Values are rounded to the nearest 1/256 m."""
    PILImage.fromarray(encode_depth(depth)).save(path)


def read_panoptic_png(path, thing_classes=None):
    """Decode an RGB panoptic PNG: R = class, (G, B) = big-endian instance id.

    When ``thing_classes`` is omitted, every class that carries a positive
    instance id somewhere in the map is treated as a thing class.
    """
    bit_depth, color_type = _png_header(path)
    if bit_depth != 8 or color_type != 2:
        raise FormatError(f"{path}: panoptic PNG must be 8-bit RGB")
    rgb = np.array(_open_png(path), dtype=np.int32)
    cls = rgb[..., 0]
    inst = rgb[..., 1] * 256 + rgb[..., 2]
    if np.any(inst[cls == VOID] != 0):
        raise FormatError(f"{path}: void pixels with nonzero instance bytes")
    if thing_classes is None:
        thing_classes = np.unique(cls[inst > 0]).tolist()
    return PanopticMap(cls, inst, frozenset(thing_classes))


def encode_panoptic(pan):
    rgb = np.empty(pan.shape + (3,), dtype=np.uint8)
    rgb[..., 0] = pan.class_id
    rgb[..., 1] = pan.instance_id >> 8
    rgb[..., 2] = pan.instance_id & 0xFF
    return rgb


def write_panoptic_png(path, pan):
    PILImage.fromarray(encode_panoptic(pan), mode="RGB").save(path)


def read_flo(path):
    """Read a Middlebury ``.flo`` file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise TruncatedFileError(f"{path}: header truncated")
    magic, width, height = struct.unpack("<fii", blob[:12])
    if magic != FLO_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if width < 0 or height < 0:
        raise FormatError(f"{path}: negative dimensions")
    expected = 12 + 8 * width * height
    if len(blob) < expected:
        raise TruncatedFileError(f"{path}: payload has {len(blob) - 12} of {expected - 12} bytes")
    data = np.frombuffer(blob, dtype="<f4", count=2 * width * height, offset=12)
    return FlowField(data.reshape(height, width, 2))


def write_flo(path, flow):
    data = np.asarray(getattr(flow, "data", flow), dtype="<f4")
    height, width = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, width, height))
        fh.write(np.ascontiguousarray(data).tobytes())


def read_image(path):
    """Read an 8- or 16-bit grayscale/RGB PNG into a normalized ``Image``."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DecodeError(f"{path}: cannot decode image")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise FormatError(f"{path}: unsupported sample type {raw.dtype}")
    if raw.ndim == 2:
        planes = raw[None]
    elif raw.shape[2] == 3:
        planes = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB).transpose(2, 0, 1)
    else:
        raise FormatError(f"{path}: expected 1 or 3 channels")
    return Image(planes.astype(np.float32) / np.float32(scale))


def write_image(path, image, bits=16):
    """Write an ``Image`` as PNG with 8 or 16 bits per sample."""
    if bits not in (8, 16):
        raise ParameterError("bits must be 8 or 16")
    data = as_array(image)
    peak = 255.0 if bits == 8 else 65535.0
    raw = np.rint(np.clip(data, 0, 1) * peak).astype(np.uint8 if bits == 8 else np.uint16)
    if raw.shape[0] == 1:
        out = raw[0]
    else:
        out = cv2.cvtColor(raw.transpose(1, 2, 0), cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), out):
        raise OSError(f"{path}: cannot write image")
