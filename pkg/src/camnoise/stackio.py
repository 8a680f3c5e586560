"""Image stacks on disk and the calibration data derived from them.

The native container is NSTK, a small little-endian binary format::

    b"NSTK"  u8 version(=1)  u32 width  u32 height  u32 frames
    width*height*frames float32, frame-major, row-major within a frame

``.npy`` files (a 2-D frame or a 3-D ``(frames, height, width)`` array) and
directories of 2-D ``.npy`` frames are accepted as input adapters.
"""

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes
from .exceptions import DimensionMismatchError, FormatError

NSTK_MAGIC = b"NSTK"
NSTK_VERSION = 1
_HEADER = struct.Struct("<4sBIII")


def _frozen(arr):
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ImageStack:
    """``m`` single-channel frames stored as float32, shape ``(frames, height, width)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise DimensionMismatchError(f"expected a (frames, height, width) array, got shape {data.shape}")
        if data.size == 0:
            raise ValueError("image stack is empty")
        if not np.issubdtype(data.dtype, np.number):
            raise TypeError(f"non-numeric pixel type {data.dtype}")
        data = np.array(data, dtype=np.float32, order="C")
        if not np.all(np.isfinite(data)):
            raise ValueError("image stack contains non-finite pixels")
        object.__setattr__(self, "data", _frozen(data))

    @classmethod
    def from_frames(cls, frames):
        frames = [np.asarray(f) for f in frames]
        if not frames:
            raise ValueError("no frames given")
        shape = frames[0].shape
        for j, f in enumerate(frames):
            if f.ndim != 2:
                raise DimensionMismatchError(f"frame {j} is not 2-D (shape {f.shape})")
            if f.shape != shape:
                raise DimensionMismatchError(f"frame {j} has shape {f.shape}, frame 0 has {shape}")
        return cls(np.stack(frames))

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def __len__(self):
        return self.frames


@dataclass(frozen=True, eq=False)
class GtImage:
    """Per-pixel mean signal, float64, shape ``(height, width)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2 or data.size == 0:
            raise DimensionMismatchError(f"ground truth must be a nonempty 2-D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("ground truth contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class CalibrationPairs:
    """Flat (signal, observation) samples; ``signal[i]`` is the clean value for ``observation[i]``.

    The range fields are derived from the arrays, so they always match the stored extrema.
    """

    signal: np.ndarray
    observation: np.ndarray

    def __post_init__(self):
        s = np.array(self.signal, dtype=np.float64).ravel()
        x = np.array(self.observation, dtype=np.float64).ravel()
        if s.shape != x.shape:
            raise DimensionMismatchError(f"{s.size} signals but {x.size} observations")
        if s.size == 0:
            raise ValueError("calibration pairs are empty")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(x))):
            raise ValueError("calibration pairs contain non-finite values")
        object.__setattr__(self, "signal", _frozen(s))
        object.__setattr__(self, "observation", _frozen(x))

    def __len__(self):
        return self.signal.size

    @cached_property
    def min_signal(self) -> float:
        return float(self.signal.min())

    @cached_property
    def max_signal(self) -> float:
        return float(self.signal.max())

    @cached_property
    def min_obs(self) -> float:
        return float(self.observation.min())

    @cached_property
    def max_obs(self) -> float:
        return float(self.observation.max())

    def subset(self, index):
        return CalibrationPairs(self.signal[index], self.observation[index])

    def concat(self, other):
        return CalibrationPairs(
            np.concatenate([self.signal, other.signal]),
            np.concatenate([self.observation, other.observation]),
        )


def encode_stack(stack: ImageStack) -> bytes:
    header = _HEADER.pack(NSTK_MAGIC, NSTK_VERSION, stack.width, stack.height, stack.frames)
    return header + stack.data.astype("<f4", copy=False).tobytes(order="C")


def decode_stack(buf: bytes) -> ImageStack:
    if len(buf) < _HEADER.size:
        raise FormatError(f"NSTK file too short for header ({len(buf)} bytes)")
    magic, version, width, height, frames = _HEADER.unpack_from(buf)
    if magic != NSTK_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {NSTK_MAGIC!r}")
    if version != NSTK_VERSION:
        raise FormatError(f"unsupported NSTK version {version}")
    if width == 0 or height == 0 or frames == 0:
        raise FormatError(f"degenerate NSTK dimensions {width}x{height}x{frames}")
    expected = width * height * frames * 4
    payload = buf[_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(f"NSTK payload is {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(frames, height, width)
    return ImageStack(data)


def save_stack(stack: ImageStack, path) -> None:
    atomic_write_bytes(path, encode_stack(stack))


def load_stack(path) -> ImageStack:
    """Read an NSTK file, a ``.npy`` array, or a directory of 2-D ``.npy`` frames."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.npy"))
        if not files:
            raise FormatError(f"no .npy frames in directory {path}")
        return ImageStack.from_frames([np.load(f, allow_pickle=False) for f in files])
    if path.suffix == ".npy":
        try:
            arr = np.load(path, allow_pickle=False)
        except ValueError as exc:
            raise FormatError(f"cannot read {path}: {exc}") from exc
        return ImageStack(arr)
    return decode_stack(path.read_bytes())


def save_gt(gt: GtImage, path) -> None:
    save_stack(ImageStack(gt.data[None]), path)


def load_gt(path) -> GtImage:
    stack = load_stack(path)
    if stack.frames != 1:
        raise DimensionMismatchError(f"ground truth file {path} has {stack.frames} frames, expected 1")
    return GtImage(stack.data[0])


def compute_gt(stack: ImageStack) -> GtImage:
    """Average the frames of a static-scene stack (float64 accumulation)."""
    if stack.frames < 1:
        raise ValueError("cannot average an empty stack")
    return GtImage(np.mean(stack.data, axis=0, dtype=np.float64))


def extract_pairs(stack: ImageStack, gt: GtImage) -> CalibrationPairs:
    """Pair every noisy pixel of every frame with the ground-truth value at that pixel.

    Pairs are ordered frame-major, then row-major within the frame.
    """
    if (gt.height, gt.width) != (stack.height, stack.width):
        raise DimensionMismatchError(
            f"ground truth is {gt.width}x{gt.height}, stack frames are {stack.width}x{stack.height}"
        )
    signal = np.tile(gt.data.ravel(), stack.frames)
    return CalibrationPairs(signal, stack.data.ravel())


def pairs_from_pseudo_gt(stack: ImageStack, pseudo_gt) -> CalibrationPairs:
    """Pair each noisy pixel with its own frame's (pseudo) ground truth."""
    pseudo_gt = np.asarray(pseudo_gt.data if isinstance(pseudo_gt, ImageStack) else pseudo_gt)
    if pseudo_gt.shape != stack.data.shape:
        raise DimensionMismatchError(f"pseudo ground truth shape {pseudo_gt.shape} != stack shape {stack.data.shape}")
    return CalibrationPairs(pseudo_gt.ravel(), stack.data.ravel())
