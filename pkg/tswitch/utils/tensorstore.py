"""
Checkpoint / task vector container and its binary file format (NTC).

A NamedTensorSet holds named float32 tensors in a fixed order plus free-form
string metadata. The same container stores pre-trained weights, fine-tuned
weights, merged backbones and task vectors (meta kind=task_vector).

NTC layout (little-endian, no padding):
    "NTC1" | u32 entry count
    per entry: u16 name length | name (UTF-8) | u8 rank | rank x u64 dims | f32 payload
    u32 meta count | per pair: u32 key length | key | u32 value length | value
An empty set with no meta is therefore 12 bytes: magic, a zero entry count and
a zero meta count.

Only finite values are stored: save_ntc refuses NaN / Inf and load_ntc checks
again, so every file written here loads back bit-exact.
"""

import hashlib
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from tswitch.utils.errors import (
    DimensionMismatchError,
    DtypeError,
    DuplicateNameError,
    FingerprintMismatchError,
    MagicMismatchError,
    NonFiniteError,
    ShapeMismatchError,
    TrailingBytesError,
    TruncatedFileError,
)
from tswitch.utils.file_utils import read_bytes, write_bytes_atomic

NTC_MAGIC = b"NTC1"
KIND_TASK_VECTOR = "task_vector"


@dataclass(frozen=True)
class Fingerprint:
    """
    128-bit digest over the ordered tensor names and shapes (never the values).
    """

    digest: bytes

    def __post_init__(self):
        assert len(self.digest) == 16, "fingerprint must be 16 bytes"

    @property
    def hex(self):
        return self.digest.hex()

    @classmethod
    def from_hex(cls, text):
        return cls(bytes.fromhex(text))

    def __str__(self):
        return self.hex


def fingerprint_of(names, shapes):
    h = hashlib.blake2b(digest_size=16)
    for name, shape in zip(names, shapes):
        raw = name.encode("utf-8")
        h.update(struct.pack("<H", len(raw)))
        h.update(raw)
        h.update(struct.pack("<B", len(shape)))
        for dim in shape:
            h.update(struct.pack("<Q", dim))
    return Fingerprint(h.digest())


def _check_shape(name, shape):
    shape = tuple(int(d) for d in shape)
    if len(shape) > 255:
        raise ShapeMismatchError("tensor {!r} has rank {} > 255".format(name, len(shape)))
    if any(d <= 0 for d in shape):
        raise ShapeMismatchError(
            "tensor {!r} has non-positive dimension in shape {}".format(name, shape)
        )
    return shape


class NamedTensorSet(object):
    """
    Ordered, immutable map from tensor name to a float32 array.

    Args:
        entries (OrderedDict or list of (name, np.ndarray)): tensors in storage order.
            Arrays must already be float32; they are copied and made read-only.
        meta (dict): free-form string metadata (model id, task id, kind, ...)
        validated (bool): if True, check every value is finite and mark the set
    """

    def __init__(self, entries=None, meta=None, validated=False):
        pairs = entries.items() if isinstance(entries, dict) else (entries or [])
        self._tensors = OrderedDict()
        for name, arr in pairs:
            if not isinstance(name, str):
                raise DtypeError("tensor names must be str, got {!r}".format(name))
            if name in self._tensors:
                raise DuplicateNameError("duplicate tensor name {!r}".format(name))
            arr = np.asarray(arr)
            if arr.dtype != np.float32:
                raise DtypeError(
                    "tensor {!r} has dtype {}; only float32 is supported".format(name, arr.dtype)
                )
            _check_shape(name, arr.shape)
            arr = np.array(arr, dtype=np.float32, copy=True, order="C")
            arr.setflags(write=False)
            self._tensors[name] = arr
        self._meta = OrderedDict((str(k), str(v)) for k, v in (meta or {}).items())
        self._validated = False
        self._fingerprint = None
        if validated:
            self.validate()

    @classmethod
    def from_flat_entries(cls, entries, meta=None, validated=False):
        """
        Build from (name, shape, flat data) triples, checking len(data) == prod(shape).
        """
        arrays = []
        for name, shape, data in entries:
            shape = _check_shape(name, shape)
            data = np.asarray(data, dtype=np.float32).reshape(-1)
            if data.size != math.prod(shape):
                raise ShapeMismatchError(
                    "tensor {!r}: shape {} needs {} values, got {}".format(
                        name, shape, math.prod(shape), data.size
                    )
                )
            arrays.append((name, data.reshape(shape)))
        return cls(arrays, meta=meta, validated=validated)

    # container protocol

    def __len__(self):
        return len(self._tensors)

    def __iter__(self):
        return iter(self._tensors)

    def __contains__(self, name):
        return name in self._tensors

    def __getitem__(self, name):
        return self._tensors[name]

    def items(self):
        return self._tensors.items()

    def __repr__(self):
        return "NamedTensorSet({} tensors, {} params, meta={})".format(
            len(self), self.numel, dict(self._meta)
        )

    @property
    def names(self):
        return list(self._tensors.keys())

    @property
    def shapes(self):
        return [arr.shape for arr in self._tensors.values()]

    @property
    def numel(self):
        return int(sum(arr.size for arr in self._tensors.values()))

    @property
    def meta(self):
        return dict(self._meta)

    @property
    def is_validated(self):
        return self._validated

    def fingerprint(self):
        if self._fingerprint is None:
            self._fingerprint = fingerprint_of(self.names, self.shapes)
        return self._fingerprint

    def validate(self):
        for name, arr in self._tensors.items():
            if not np.isfinite(arr).all():
                raise NonFiniteError("tensor {!r} contains NaN or Inf".format(name))
        self._validated = True
        return self

    def with_meta(self, **updates):
        meta = self.meta
        meta.update({k: str(v) for k, v in updates.items()})
        out = NamedTensorSet(self._tensors, meta=meta)
        out._validated = self._validated
        return out

    # whole-model vector view

    def flatten(self):
        """
        Concatenate every tensor in stored order into one float32 vector.
        """
        if len(self) == 0:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate([arr.reshape(-1) for arr in self._tensors.values()])

    def offsets(self):
        """
        Start offset of each tensor inside @flatten, plus the total length at the end.
        """
        out = [0]
        for arr in self._tensors.values():
            out.append(out[-1] + arr.size)
        return out

    def unflatten(self, flat, meta=None):
        """
        Inverse of @flatten: reshape a flat vector into a set with this set's
        names and shapes.
        """
        flat = np.asarray(flat)
        if flat.dtype != np.float32:
            flat = flat.astype(np.float32)
        assert flat.size == self.numel, "flat vector has {} values, set needs {}".format(
            flat.size, self.numel
        )
        offs = self.offsets()
        entries = [
            (name, flat[offs[i] : offs[i + 1]].reshape(arr.shape))
            for i, (name, arr) in enumerate(self._tensors.items())
        ]
        return NamedTensorSet(entries, meta=self.meta if meta is None else meta)

    def map_tensors(self, fn, meta=None):
        """
        Apply @fn(name, array) -> float32 array to every tensor.
        """
        entries = [(name, fn(name, arr)) for name, arr in self._tensors.items()]
        return NamedTensorSet(entries, meta=self.meta if meta is None else meta)

    def bit_equal(self, other):
        """
        True if names, order, shapes and every float bit pattern agree.
        """
        if self.names != other.names:
            return False
        for name, arr in self._tensors.items():
            b = other[name]
            if arr.shape != b.shape:
                return False
            if not np.array_equal(arr.view(np.uint32), b.view(np.uint32)):
                return False
        return True


def check_same_structure(base, other, what="tensor set"):
    if base.fingerprint() != other.fingerprint():
        raise FingerprintMismatchError(
            "{} does not match the base structure (fingerprint {} vs {})".format(
                what, other.fingerprint().hex, base.fingerprint().hex
            )
        )


# binary codec helpers (shared with the .tsw and .tqi codecs)


class ByteReader(object):
    """
    Sequential little-endian reader over an in-memory file that raises
    @truncated_error when asked for bytes past the end.
    """

    def __init__(self, payload, truncated_error=TruncatedFileError, code=None):
        self.payload = memoryview(payload)
        self.pos = 0
        self.truncated_error = truncated_error
        self.code = code

    def take(self, n):
        n = int(n)
        if n < 0 or self.pos + n > len(self.payload):
            raise self.truncated_error(
                "file truncated: needed {} bytes at offset {}, only {} left".format(
                    n, self.pos, len(self.payload) - self.pos
                ),
                code=self.code,
            )
        out = self.payload[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        values = struct.unpack(fmt, self.take(size))
        return values[0] if len(values) == 1 else values

    def string(self, length_fmt="<H"):
        n = self.unpack(length_fmt)
        return bytes(self.take(n)).decode("utf-8")

    @property
    def remaining(self):
        return len(self.payload) - self.pos

    def expect_end(self, what):
        if self.remaining:
            raise TrailingBytesError(
                "{} has {} unexpected trailing bytes".format(what, self.remaining)
            )


def encode_name_shape(name, shape):
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ShapeMismatchError("tensor name {!r} too long".format(name[:32]))
    parts = [struct.pack("<H", len(raw)), raw, struct.pack("<B", len(shape))]
    parts.extend(struct.pack("<Q", d) for d in shape)
    return b"".join(parts)


def decode_name_shape(reader):
    name = reader.string("<H")
    rank = reader.unpack("<B")
    shape = tuple(reader.unpack("<Q") for _ in range(rank))
    return name, _check_shape(name, shape)


def encode_meta(meta):
    parts = [struct.pack("<I", len(meta))]
    for key, value in meta.items():
        for text in (key, value):
            raw = str(text).encode("utf-8")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
    return b"".join(parts)


def decode_meta(reader):
    count = reader.unpack("<I")
    meta = OrderedDict()
    for _ in range(count):
        key = reader.string("<I")
        meta[key] = reader.string("<I")
    return meta


# NTC


def encode_ntc(tensor_set):
    parts = [NTC_MAGIC, struct.pack("<I", len(tensor_set))]
    for name, arr in tensor_set.items():
        parts.append(encode_name_shape(name, arr.shape))
        parts.append(arr.astype("<f4", copy=False).tobytes(order="C"))
    parts.append(encode_meta(tensor_set.meta))
    return b"".join(parts)


def decode_ntc(payload):
    reader = ByteReader(payload, code="NTC_TRUNCATED")
    magic = bytes(reader.take(4)) if len(payload) >= 4 else bytes(payload)
    if magic != NTC_MAGIC:
        raise MagicMismatchError(
            "not an NTC file (magic {!r})".format(magic), code="NTC_MAGIC"
        )
    count = reader.unpack("<I")
    entries = []
    seen = set()
    for _ in range(count):
        name, shape = decode_name_shape(reader)
        if name in seen:
            raise DuplicateNameError(
                "duplicate tensor name {!r}".format(name), code="NTC_DUPLICATE_NAME"
            )
        seen.add(name)
        n = math.prod(shape)
        data = np.frombuffer(reader.take(4 * n), dtype="<f4").astype(np.float32)
        entries.append((name, data.reshape(shape)))
    meta = decode_meta(reader)
    reader.expect_end("NTC file")
    return NamedTensorSet(entries, meta=meta, validated=True)


def load_ntc(path):
    """
    Args:
        path (str): path to an .ntc file

    Returns:
        tensor_set (NamedTensorSet): validated set, bit-exact with what was saved
    """
    return decode_ntc(read_bytes(path))


def save_ntc(tensor_set, path):
    """
    Raises NonFiniteError (nothing is written) if any value is NaN or Inf.
    """
    if not tensor_set.is_validated:
        tensor_set.validate()
    write_bytes_atomic(path, encode_ntc(tensor_set))


# task vectors


def compute_task_vector(base, finetuned):
    """
    tau = finetuned - base, elementwise per tensor. Both sets must share names
    and shapes.
    """
    check_same_structure(base, finetuned, what="fine-tuned checkpoint")
    entries = [(name, finetuned[name] - base[name]) for name in base]
    meta = OrderedDict()
    meta["kind"] = KIND_TASK_VECTOR
    meta["base_fingerprint"] = base.fingerprint().hex
    for key in ("task_id", "model_id"):
        if key in finetuned.meta:
            meta[key] = finetuned.meta[key]
    return NamedTensorSet(entries, meta=meta)


def add_task_vector(base, tau, scale=1.0):
    """
    base + scale * tau per tensor. With scale == 1 this is a plain float32 add,
    so add_task_vector(base, compute_task_vector(base, ft)) reproduces ft up to
    float rounding of the subtraction.
    """
    check_same_structure(base, tau, what="task vector")
    if scale == 1.0:
        entries = [(name, base[name] + tau[name]) for name in base]
    else:
        entries = [
            (
                name,
                (base[name].astype(np.float64) + scale * tau[name].astype(np.float64)).astype(
                    np.float32
                ),
            )
            for name in base
        ]
    meta = base.meta
    meta.pop("kind", None)
    return NamedTensorSet(entries, meta=meta)


def materialize_lowrank(down, up, scale):
    """
    Dense delta scale * (down @ up) from low-rank factors.

    Args:
        down (np.ndarray): d x r factor
        up (np.ndarray): r x k factor
        scale (float): scaling applied to the product

    Returns:
        delta (np.ndarray): d x k float32 tensor
    """
    down = np.asarray(down, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    if down.ndim != 2 or up.ndim != 2:
        raise DimensionMismatchError(
            "low-rank factors must be matrices, got shapes {} and {}".format(down.shape, up.shape)
        )
    if down.shape[1] != up.shape[0] or down.shape[1] < 1:
        raise DimensionMismatchError(
            "inner dimensions disagree: {} x {}".format(down.shape, up.shape)
        )
    # einsum keeps the contraction order fixed (no BLAS threading)
    product = np.einsum("ir,rk->ik", down, up)
    # + 0.0 folds negative zeros from a zero scale into +0.0
    return (float(scale) * product + 0.0).astype(np.float32)


def materialize_lowrank_set(down_set, up_set, scale):
    """
    Pair tensors with the same name from the two factor sets and materialize
    each into a dense delta. The result is tagged as a task vector.
    """
    if down_set.names != up_set.names:
        raise DimensionMismatchError(
            "down and up factor sets must hold the same tensor names in the same order"
        )
    entries = [
        (name, materialize_lowrank(down_set[name], up_set[name], scale)) for name in down_set
    ]
    meta = down_set.meta
    meta["kind"] = KIND_TASK_VECTOR
    meta["lowrank_scale"] = repr(float(scale))
    return NamedTensorSet(entries, meta=meta)
