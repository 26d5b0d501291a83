"""
Binarized task vectors ("task switches") and the .tsw storage format.

A task vector is decomposed into an activation switch (the pulse keep mask),
a polarity switch (the signs of the kept elements) and one scalar knob lambda
per scope unit. lambda restores the l2 length of the kept part:

    lambda = ||tau * S_A||_2 / ||S_A * S_P||_2 = RMS(kept entries)

TSW layout (little-endian, no padding):
    "TSW1" | u8 scope | f32 alpha | u32 tensor count | 16-byte base fingerprint
    per tensor: u16 name length | name | u8 rank | rank x u64 dims | u64 k
                | ceil(n/8) activation bytes | ceil(k/8) polarity bytes
                | (PER_TENSOR only) f32 lambda
    (GLOBAL only) f32 lambda
    u32 meta count | u32-length-prefixed key / value pairs
Bitsets are LSB-first within each byte; polarity bit 1 means +1.
"""

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from tswitch.algo.pulse import Scope, pulse_mask
from tswitch.utils.bit_utils import pack_bits, packed_size, padding_is_clear, popcount, unpack_bits
from tswitch.utils.errors import (
    DataError,
    DuplicateNameError,
    MagicMismatchError,
    PopcountMismatchError,
    ShapeMismatchError,
)
from tswitch.utils.file_utils import read_bytes, write_bytes_atomic
from tswitch.utils.tensorstore import (
    ByteReader,
    Fingerprint,
    NamedTensorSet,
    decode_meta,
    decode_name_shape,
    encode_meta,
    encode_name_shape,
)

TSW_MAGIC = b"TSW1"


@dataclass
class SwitchTensor:
    """
    Activation and polarity switches of one tensor.

    activation: boolean, length n (flattened tensor), True = active
    polarity: boolean, length k = popcount(activation), one entry per active
        position in ascending element order, True = +1
    """

    shape: tuple
    activation: np.ndarray
    polarity: np.ndarray

    @property
    def n(self):
        return int(self.activation.size)

    @property
    def k(self):
        return int(self.polarity.size)


@dataclass
class TaskSwitchPack:
    tensors: "OrderedDict[str, SwitchTensor]"
    knob: np.ndarray
    scope: Scope = Scope.GLOBAL
    alpha: float = 0.0
    base_fingerprint: Fingerprint = None
    meta: dict = field(default_factory=OrderedDict)

    @property
    def task_id(self):
        return self.meta.get("task_id")

    @property
    def n_params(self):
        return int(sum(t.n for t in self.tensors.values()))

    @property
    def n_active(self):
        return int(sum(t.k for t in self.tensors.values()))

    @property
    def shapes(self):
        return [t.shape for t in self.tensors.values()]

    def knob_for(self, index):
        """
        lambda (as float32) applying to the tensor at position @index.
        """
        if self.scope == Scope.GLOBAL:
            return np.float32(self.knob[0])
        return np.float32(self.knob[index])

    def check_consistent(self):
        """
        Raise PopcountMismatchError if any polarity stream does not match its
        activation popcount or the knob table has the wrong length, and
        DataError if a knob is negative or non-finite, or if it is zero
        while its tensors still have active entries (or nonzero without any).
        """
        for name, t in self.tensors.items():
            active = int(np.count_nonzero(t.activation))
            if active != t.k:
                raise PopcountMismatchError(
                    "tensor {!r}: {} active positions but {} polarity bits".format(name, active, t.k),
                    code="TSW_POPCOUNT",
                )
            if t.activation.size != math.prod(t.shape):
                raise ShapeMismatchError(
                    "tensor {!r}: activation has {} bits for shape {}".format(
                        name, t.activation.size, t.shape
                    )
                )
        expected = 1 if self.scope == Scope.GLOBAL else len(self.tensors)
        if self.knob.size != expected:
            raise PopcountMismatchError(
                "pack has {} knobs, scope {} needs {}".format(
                    self.knob.size, self.scope.name, expected
                ),
                code="TSW_KNOB",
            )
        # lambda >= 0, finite, and zero exactly when its unit has no active entry
        if self.scope == Scope.GLOBAL:
            units = [("all tensors", self.n_active)]
        else:
            units = [("tensor {!r}".format(name), t.k) for name, t in self.tensors.items()]
        for (unit, active), lam in zip(units, self.knob.tolist()):
            if not (math.isfinite(lam) and lam >= 0.0):
                raise DataError("knob for {} is {}".format(unit, lam), code="TSW_KNOB")
            if (lam == 0.0) != (active == 0):
                raise DataError(
                    "knob for {} is {} with {} active entries".format(unit, lam, active), code="TSW_KNOB"
                )


@dataclass
class StorageReport:
    bytes_serialized: int
    n_params: int
    n_active: int
    bits_per_parameter: float
    ratio_vs_fp32: float
    tensors: list = field(default_factory=list)

    def to_dict(self):
        return {
            "bytes_serialized": self.bytes_serialized,
            "n_params": self.n_params,
            "n_active": self.n_active,
            "bits_per_parameter": self.bits_per_parameter,
            "ratio_vs_fp32": self.ratio_vs_fp32,
            "tensors": list(self.tensors),
        }


def sign_switch(values):
    """
    Polarity rule: +1 (True) for strictly positive values, -1 (False) otherwise,
    zeros included.
    """
    return np.asarray(values) > 0


def _knob(kept):
    """
    ||kept||_2 / sqrt(k) with float64 accumulation (numpy pairwise summation,
    a fixed order for a given array). Zero when nothing is kept.
    """
    k = kept.size
    if k == 0:
        return 0.0
    kept = kept.astype(np.float64)
    numerator = math.sqrt(float(np.sum(kept * kept)))
    denominator = math.sqrt(float(k))
    return numerator / denominator


def build_pack(tau, alpha, scope=Scope.GLOBAL):
    """
    Decompose @tau into a TaskSwitchPack without materializing the reconstruction.
    """
    mask = pulse_mask(tau, alpha, scope)
    tensors = OrderedDict()
    kept_values = []
    for name, arr in tau.items():
        flat = arr.reshape(-1)
        active = mask.masks[name].reshape(-1)
        kept = flat[active]
        tensors[name] = SwitchTensor(
            shape=tuple(arr.shape),
            activation=active.copy(),
            polarity=sign_switch(kept),
        )
        kept_values.append(kept)

    if mask.scope == Scope.GLOBAL:
        kept_all = np.concatenate(kept_values) if kept_values else np.zeros(0, np.float32)
        knob = np.array([_knob(kept_all)], dtype=np.float32)
    else:
        knob = np.array([_knob(kept) for kept in kept_values], dtype=np.float32)

    meta = OrderedDict()
    if "task_id" in tau.meta:
        meta["task_id"] = tau.meta["task_id"]
    base_fp = tau.meta.get("base_fingerprint")
    base_fp = Fingerprint.from_hex(base_fp) if base_fp else tau.fingerprint()
    return TaskSwitchPack(
        tensors=tensors,
        knob=knob,
        scope=mask.scope,
        # stored as f32 on disk, keep the same value in memory
        alpha=float(np.float32(mask.alpha)),
        base_fingerprint=base_fp,
        meta=meta,
    )


def reconstruct(pack, shapes=None):
    """
    Dense reconstruction lambda * S_A * S_P: +-lambda at active positions by
    polarity, exactly 0.0 elsewhere. The all-ones vector is implicit.

    Args:
        pack (TaskSwitchPack): switches to expand
        shapes (list of tuples): if given, must match the pack's tensor table

    Returns:
        tau_hat (NamedTensorSet)
    """
    pack.check_consistent()
    if shapes is not None and [tuple(s) for s in shapes] != pack.shapes:
        raise ShapeMismatchError(
            "requested shapes {} do not match the pack's tensors {}".format(
                [tuple(s) for s in shapes], pack.shapes
            )
        )
    entries = []
    for i, (name, t) in enumerate(pack.tensors.items()):
        lam = pack.knob_for(i)
        out = np.zeros(t.n, dtype=np.float32)
        out[t.activation] = np.where(t.polarity, lam, -lam)
        entries.append((name, out.reshape(t.shape)))
    meta = OrderedDict(pack.meta)
    meta["kind"] = "task_vector"
    meta["base_fingerprint"] = pack.base_fingerprint.hex
    return NamedTensorSet(entries, meta=meta)


def bin_discard(tau, alpha, scope=Scope.GLOBAL):
    """
    Pulse-discard, binarize the survivors' signs and rescale by the knob.

    Returns:
        pack (TaskSwitchPack): the switches
        tau_hat (NamedTensorSet): their dense reconstruction (bit-identical to
            reconstruct(pack))
    """
    pack = build_pack(tau, alpha, scope)
    return pack, reconstruct(pack)


# .tsw codec


def encode_tsw_bytes(pack):
    pack.check_consistent()
    parts = [
        TSW_MAGIC,
        struct.pack("<B", int(pack.scope)),
        struct.pack("<f", pack.alpha),
        struct.pack("<I", len(pack.tensors)),
        pack.base_fingerprint.digest,
    ]
    for i, (name, t) in enumerate(pack.tensors.items()):
        parts.append(encode_name_shape(name, t.shape))
        parts.append(struct.pack("<Q", t.k))
        parts.append(pack_bits(t.activation))
        parts.append(pack_bits(t.polarity))
        if pack.scope == Scope.PER_TENSOR:
            parts.append(struct.pack("<f", pack.knob[i]))
    if pack.scope == Scope.GLOBAL:
        parts.append(struct.pack("<f", pack.knob[0]))
    parts.append(encode_meta(pack.meta))
    return b"".join(parts)


def decode_tsw_bytes(payload):
    if bytes(payload[:4]) != TSW_MAGIC:
        raise MagicMismatchError(
            "not a TSW file (magic {!r})".format(bytes(payload[:4])), code="TSW_MAGIC"
        )
    reader = ByteReader(payload, code="TSW_TRUNCATED")
    reader.take(4)
    scope_raw = reader.unpack("<B")
    if scope_raw not in (int(Scope.GLOBAL), int(Scope.PER_TENSOR)):
        raise DataError("unknown scope byte {}".format(scope_raw), code="TSW_HEADER")
    scope = Scope(scope_raw)
    alpha = reader.unpack("<f")
    count = reader.unpack("<I")
    base_fp = Fingerprint(bytes(reader.take(16)))

    tensors = OrderedDict()
    knobs = []
    for _ in range(count):
        name, shape = decode_name_shape(reader)
        if name in tensors:
            raise DuplicateNameError("duplicate tensor {!r}".format(name), code="TSW_DUPLICATE_NAME")
        n = math.prod(shape)
        k = reader.unpack("<Q")
        if k > n:
            raise PopcountMismatchError(
                "tensor {!r}: k={} exceeds n={}".format(name, k, n), code="TSW_POPCOUNT"
            )
        act_raw = bytes(reader.take(packed_size(n)))
        if popcount(act_raw) != k or not padding_is_clear(act_raw, n):
            raise PopcountMismatchError(
                "tensor {!r}: activation popcount {} does not match k={}".format(
                    name, popcount(act_raw), k
                ),
                code="TSW_POPCOUNT",
            )
        pol_raw = bytes(reader.take(packed_size(k)))
        if not padding_is_clear(pol_raw, k):
            raise PopcountMismatchError(
                "tensor {!r}: nonzero padding in polarity stream".format(name),
                code="TSW_POPCOUNT",
            )
        tensors[name] = SwitchTensor(
            shape=shape,
            activation=unpack_bits(act_raw, n),
            polarity=unpack_bits(pol_raw, k),
        )
        if scope == Scope.PER_TENSOR:
            knobs.append(reader.unpack("<f"))
    if scope == Scope.GLOBAL:
        knobs.append(reader.unpack("<f"))
    meta = decode_meta(reader)
    reader.expect_end("TSW file")

    pack = TaskSwitchPack(
        tensors=tensors,
        knob=np.array(knobs, dtype=np.float32),
        scope=scope,
        alpha=float(alpha),
        base_fingerprint=base_fp,
        meta=meta,
    )
    pack.check_consistent()
    return pack


def encode_tsw(pack, path):
    write_bytes_atomic(path, encode_tsw_bytes(pack))


def decode_tsw(path):
    return decode_tsw_bytes(read_bytes(path))


def storage_report(pack):
    """
    Serialized size of @pack and its cost per parameter.

    bits_per_parameter = 8 * bytes / n; ratio_vs_fp32 = bits_per_parameter / 32.
    Both are reported as 0.0 for a pack without parameters.

    The ratio is not clamped: header, names and meta cost a fixed number of
    bytes, so a pack of a few parameters can be larger than their fp32 copy
    and report a ratio above 1.
    """
    size = len(encode_tsw_bytes(pack))
    n = pack.n_params
    bits = 8.0 * size / n if n else 0.0
    per_tensor = [
        {
            "name": name,
            "n": t.n,
            "k": t.k,
            "sparsity": 1.0 - (t.k / t.n) if t.n else 0.0,
        }
        for name, t in pack.tensors.items()
    ]
    return StorageReport(
        bytes_serialized=size,
        n_params=n,
        n_active=pack.n_active,
        bits_per_parameter=bits,
        ratio_vs_fp32=bits / 32.0,
        tensors=per_tensor,
    )


def pack_summary(pack):
    """
    Small dict describing a pack for logs and json output.
    """
    return {
        "task_id": pack.task_id,
        "scope": pack.scope.name.lower(),
        "alpha": pack.alpha,
        "knob": [float(x) for x in pack.knob],
        "n_params": pack.n_params,
        "n_active": pack.n_active,
        "base_fingerprint": pack.base_fingerprint.hex,
    }
