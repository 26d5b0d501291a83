"""
Bitset packing. Bits are stored LSB-first within each byte, so element j of a
mask lives in byte j // 8 at bit position j % 8. Padding bits in the last byte
are always zero.
"""

import numpy as np


def packed_size(n):
    return (int(n) + 7) // 8


def pack_bits(bits):
    """
    Args:
        bits (np.ndarray): boolean array of any shape; flattened in C order

    Returns:
        payload (bytes): ceil(n / 8) bytes
    """
    bits = np.ascontiguousarray(bits, dtype=bool).reshape(-1)
    return np.packbits(bits, bitorder="little").tobytes()


def unpack_bits(payload, n):
    """
    Inverse of @pack_bits.

    Args:
        payload (bytes): exactly ceil(n / 8) bytes
        n (int): number of meaningful bits

    Returns:
        bits (np.ndarray): boolean array of length n
    """
    assert len(payload) == packed_size(n), "expected {} bytes for {} bits, got {}".format(
        packed_size(n), n, len(payload)
    )
    if n == 0:
        return np.zeros(0, dtype=bool)
    raw = np.frombuffer(payload, dtype=np.uint8)
    return np.unpackbits(raw, count=n, bitorder="little").astype(bool)


def padding_is_clear(payload, n):
    """
    True if every bit at position >= n in the last byte is zero.
    """
    rem = int(n) % 8
    if rem == 0 or len(payload) == 0:
        return True
    return (payload[-1] >> rem) == 0


def popcount(payload):
    if len(payload) == 0:
        return 0
    raw = np.frombuffer(payload, dtype=np.uint8)
    return int(np.unpackbits(raw).sum(dtype=np.int64))
