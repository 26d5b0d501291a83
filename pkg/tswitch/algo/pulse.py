"""
Pulse activation masks and the discard procedures built on them.

The keep rule retains a task vector element only if it lies above an upper
activation level or below a lower one. Levels are chosen by rank: within each
scope unit, floor(alpha * n_pos) smallest positives and floor(alpha * n_neg)
smallest-magnitude negatives are discarded, ties broken by element index
(lower index discarded first). Exact zeros are never kept.
"""

import enum
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from tswitch.utils.errors import AlphaRangeError, EmptyInputError, UserError
from tswitch.utils.tensorstore import NamedTensorSet

GLOBAL_UNIT = "*"


class Scope(enum.IntEnum):
    GLOBAL = 0
    PER_TENSOR = 1

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            key = value.strip().upper().replace("-", "_")
            if key in cls.__members__:
                return cls[key]
        try:
            return cls(int(value))
        except (TypeError, ValueError):
            raise UserError("unknown scope {!r} (expected global or per_tensor)".format(value))


@dataclass
class PulseUnit:
    """
    Thresholds and counts of one scope unit (the whole model for GLOBAL scope,
    one tensor for PER_TENSOR scope).
    """

    name: str
    gamma_u: float
    gamma_l: float
    kept_pos: int
    kept_neg: int
    total: int


@dataclass
class PulseMask:
    masks: "OrderedDict[str, np.ndarray]"
    units: list = field(default_factory=list)
    scope: Scope = Scope.GLOBAL
    alpha: float = 0.0

    @property
    def kept_pos(self):
        return sum(u.kept_pos for u in self.units)

    @property
    def kept_neg(self):
        return sum(u.kept_neg for u in self.units)

    @property
    def total(self):
        return sum(u.total for u in self.units)

    @property
    def kept(self):
        return self.kept_pos + self.kept_neg

    def flat_mask(self):
        if not self.masks:
            return np.zeros(0, dtype=bool)
        return np.concatenate([m.reshape(-1) for m in self.masks.values()])

    def popcount(self):
        return int(sum(np.count_nonzero(m) for m in self.masks.values()))


def check_alpha(alpha):
    alpha = float(alpha)
    if not (0.0 <= alpha < 1.0) or math.isnan(alpha):
        raise AlphaRangeError("alpha must lie in [0, 1), got {}".format(alpha))
    return alpha


def n_discard(alpha, n):
    """
    Number of elements discarded from a sign pool of size @n.
    """
    return int(math.floor(alpha * n))


def _select_unit(values, alpha):
    """
    Rank-select the keep set of one flattened scope unit.

    Args:
        values (np.ndarray): 1D float32 values of the unit
        alpha (float): discard ratio in [0, 1)

    Returns:
        keep (np.ndarray): boolean keep mask, same length as @values
        gamma_u (float): largest discarded positive (0 if none)
        gamma_l (float): boundary discarded negative, i.e. the most negative
            discarded value (0 if none)
        kept_pos (int), kept_neg (int)
    """
    keep = np.zeros(values.shape[0], dtype=bool)

    pos_idx = np.flatnonzero(values > 0)
    neg_idx = np.flatnonzero(values < 0)

    # stable sort on ascending index arrays breaks ties toward the lower index
    pos_order = pos_idx[np.argsort(values[pos_idx], kind="stable")]
    neg_order = neg_idx[np.argsort(-values[neg_idx], kind="stable")]

    drop_pos = n_discard(alpha, pos_idx.size)
    drop_neg = n_discard(alpha, neg_idx.size)

    keep[pos_order[drop_pos:]] = True
    keep[neg_order[drop_neg:]] = True

    gamma_u = float(values[pos_order[drop_pos - 1]]) if drop_pos > 0 else 0.0
    gamma_l = float(values[neg_order[drop_neg - 1]]) if drop_neg > 0 else 0.0
    return keep, gamma_u, gamma_l, pos_idx.size - drop_pos, neg_idx.size - drop_neg


def pulse_mask(tau, alpha, scope=Scope.GLOBAL):
    """
    Compute the pulse activation mask of a task vector.

    Args:
        tau (NamedTensorSet): task vector
        alpha (float): discard ratio in [0, 1)
        scope (Scope): GLOBAL ranks over the whole flattened model,
            PER_TENSOR ranks inside each tensor

    Returns:
        mask (PulseMask): keep bitsets aligned with tensor element order
    """
    alpha = check_alpha(alpha)
    scope = Scope.parse(scope)
    if len(tau) == 0:
        raise EmptyInputError("task vector has no tensors")

    masks = OrderedDict()
    units = []
    if scope == Scope.GLOBAL:
        flat = tau.flatten()
        keep, gu, gl, kp, kn = _select_unit(flat, alpha)
        offs = tau.offsets()
        for i, (name, arr) in enumerate(tau.items()):
            masks[name] = keep[offs[i] : offs[i + 1]].reshape(arr.shape)
        units.append(PulseUnit(GLOBAL_UNIT, gu, gl, kp, kn, int(flat.size)))
    else:
        for name, arr in tau.items():
            keep, gu, gl, kp, kn = _select_unit(arr.reshape(-1), alpha)
            masks[name] = keep.reshape(arr.shape)
            units.append(PulseUnit(name, gu, gl, kp, kn, int(arr.size)))
    return PulseMask(masks=masks, units=units, scope=scope, alpha=alpha)


def _tagged(tau, mode, alpha, scope=None):
    meta = tau.meta
    meta["discard"] = mode
    meta["alpha"] = repr(alpha)
    if scope is not None:
        meta["scope"] = Scope(scope).name.lower()
    return meta


def p_discard(tau, alpha, scope=Scope.GLOBAL):
    """
    Keep the pulse-activated elements, zero the rest.
    """
    mask = pulse_mask(tau, alpha, scope)
    return tau.map_tensors(
        lambda name, arr: np.where(mask.masks[name], arr, np.float32(0.0)),
        meta=_tagged(tau, "pulse", mask.alpha, mask.scope),
    )


def discard_high(tau, alpha, scope=Scope.GLOBAL):
    """
    Complement of @p_discard on the nonzeros: the elements p_discard keeps are
    zeroed and the small-magnitude ones it discards survive.
    """
    mask = pulse_mask(tau, alpha, scope)
    return tau.map_tensors(
        lambda name, arr: np.where(~mask.masks[name] & (arr != 0), arr, np.float32(0.0)),
        meta=_tagged(tau, "high", mask.alpha, mask.scope),
    )


def dare_discard(tau, alpha, seed):
    """
    Random drop-and-rescale. Each element is zeroed with probability @alpha and
    survivors are multiplied by 1 / (1 - alpha).

    Uniform draws come from one seeded stream laid out over the flattened model,
    so the draw for an element depends only on @seed and its flat index.
    """
    alpha = check_alpha(alpha)
    flat = tau.flatten()
    rng = np.random.default_rng(int(seed))
    draws = rng.random(flat.size)
    survive = draws >= alpha
    rescale = 1.0 / (1.0 - alpha)
    out = np.where(survive, flat.astype(np.float64) * rescale, 0.0).astype(np.float32)
    meta = _tagged(tau, "random", alpha)
    meta["seed"] = str(int(seed))
    return tau.unflatten(out, meta=meta)


DISCARD_MODES = ("pulse", "high", "random")


def discard(tau, mode, alpha, scope=Scope.GLOBAL, seed=0):
    if mode == "pulse":
        return p_discard(tau, alpha, scope)
    if mode == "high":
        return discard_high(tau, alpha, scope)
    if mode == "random":
        return dare_discard(tau, alpha, seed)
    raise UserError("unknown discard mode {!r}; expected one of {}".format(mode, DISCARD_MODES))
