"""
Weight-space merging rules. Each rule is registered under its method name with
the @register_merge_func decorator, which makes it easy for @merge to dispatch
a MergeRecipe to the right function.

Static rules take full-precision task vectors; the switch rules take
TaskSwitchPacks. All sums across tasks run in ascending task order with
float64 accumulators, and results are cast back to float32 once at the end.
"""

import enum
import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from tswitch.algo.binarize import reconstruct
from tswitch.utils.errors import (
    EmptyInputError,
    FingerprintMismatchError,
    SimplexError,
    UserError,
)
from tswitch.utils.tensorstore import NamedTensorSet, check_same_structure

# mapping from merge method to merge function
REGISTERED_MERGE_FUNCS = OrderedDict()

SIMPLEX_TOL = 1e-6


class MergeMethod(str, enum.Enum):
    AVERAGE = "average"
    TASK_ARITHMETIC = "arith"
    DIRECT = "direct"
    T_SWITCH = "tswitch"
    AUTO_SWITCH = "auto"


@dataclass
class MergeRecipe:
    """
    Which merging operator to apply. @scaling_coef is required for (and only
    for) task arithmetic, @weights for (and only for) Auto-Switch.
    """

    method: MergeMethod
    scaling_coef: float = None
    weights: object = None

    def __post_init__(self):
        self.method = parse_method(self.method)
        if (self.method == MergeMethod.TASK_ARITHMETIC) != (self.scaling_coef is not None):
            raise UserError("scaling_coef must be given exactly when method is task arithmetic")
        if (self.method == MergeMethod.AUTO_SWITCH) != (self.weights is not None):
            raise UserError("weights must be given exactly when method is auto switch")


def register_merge_func(method):
    """
    Function decorator to register a merge function under @method.
    """

    def decorator(merge_func):
        REGISTERED_MERGE_FUNCS[MergeMethod(method)] = merge_func
        return merge_func

    return decorator


def parse_method(method):
    try:
        return MergeMethod(method)
    except ValueError:
        raise UserError(
            "unknown merge method {!r}; expected one of {}".format(
                method, ", ".join(m.value for m in MergeMethod)
            )
        )


def merge_factory(method):
    method = parse_method(method)
    if method not in REGISTERED_MERGE_FUNCS:
        raise UserError(
            "merge method {} not registered; available: {}".format(
                method.value, ", ".join(m.value for m in REGISTERED_MERGE_FUNCS)
            )
        )
    return REGISTERED_MERGE_FUNCS[method]


def merge(base, inputs, recipe):
    """
    Apply @recipe to @base.

    Args:
        base (NamedTensorSet): pre-trained weights
        inputs (list): task vectors (static rules) or TaskSwitchPacks (switch
            rules; T_SWITCH expects exactly one pack)
        recipe (MergeRecipe): operator and its parameters

    Returns:
        merged (NamedTensorSet)
    """
    merge_func = merge_factory(recipe.method)
    if recipe.method == MergeMethod.TASK_ARITHMETIC:
        return merge_func(base, inputs, recipe.scaling_coef)
    if recipe.method == MergeMethod.AUTO_SWITCH:
        return merge_func(base, inputs, recipe.weights)
    if recipe.method == MergeMethod.T_SWITCH:
        if len(inputs) != 1:
            raise UserError("T-Switch applies exactly one switch, got {}".format(len(inputs)))
        return merge_func(base, inputs[0])
    return merge_func(base, inputs)


# helpers


def _check_taus(base, taus):
    if len(taus) == 0:
        raise EmptyInputError("need at least one task vector to merge")
    for i, tau in enumerate(taus):
        check_same_structure(base, tau, what="task vector #{}".format(i))


def _sum_taus(taus):
    """
    Flat float64 sum of task vectors, accumulated in list order.
    """
    total = taus[0].flatten().astype(np.float64)
    for tau in taus[1:]:
        total = total + tau.flatten().astype(np.float64)
    return total


def _l2(flat64):
    return math.sqrt(float(np.sum(flat64 * flat64)))


def _finish(base, delta64, method):
    merged = (base.flatten().astype(np.float64) + delta64).astype(np.float32)
    meta = base.meta
    meta.pop("kind", None)
    meta["merge"] = method
    return base.unflatten(merged, meta=meta)


# static merges


def direct_merge_scale(taus):
    """
    sum_i ||tau_i||_2 / ||sum_i tau_i||_2 over the flattened model, or 0.0 when
    the summed vector is exactly zero.
    """
    if len(taus) == 0:
        raise EmptyInputError("need at least one task vector")
    total = _sum_taus(taus)
    denominator = _l2(total)
    if denominator == 0.0:
        return 0.0
    numerator = 0.0
    for tau in taus:
        numerator += _l2(tau.flatten().astype(np.float64))
    return numerator / denominator


@register_merge_func(MergeMethod.DIRECT)
def direct_merge(base, taus):
    """
    theta + (sum ||tau_i|| / ||sum tau_i||) * sum tau_i. The rescale keeps the
    merged delta as long as the individual deltas put together. If the task
    vectors cancel exactly, base is returned unchanged.
    """
    _check_taus(base, taus)
    total = _sum_taus(taus)
    scale = direct_merge_scale(taus)
    if scale == 0.0:
        return _finish(base, np.zeros_like(total), MergeMethod.DIRECT.value)
    return _finish(base, scale * total, MergeMethod.DIRECT.value)


@register_merge_func(MergeMethod.AVERAGE)
def weight_average(base, taus):
    """
    theta + mean of the task vectors.
    """
    _check_taus(base, taus)
    total = _sum_taus(taus)
    return _finish(base, total / float(len(taus)), MergeMethod.AVERAGE.value)


@register_merge_func(MergeMethod.TASK_ARITHMETIC)
def task_arithmetic(base, taus, scaling_coef):
    """
    theta + s * sum of the task vectors.
    """
    _check_taus(base, taus)
    total = _sum_taus(taus)
    return _finish(base, float(scaling_coef) * total, MergeMethod.TASK_ARITHMETIC.value)


# switch merges


def _check_pack(base, pack, index=None):
    if pack.base_fingerprint != base.fingerprint():
        raise FingerprintMismatchError(
            "switch{} was built for base {} but the base is {}".format(
                "" if index is None else " #{}".format(index),
                pack.base_fingerprint.hex,
                base.fingerprint().hex,
            )
        )
    if pack.shapes != [tuple(s) for s in base.shapes] or list(pack.tensors) != base.names:
        raise FingerprintMismatchError("switch tensor table does not match the base")


@register_merge_func(MergeMethod.T_SWITCH)
def apply_switch(base, pack):
    """
    theta + lambda * S_A * S_P as a plain float32 add of the reconstruction.
    """
    _check_pack(base, pack)
    tau_hat = reconstruct(pack)
    entries = [(name, base[name] + tau_hat[name]) for name in base]
    meta = base.meta
    meta.pop("kind", None)
    meta["merge"] = MergeMethod.T_SWITCH.value
    if pack.task_id is not None:
        meta["task_id"] = pack.task_id
    return NamedTensorSet(entries, meta=meta)


def signed_switch_vector(pack):
    """
    Flat float64 vector lambda * S_A * S_P (the reconstruction, widened).
    """
    return reconstruct(pack).flatten().astype(np.float64)


def simplex_weights(w, n_tasks):
    """
    Validate per-task weights: length @n_tasks, nonnegative, summing to 1 within 1e-6.
    Accepts a RouteWeights (anything with a `.w` attribute) or an array.
    """
    w = np.asarray(getattr(w, "w", w), dtype=np.float64).reshape(-1)
    if w.size != n_tasks:
        raise UserError("got {} weights for {} switches".format(w.size, n_tasks))
    if not np.isfinite(w).all() or (w < -SIMPLEX_TOL).any() or abs(float(w.sum()) - 1.0) > SIMPLEX_TOL:
        raise SimplexError("weights {} are not on the simplex".format(w.tolist()))
    return w


@register_merge_func(MergeMethod.AUTO_SWITCH)
def apply_auto(base, packs, w, vectors=None):
    """
    theta + sum_i lambda_i * w_i * S_A^i * S_P^i, summed in ascending task
    index with float64 accumulators. Zero-weight switches contribute nothing.

    Args:
        base (NamedTensorSet): pre-trained weights
        packs (list of TaskSwitchPack): one switch per task
        w (RouteWeights or array): per-task weights on the simplex
        vectors (list of np.ndarray): optional precomputed
            @signed_switch_vector of each pack (callers merging many weight
            vectors against the same packs pass these to skip re-expansion)

    Returns:
        merged (NamedTensorSet)
    """
    if len(packs) == 0:
        raise EmptyInputError("need at least one switch")
    weights = simplex_weights(w, len(packs))
    for i, pack in enumerate(packs):
        _check_pack(base, pack, index=i)
    delta = np.zeros(base.numel, dtype=np.float64)
    for i, pack in enumerate(packs):
        if weights[i] == 0.0:
            continue
        vec = vectors[i] if vectors is not None else signed_switch_vector(pack)
        delta += weights[i] * vec
    return _finish(base, delta, MergeMethod.AUTO_SWITCH.value)
