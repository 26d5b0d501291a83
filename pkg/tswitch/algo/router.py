"""
Training-free routing for Auto-Switch.

A QueryIndex stores the backbone features of a few unlabeled examples per
task. For an input feature, the C nearest rows vote: task i gets weight
count_i / C. Weights are kept as integer counts so that cache keys and the
simplex check are exact.

TQI layout (little-endian, no padding):
    "TQI1" | u32 K | u32 d | u32 rows | rows x (u32 task_id | d x f32 feature)
"""

import math
import struct
import threading
from dataclasses import dataclass

import numpy as np

from tswitch.algo.merge import apply_auto, signed_switch_vector
from tswitch.utils.errors import (
    DataError,
    DimensionMismatchError,
    EmptyInputError,
    MagicMismatchError,
    NonFiniteError,
    UserError,
)
from tswitch.utils.file_utils import read_bytes, write_bytes_atomic
from tswitch.utils.tensorstore import ByteReader

TQI_MAGIC = b"TQI1"
DEFAULT_N = 100
DEFAULT_C = 5
METRICS = ("euclidean", "cosine")


class QueryIndex(object):
    """
    Immutable table of (task_id, feature) rows grouped by task.

    Args:
        features (np.ndarray): rows x d float32 features
        task_ids (np.ndarray): rows task ids, non-decreasing, each < K
        K (int): number of tasks
        backbone_fingerprint (str): hex fingerprint of the backbone that
            produced the features, if known
    """

    def __init__(self, features, task_ids, K, backbone_fingerprint=None):
        features = np.array(features, dtype=np.float32)
        task_ids = np.array(task_ids, dtype=np.int64).reshape(-1)
        if features.ndim != 2:
            raise DimensionMismatchError("features must be rows x d, got shape {}".format(features.shape))
        if features.shape[0] != task_ids.size:
            raise DimensionMismatchError(
                "{} feature rows but {} task ids".format(features.shape[0], task_ids.size)
            )
        if K < 1:
            raise EmptyInputError("query index needs at least one task")
        if task_ids.size and (task_ids.min() < 0 or task_ids.max() >= K):
            raise UserError("task ids must lie in [0, {})".format(K))
        if np.any(np.diff(task_ids) < 0):
            raise UserError("query rows must be grouped by task in ascending order")
        self.features = np.ascontiguousarray(features)
        self.features.setflags(write=False)
        self.task_ids = task_ids
        self.task_ids.setflags(write=False)
        self.K = int(K)
        self.backbone_fingerprint = backbone_fingerprint
        # widened once, reused by every query
        self._features64 = self.features.astype(np.float64)

    @property
    def rows(self):
        return int(self.features.shape[0])

    @property
    def dim(self):
        return int(self.features.shape[1])

    @property
    def per_task(self):
        """
        Number of rows stored for each task.
        """
        return np.bincount(self.task_ids, minlength=self.K)

    def meta(self):
        return {
            "K": self.K,
            "d": self.dim,
            "rows": self.rows,
            "N": [int(n) for n in self.per_task],
            "backbone_fingerprint": self.backbone_fingerprint,
        }

    def distances(self, feature, metric="euclidean"):
        """
        Distance of @feature to every row, in float64.
        """
        q = np.asarray(feature, dtype=np.float32).reshape(-1)
        if q.size != self.dim:
            raise DimensionMismatchError(
                "query feature has length {}, index stores d={}".format(q.size, self.dim)
            )
        q = q.astype(np.float64)
        if metric == "euclidean":
            diff = self._features64 - q
            return np.einsum("ij,ij->i", diff, diff)
        if metric == "cosine":
            norms = np.sqrt(np.einsum("ij,ij->i", self._features64, self._features64))
            qnorm = math.sqrt(float(np.dot(q, q)))
            dots = self._features64 @ q
            denom = norms * qnorm
            cos = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
            return 1.0 - cos
        raise UserError("unknown metric {!r}; expected one of {}".format(metric, METRICS))


@dataclass(frozen=True)
class RouteWeights:
    """
    Per-task weights w_i = counts[i] / C.
    """

    counts: tuple
    C: int

    def __post_init__(self):
        assert sum(self.counts) == self.C, "counts {} do not sum to C={}".format(self.counts, self.C)
        assert all(c >= 0 for c in self.counts), "negative neighbour count"

    @property
    def K(self):
        return len(self.counts)

    @property
    def w(self):
        return np.asarray(self.counts, dtype=np.float64) / float(self.C)

    def argmax(self):
        # np.argmax returns the first maximum, i.e. the lower task index
        return int(np.argmax(np.asarray(self.counts)))

    def __len__(self):
        return len(self.counts)


def build_query_index(feature_fn, examples, n_per_task=DEFAULT_N, backbone_fingerprint=None):
    """
    Extract features for the first @n_per_task examples of each task.

    Args:
        feature_fn (callable): maps an (m, d_in) float32 array to (m, d) features;
            must be deterministic
        examples (list of np.ndarray): unlabeled inputs of each task, in task order
        n_per_task (int): examples retained per task (all of them if fewer exist)
        backbone_fingerprint (str): recorded in the index meta

    Returns:
        index (QueryIndex)
    """
    if len(examples) == 0:
        raise EmptyInputError("no tasks given to build the query index")
    if n_per_task < 1:
        raise UserError("need at least one example per task, got N={}".format(n_per_task))
    blocks, ids = [], []
    dim = None
    for task_id, inputs in enumerate(examples):
        inputs = np.asarray(inputs, dtype=np.float32)
        if inputs.ndim != 2 or inputs.shape[0] == 0:
            raise EmptyInputError("task {} has no examples".format(task_id))
        feats = np.asarray(feature_fn(inputs[:n_per_task]), dtype=np.float32)
        if feats.ndim != 2 or feats.shape[0] != min(n_per_task, inputs.shape[0]):
            raise DimensionMismatchError(
                "feature_fn returned shape {} for task {}".format(feats.shape, task_id)
            )
        if dim is None:
            dim = feats.shape[1]
        elif feats.shape[1] != dim:
            raise DimensionMismatchError(
                "task {} features have d={}, earlier tasks d={}".format(task_id, feats.shape[1], dim)
            )
        blocks.append(feats)
        ids.append(np.full(feats.shape[0], task_id, dtype=np.int64))
    return QueryIndex(
        np.concatenate(blocks, axis=0),
        np.concatenate(ids),
        K=len(examples),
        backbone_fingerprint=backbone_fingerprint,
    )


def knn_weights(index, feature, C=DEFAULT_C, metric="euclidean"):
    """
    Count the task ids among the @C rows closest to @feature. Equal distances
    are ordered by row index.
    """
    if index.rows == 0:
        raise EmptyInputError("query index is empty")
    C = int(C)
    if C < 1 or C > index.rows:
        raise UserError("C must lie in [1, {}], got {}".format(index.rows, C))
    dist = index.distances(feature, metric=metric)
    nearest = np.argsort(dist, kind="stable")[:C]
    counts = np.bincount(index.task_ids[nearest], minlength=index.K)
    return RouteWeights(counts=tuple(int(c) for c in counts), C=C)


def route(index, features, C=DEFAULT_C, metric="euclidean"):
    """
    knn_weights for every row of a feature batch.
    """
    features = np.asarray(features, dtype=np.float32)
    if features.ndim == 1:
        features = features[None]
    return [knn_weights(index, f, C, metric=metric) for f in features]


class SwitchCache(object):
    """
    Merged weights keyed by the neighbour count tuple. Values are deterministic
    functions of the key, so concurrent inserts of the same key are harmless.
    """

    def __init__(self):
        self._store = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __len__(self):
        return len(self._store)

    def __contains__(self, key):
        return tuple(key) in self._store

    def get_or_compute(self, key, compute_fn):
        key = tuple(key)
        with self._lock:
            if key in self._store:
                self.hits += 1
                return self._store[key]
            self.misses += 1
        value = compute_fn()
        with self._lock:
            self._store[key] = value
        return value

    def stats(self):
        return {"distinct": len(self._store), "hits": self.hits, "misses": self.misses}


def route_and_apply(base, packs, index, features, C=DEFAULT_C, metric="euclidean", cache=None):
    """
    Route every input and apply the weighted switches.

    Args:
        base (NamedTensorSet): pre-trained weights
        packs (list of TaskSwitchPack): one switch per task, in task order
        index (QueryIndex): query set with K == len(packs)
        features (np.ndarray): batch x d backbone features of the inputs
        C (int): number of neighbours
        metric (str): euclidean or cosine
        cache (SwitchCache): optional cache shared across calls

    Returns:
        merged (list of NamedTensorSet): one set per input; inputs with equal
            neighbour counts share the same object
        weights (list of RouteWeights)
    """
    if len(packs) != index.K:
        raise UserError("index has K={} tasks but {} switches were given".format(index.K, len(packs)))
    cache = SwitchCache() if cache is None else cache
    weights = route(index, features, C, metric=metric)
    vectors = None
    merged = []
    for w in weights:
        if w.counts not in cache and vectors is None:
            vectors = [signed_switch_vector(p) for p in packs]
        merged.append(cache.get_or_compute(w.counts, lambda w=w: apply_auto(base, packs, w, vectors=vectors)))
    return merged, weights


# .tqi codec


def encode_tqi_bytes(index):
    parts = [TQI_MAGIC, struct.pack("<III", index.K, index.dim, index.rows)]
    feats = index.features.astype("<f4", copy=False)
    for i in range(index.rows):
        parts.append(struct.pack("<I", int(index.task_ids[i])))
        parts.append(feats[i].tobytes())
    return b"".join(parts)


def decode_tqi_bytes(payload):
    if bytes(payload[:4]) != TQI_MAGIC:
        raise MagicMismatchError(
            "not a TQI file (magic {!r})".format(bytes(payload[:4])), code="TQI_MAGIC"
        )
    reader = ByteReader(payload, code="TQI_TRUNCATED")
    reader.take(4)
    K, d, rows = reader.unpack("<III")
    if d == 0 or K == 0:
        raise DataError("query index header has K={} d={}".format(K, d), code="TQI_HEADER")
    record = np.dtype([("task_id", "<u4"), ("feature", "<f4", (d,))])
    table = np.frombuffer(reader.take(record.itemsize * rows), dtype=record)
    reader.expect_end("TQI file")
    task_ids = table["task_id"].astype(np.int64)
    features = table["feature"].astype(np.float32).reshape(rows, d)
    if rows and task_ids.max() >= K:
        raise DataError("query row has task id {} >= K={}".format(int(task_ids.max()), K), code="TQI_TASK")
    if np.any(np.diff(task_ids) < 0):
        raise DataError("query rows are not grouped by task", code="TQI_ORDER")
    if not np.isfinite(features).all():
        raise NonFiniteError("query index contains NaN or Inf features", code="TQI_NONFINITE")
    return QueryIndex(features, task_ids, K=K)


def save_tqi(index, path):
    write_bytes_atomic(path, encode_tqi_bytes(index))


def load_tqi(path):
    return decode_tqi_bytes(read_bytes(path))
