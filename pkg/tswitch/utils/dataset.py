"""
Synthetic multi-task suite. Each task is a Gaussian-cluster classification
problem living around its own center on a sphere; a pre-training mixture is
drawn from all tasks with per-task relabelled classes, so the pre-trained
model sees the input geometry of every task but none of the label maps.

Every random draw flows from one root seed through numpy SeedSequence spawn keys.
"""

from dataclasses import dataclass, field

import numpy as np

from tswitch.utils.errors import DataError, UserError
from tswitch.utils.tensorstore import NamedTensorSet

# spawn keys below the root seed
STREAM_SUITE = 0
STREAM_INIT = 1
STREAM_PRETRAIN = 2
STREAM_FINETUNE = 3
STREAM_DARE = 4


def derive_seed(root_seed, *path):
    """
    Deterministic 32-bit seed for the stream at @path under @root_seed.
    """
    ss = np.random.SeedSequence(int(root_seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def derive_rng(root_seed, *path):
    return np.random.default_rng(np.random.SeedSequence(int(root_seed), spawn_key=tuple(int(p) for p in path)))


@dataclass
class Split:
    """
    Inputs and integer labels of one data split. Unlabeled splits carry y=None.
    """

    x: np.ndarray
    y: np.ndarray = None

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float32)
        if self.x.ndim != 2:
            raise UserError("split inputs must be 2D, got shape {}".format(self.x.shape))
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
            if self.y.size != self.x.shape[0]:
                raise UserError("{} inputs but {} labels".format(self.x.shape[0], self.y.size))

    def __len__(self):
        return int(self.x.shape[0])

    def to_tensor_set(self, meta=None):
        entries = [("x", self.x)]
        if self.y is not None:
            # class labels are small integers, exact in float32
            entries.append(("y", self.y.astype(np.float32)))
        return NamedTensorSet(entries, meta=meta)

    @classmethod
    def from_tensor_set(cls, tensor_set):
        if "x" not in tensor_set:
            raise DataError("data file has no 'x' tensor (found {})".format(tensor_set.names), code="DATA_LAYOUT")
        x = np.array(tensor_set["x"])
        if x.ndim == 1:
            x = x[None]
        y = None
        if "y" in tensor_set:
            y_raw = np.array(tensor_set["y"]).reshape(-1)
            if not np.array_equal(y_raw, np.round(y_raw)) or (y_raw < 0).any():
                raise DataError("labels must be nonnegative integers", code="DATA_LAYOUT")
            y = y_raw.astype(np.int64)
        return cls(x=x, y=y)


@dataclass
class TaskData:
    task_id: int
    center: np.ndarray
    means: np.ndarray
    train: Split
    test: Split
    query: Split


@dataclass
class TaskSuite:
    tasks: list
    pretrain: Split
    classes: int
    d_in: int
    seed: int
    generator: dict = field(default_factory=dict)

    @property
    def K(self):
        return len(self.tasks)


def _unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample(rng, means, n, spread):
    y = rng.integers(0, means.shape[0], size=n)
    x = means[y] + spread * rng.standard_normal((n, means.shape[1]))
    return Split(x=x.astype(np.float32), y=y)


def _check_suite_config(cfg):
    if int(cfg.K) < 2 or int(cfg.classes) < 2 or int(cfg.d_in) < 2:
        raise UserError(
            "suite needs K >= 2, classes >= 2 and d_in >= 2 (got K={}, classes={}, d_in={})".format(
                cfg.K, cfg.classes, cfg.d_in
            )
        )
    for key in ("n_train", "n_test", "n_query"):
        if int(cfg[key]) < 1:
            raise UserError("suite.{} must be positive, got {}".format(key, cfg[key]))
    if int(cfg.n_pretrain) < 0:
        raise UserError("suite.n_pretrain must be nonnegative")
    for key in ("task_radius", "class_radius", "spread"):
        if not float(cfg[key]) >= 0.0:
            raise UserError("suite.{} must be nonnegative, got {}".format(key, cfg[key]))


def gen_suite(config, seed):
    """
    Generate the task suite.

    Args:
        config (Config): bench config (reads the `suite` section)
        seed (int): root seed

    Returns:
        suite (TaskSuite)
    """
    cfg = config.suite
    _check_suite_config(cfg)
    K, classes, d_in = int(cfg.K), int(cfg.classes), int(cfg.d_in)

    tasks = []
    mix_x, mix_y = [], []
    relabel_rng = derive_rng(seed, STREAM_SUITE, K)
    for i in range(K):
        rng = derive_rng(seed, STREAM_SUITE, i)
        center = float(cfg.task_radius) * _unit_rows(rng, 1, d_in)[0]
        means = center + float(cfg.class_radius) * _unit_rows(rng, classes, d_in)
        train = _sample(rng, means, int(cfg.n_train), float(cfg.spread))
        test = _sample(rng, means, int(cfg.n_test), float(cfg.spread))
        query = Split(x=_sample(rng, means, int(cfg.n_query), float(cfg.spread)).x)
        tasks.append(TaskData(task_id=i, center=center, means=means, train=train, test=test, query=query))

        if int(cfg.n_pretrain) > 0:
            mix = _sample(rng, means, int(cfg.n_pretrain), float(cfg.spread))
            perm = relabel_rng.permutation(classes)
            mix_x.append(mix.x)
            mix_y.append(perm[mix.y])

    if mix_x:
        pretrain = Split(x=np.concatenate(mix_x), y=np.concatenate(mix_y))
    else:
        pretrain = Split(x=np.zeros((0, d_in), np.float32), y=np.zeros(0, np.int64))
    return TaskSuite(
        tasks=tasks,
        pretrain=pretrain,
        classes=classes,
        d_in=d_in,
        seed=int(seed),
        generator=cfg.to_dict() if hasattr(cfg, "to_dict") else dict(cfg),
    )
