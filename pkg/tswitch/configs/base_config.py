"""
The base config class shared by all bench configs. Subclasses register
themselves into a global dictionary under their BENCH_NAME, so the right
config can be instantiated from the "bench_name" field of a JSON file.
"""

from copy import deepcopy

from tswitch.configs.config import Config
from tswitch.utils.errors import UserError

# global dictionary for remembering name - class mappings
REGISTERED_CONFIGS = {}


def get_all_registered_configs():
    return deepcopy(REGISTERED_CONFIGS)


def config_factory(bench_name, dic=None):
    """
    Creates an instance of a config from the bench name. Optionally pass
    a dictionary to instantiate the config from the dictionary.
    """
    if bench_name not in REGISTERED_CONFIGS:
        raise UserError(
            "Config for bench name {} not found. Make sure it is a registered config among: {}".format(
                bench_name, ", ".join(REGISTERED_CONFIGS)
            )
        )
    return REGISTERED_CONFIGS[bench_name](dict_to_load=dic)


class ConfigMeta(type):
    """
    Registers every config class except BaseConfig into the global registry.
    """

    def __new__(meta, name, bases, class_dict):
        cls = super(ConfigMeta, meta).__new__(meta, name, bases, class_dict)
        if cls.__name__ != "BaseConfig":
            REGISTERED_CONFIGS[cls.BENCH_NAME] = cls
        return cls


class BaseConfig(Config, metaclass=ConfigMeta):
    BENCH_NAME = None

    def __init__(self, dict_to_load=None):
        if dict_to_load is not None:
            super(BaseConfig, self).__init__(dict_to_load)
            return

        super(BaseConfig, self).__init__()
        self.bench_name = type(self).BENCH_NAME

        self.experiment_config()
        self.suite_config()
        self.model_config()
        self.train_config()
        self.bench_config()

        # after init, JSON overrides may change values but never add keys
        self.lock_keys()

    def experiment_config(self):
        """
        Run-level settings: experiment name, the root seeds (one full suite
        generation and training per seed) and logging.
        """
        self.experiment.name = "tswitch"
        self.experiment.description = "default"
        self.experiment.seeds = [0, 1, 2, 3, 4]
        self.experiment.logging.terminal_output_to_txt = True  # tee stdout next to the report
        self.experiment.logging.plot = True  # save an accuracy-vs-alpha figure

    def suite_config(self):
        """
        Synthetic task suite. Every task is a Gaussian-cluster classification
        problem around its own center on a sphere of radius task_radius.
        Counts are per task.
        """
        self.suite.K = 8
        self.suite.classes = 10
        self.suite.d_in = 32
        self.suite.n_train = 200
        self.suite.n_test = 200
        self.suite.n_pretrain = 100  # mixture samples drawn from each task for the pre-trained model
        self.suite.n_query = 100  # unlabeled held-out inputs per task, pool for the query index
        self.suite.task_radius = 8.0
        self.suite.class_radius = 2.0
        self.suite.spread = 0.25

    def model_config(self):
        self.model.hidden = [64]

    def train_config(self):
        """
        SGD hyperparameters for the pre-trained model (on the relabelled
        mixture) and for each per-task fine-tune started from it.
        """
        self.train.pretrain.lr = 0.05
        self.train.pretrain.epochs = 20
        self.train.pretrain.batch_size = 64
        self.train.pretrain.momentum = 0.9

        self.train.finetune.lr = 0.02
        self.train.finetune.epochs = 40
        self.train.finetune.batch_size = 32
        self.train.finetune.momentum = 0.9

    def bench_config(self):
        """
        Populated by subclasses.
        """
        self.bench.scope = "global"
