from tswitch.configs.config import Config
from tswitch.configs.base_config import config_factory, get_all_registered_configs

# note: these imports are needed to register these classes in the global config registry
from tswitch.configs.bench_config import ControlledBenchConfig, MergeBenchConfig
