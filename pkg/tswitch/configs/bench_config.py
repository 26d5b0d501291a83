"""
Configs for the two bench runners.
"""

from tswitch.configs.base_config import BaseConfig


class ControlledBenchConfig(BaseConfig):
    BENCH_NAME = "controlled"

    def experiment_config(self):
        super(ControlledBenchConfig, self).experiment_config()
        self.experiment.name = "controlled"
        self.experiment.description = "alpha_sweep"

    def bench_config(self):
        """
        Discard ratio grid swept by the controlled experiment. Every ratio is
        applied to every task vector with each of the discard procedures.
        """
        super(ControlledBenchConfig, self).bench_config()
        self.bench.alphas = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
        self.bench.merge_alphas = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]  # ratios at which discarded sets are also direct-merged


class MergeBenchConfig(BaseConfig):
    BENCH_NAME = "merge"

    def experiment_config(self):
        super(MergeBenchConfig, self).experiment_config()
        self.experiment.name = "merge"
        self.experiment.description = "auto_switch"
        self.experiment.logging.plot = False

    def bench_config(self):
        super(MergeBenchConfig, self).bench_config()
        self.bench.alpha = 0.5
        self.bench.arith_coef = 0.3
        self.bench.N = 100  # query examples per task
        self.bench.C = 5  # neighbours per routed input
        self.bench.metric = "euclidean"
        self.bench.N_grid = [10, 50, 100]  # Auto-Switch ablation, empty to skip
        self.bench.C_grid = [1, 5, 10, 25, 50]
