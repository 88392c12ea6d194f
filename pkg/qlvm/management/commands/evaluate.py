import pandas as pd

from qlvm.exceptions import ConfigError
from qlvm.management.commands._base import QLVMCommand
from qlvm.services.experiment import check_dimensions, evaluate_checkpoint
from qlvm.services.export import write_csv


class Command(QLVMCommand):
    help = '在测试集上评估检查点：QMC 界（基线模型另给出自身的 ELBO / IWAE 界）'
    checkpoint_option = 'checkpoint'

    def add_command_arguments(self, parser):
        parser.add_argument('--n-shifts', type=int, dest='n_shifts', help='随机平移次数（默认取配置 n_shifts）')

    def run(self, config, options):
        n_shifts = options.get('n_shifts') or config['n_shifts']
        if n_shifts < 1:
            raise ConfigError(f"n_shifts must be >= 1, got {n_shifts}")
        _, test_set = config.split_dataset()
        check_dimensions(self.checkpoint, test_set)
        config.eval_rule()

        with self.output_directory(config) as directory:
            rows = evaluate_checkpoint(self.checkpoint, config, test_set, n_shifts)
            write_csv(pd.DataFrame([vars(row) for row in rows]), directory / 'bound.csv')
        for row in rows:
            self.report(f"{row.estimator} (m={row.m}, shifts={row.n_shifts}): {row.mean:.4f} ± {row.std:.4f}")
