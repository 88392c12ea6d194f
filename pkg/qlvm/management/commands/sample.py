import pandas as pd

from qlvm.exceptions import ConfigError
from qlvm.management.commands._base import QLVMCommand
from qlvm.services.experiment import check_dimensions, lattice_decoder
from qlvm.services.export import write_csv
from qlvm.services.qlvm_service import sample_prior


class Command(QLVMCommand):
    help = '从先验采样隐变量并解码（bernoulli 输出概率，gaussian 输出均值）'
    checkpoint_option = 'checkpoint'

    def add_command_arguments(self, parser):
        parser.add_argument('--n', type=int, default=16, help='样本数')

    def run(self, config, options):
        if options['n'] < 0:
            raise ConfigError(f"sample count must be >= 0, got {options['n']}")
        seed = config['seed'] if config['seed'] is not None else 0
        dataset = config.load_dataset()
        check_dimensions(self.checkpoint, dataset)

        with self.output_directory(config) as directory:
            samples = sample_prior(lattice_decoder(self.checkpoint), options['n'], seed)
            write_csv(pd.DataFrame(samples).add_prefix('x_'), directory / 'samples.csv')
            if options['n']:
                self.write_images(directory / 'samples.pgm', samples, dataset)
        self.report(f"采样完成: {options['n']} 个样本 (seed={seed})")
