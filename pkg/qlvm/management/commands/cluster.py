import numpy as np
import pandas as pd

from qlvm.exceptions import ConfigError
from qlvm.management.commands._base import QLVMCommand, add_split_argument, select_dataset
from qlvm.services.analysis import mean_shift
from qlvm.services.experiment import aggregate_density, check_dimensions, lattice_decoder
from qlvm.services.export import write_csv
from qlvm.services.lattice import fibonacci_numbers, fibonacci_rule, generate_points, korobov_search


class Command(QLVMCommand):
    help = '在聚合密度上做环面 mean-shift 聚类，并解码各簇中心'
    checkpoint_option = 'checkpoint'

    def add_command_arguments(self, parser):
        add_split_argument(parser)
        parser.add_argument('--bandwidth', type=float, default=0.1, help='mean-shift 带宽 h')
        parser.add_argument('--min-relative-density', type=float, default=1e-3, dest='min_relative_density',
                            help='保留簇的最小相对密度')
        parser.add_argument('--seed-fib-index', type=int, dest='seed_fib_index',
                            help='用 Fib(k) 个点的较粗格点作为初始种子（默认用评估格点本身）')

    def run(self, config, options):
        if not options['bandwidth'] > 0:
            raise ConfigError(f"bandwidth must be positive, got {options['bandwidth']}")
        dataset = select_dataset(config, options['split'])
        check_dimensions(self.checkpoint, dataset)
        config.eval_rule()
        seeds = None
        if options.get('seed_fib_index'):
            d = config['latent_dim']
            index = options['seed_fib_index']
            rule = fibonacci_rule(index) if d == 2 else korobov_search(fibonacci_numbers(index)[0], d)
            seeds = generate_points(rule, 'qmc').points

        with self.output_directory(config) as directory:
            field = aggregate_density(self.checkpoint, config, dataset)
            result = mean_shift(field, options['bandwidth'], seeds=seeds,
                                min_relative_density=options['min_relative_density'])
            d = result.centroids.shape[1]
            frame = pd.DataFrame({'cluster': np.arange(result.n_clusters)})
            for k in range(d):
                frame[f'z_{k}'] = result.centroids[:, k]
            frame['density'] = result.densities
            frame['n_seeds'] = [int(np.sum(result.assignments == c)) for c in range(result.n_clusters)]
            write_csv(frame, directory / 'clusters.csv')

            if result.n_clusters:
                decoded = lattice_decoder(self.checkpoint).predict_mean(result.centroids)
                self.write_images(directory / 'centroids.pgm', decoded, dataset)
        self.report(f"聚类完成: {result.n_clusters} 个簇 (h={result.bandwidth})")
