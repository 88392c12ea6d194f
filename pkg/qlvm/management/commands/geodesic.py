import numpy as np
import pandas as pd

from qlvm.exceptions import ConfigError
from qlvm.management.commands._base import QLVMCommand, add_split_argument, parse_vector, select_dataset
from qlvm.services.analysis import geodesic
from qlvm.services.experiment import aggregate_density, check_dimensions, lattice_decoder
from qlvm.services.export import write_csv


def parse_endpoint(text: str):
    """整数为格点下标，逗号分隔的坐标吸附到最近格点"""
    text = text.strip()
    if ',' not in text:
        try:
            return int(text)
        except ValueError:
            pass
    return parse_vector(text)


class Command(QLVMCommand):
    help = '在聚合密度的密度比图上求两点间的测地线，并解码路径'
    checkpoint_option = 'checkpoint'

    def add_command_arguments(self, parser):
        add_split_argument(parser)
        parser.add_argument('--source', required=True, help='起点：格点下标或坐标 x,y')
        parser.add_argument('--destination', required=True, help='终点：格点下标或坐标 x,y')
        parser.add_argument('--epsilon', type=float, default=1e-12, help='密度下限')

    def run(self, config, options):
        if not options['epsilon'] > 0:
            raise ConfigError(f"epsilon must be positive, got {options['epsilon']}")
        source = parse_endpoint(options['source'])
        destination = parse_endpoint(options['destination'])
        for endpoint in (source, destination):
            if not isinstance(endpoint, int) and len(endpoint) != config['latent_dim']:
                raise ConfigError(f"endpoint {endpoint} does not have {config['latent_dim']} coordinates")
        dataset = select_dataset(config, options['split'])
        check_dimensions(self.checkpoint, dataset)
        config.eval_rule()

        with self.output_directory(config) as directory:
            field = aggregate_density(self.checkpoint, config, dataset)
            path = geodesic(field, source, destination, options['epsilon'])
            frame = pd.DataFrame({'step': np.arange(path.n_points), 'index': path.indices})
            for k in range(path.points.shape[1]):
                frame[f'z_{k}'] = path.points[:, k]
            frame['edge_cost'] = np.concatenate([[0.0], path.edge_costs])
            frame['cumulative_cost'] = np.cumsum(frame['edge_cost'].to_numpy())
            write_csv(frame, directory / 'geodesic.csv')

            decoded = lattice_decoder(self.checkpoint).predict_mean(path.points)
            self.write_images(directory / 'geodesic.pgm', decoded, dataset)
        self.report(f"测地线完成: {path.n_points} 个点, 代价 {path.cost:.6g}")
