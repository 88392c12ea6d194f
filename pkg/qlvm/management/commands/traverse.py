import numpy as np
import pandas as pd

from qlvm.exceptions import ConfigError
from qlvm.management.commands._base import QLVMCommand, parse_vector
from qlvm.services.analysis import latent_grid, traversal
from qlvm.services.experiment import check_dimensions, lattice_decoder
from qlvm.services.export import point_frame, write_csv


class Command(QLVMCommand):
    help = '沿直线遍历隐空间并解码；--grid 时在覆盖整个单位格的网格上解码'
    checkpoint_option = 'checkpoint'

    def add_command_arguments(self, parser):
        parser.add_argument('--start', help='起点坐标，默认原点')
        parser.add_argument('--direction', help='方向（一个周期内走完），默认第一个坐标轴')
        parser.add_argument('--steps', type=int, default=16, help='遍历步数')
        parser.add_argument('--grid', type=int, help='网格分辨率 N，解码 N^d 个点')

    def run(self, config, options):
        d = config['latent_dim']
        start = np.array(parse_vector(options['start'])) if options.get('start') else np.zeros(d)
        direction = np.array(parse_vector(options['direction'])) if options.get('direction') else np.eye(d)[0]
        if start.shape != (d,) or direction.shape != (d,):
            raise ConfigError(f"start and direction need {d} coordinates")
        if not np.any(direction):
            raise ConfigError("traversal direction must be nonzero")
        if options['steps'] < 1:
            raise ConfigError(f"steps must be >= 1, got {options['steps']}")
        if options.get('grid') is not None and options['grid'] < 1:
            raise ConfigError(f"grid resolution must be >= 1, got {options['grid']}")
        dataset = config.load_dataset()
        check_dimensions(self.checkpoint, dataset)
        net = lattice_decoder(self.checkpoint)

        with self.output_directory(config) as directory:
            latents, decoded = traversal(net, start, direction, options['steps'])
            frame = point_frame(latents).rename(columns={'index': 'step'})
            write_csv(pd.concat([frame, pd.DataFrame(decoded).add_prefix('x_')], axis=1),
                      directory / 'traversal.csv')
            self.write_images(directory / 'traversal.pgm', decoded, dataset)

            if options.get('grid'):
                resolution = options['grid']
                grid_latents, grid_decoded = latent_grid(net, resolution)
                write_csv(point_frame(grid_latents), directory / 'grid.csv')
                columns = resolution if d > 1 else None
                self.write_images(directory / 'grid.pgm', grid_decoded, dataset, columns=columns)
        self.report(f"遍历完成: {options['steps']} 步")
