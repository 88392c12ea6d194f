from qlvm.exceptions import ConfigError
from qlvm.management.commands._base import QLVMCommand
from qlvm.services.analysis import jacobian_frobenius
from qlvm.services.experiment import lattice_decoder
from qlvm.services.export import DEFAULT_RESOLUTION, point_frame, write_csv, write_field_pgm
from qlvm.services.lattice import generate_points


class Command(QLVMCommand):
    help = '评估格点上解码器 Jacobian 的 Frobenius 范数（原始与平滑两份）'
    checkpoint_option = 'checkpoint'

    def add_command_arguments(self, parser):
        parser.add_argument('--step', type=float, default=1e-4, help='中心差分步长')
        parser.add_argument('--smoothing', type=float, default=0.02, help='平滑核带宽（隐空间单位）')
        parser.add_argument('--resolution', type=int, default=DEFAULT_RESOLUTION, help='PGM 栅格边长')

    def run(self, config, options):
        if not 0.0 < options['step'] <= 0.01:
            raise ConfigError(f"finite-difference step must lie in (0, 0.01], got {options['step']}")
        if not options['smoothing'] > 0:
            raise ConfigError(f"smoothing bandwidth must be positive, got {options['smoothing']}")
        eval_points = generate_points(config.eval_rule(), 'qmc')
        net = lattice_decoder(self.checkpoint)

        with self.output_directory(config) as directory:
            field = jacobian_frobenius(net, eval_points, options['step']).smooth(options['smoothing'])
            write_csv(point_frame(field.points, norm=field.norms), directory / 'jacobian.csv')
            write_csv(point_frame(field.points, smoothed=field.smoothed), directory / 'jacobian_smoothed.csv')
            write_field_pgm(directory / 'jacobian.pgm', field.points, field.norms, options['resolution'])
            write_field_pgm(directory / 'jacobian_smoothed.pgm', field.points, field.smoothed, options['resolution'])
        self.report(f"Jacobian 场完成: m={eval_points.m}, 平滑带宽 {field.bandwidth}")
