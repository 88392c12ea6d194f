from qlvm.management.commands._base import QLVMCommand, add_split_argument, select_dataset
from qlvm.services.experiment import aggregate_density, check_dimensions
from qlvm.services.export import DEFAULT_RESOLUTION, point_frame, write_csv, write_field_pgm


class Command(QLVMCommand):
    help = '计算数据集在评估格点上的聚合后验密度'
    checkpoint_option = 'checkpoint'

    def add_command_arguments(self, parser):
        add_split_argument(parser)
        parser.add_argument('--resolution', type=int, default=DEFAULT_RESOLUTION, help='PGM 栅格边长')

    def run(self, config, options):
        dataset = select_dataset(config, options['split'])
        check_dimensions(self.checkpoint, dataset)
        config.eval_rule()

        with self.output_directory(config) as directory:
            field = aggregate_density(self.checkpoint, config, dataset)
            points = field.points.points
            write_csv(point_frame(points, weight=field.weights), directory / 'density.csv')
            write_field_pgm(directory / 'density.pgm', points, field.weights, options['resolution'])
        self.report(f"聚合密度完成: m={field.m}")
