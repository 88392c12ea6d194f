import numpy as np
import pandas as pd

from qlvm.management.commands._base import QLVMCommand, add_split_argument, select_dataset
from qlvm.services.experiment import check_dimensions, lattice_decoder
from qlvm.services.export import write_csv
from qlvm.services.lattice import generate_points
from qlvm.services.qlvm_service import embed_dataset, reconstruct


class Command(QLVMCommand):
    help = '在评估格点上计算每个数据点后验的环面均值与众数，并解码众数得到重构'
    checkpoint_option = 'checkpoint'

    def add_command_arguments(self, parser):
        add_split_argument(parser)
        parser.add_argument('--n-recon', type=int, default=8, dest='n_recon', help='重构对比图中的样本数')

    def run(self, config, options):
        dataset = select_dataset(config, options['split'])
        check_dimensions(self.checkpoint, dataset)
        eval_points = generate_points(config.eval_rule(), 'qmc')
        net = lattice_decoder(self.checkpoint)

        with self.output_directory(config) as directory:
            embedding = embed_dataset(net, dataset, eval_points)
            d = embedding.mean.shape[1]
            columns = {'index': np.arange(dataset.n)}
            if dataset.labels is not None:
                columns['label'] = dataset.labels
            columns.update({f'mean_{k}': embedding.mean[:, k] for k in range(d)})
            columns['mode_index'] = embedding.mode_index
            columns.update({f'mode_{k}': embedding.mode[:, k] for k in range(d)})
            columns['resultant_min'] = embedding.concentration
            write_csv(pd.DataFrame(columns), directory / 'embedding.csv')

            shown = min(options['n_recon'], dataset.n)
            if shown > 0:
                recon = reconstruct(net, embedding.subset(slice(0, shown)), 'mode')
                images = np.concatenate([dataset.X[:shown], recon])
                self.write_images(directory / 'reconstructions.pgm', images, dataset, columns=shown)
        self.report(f"嵌入完成: {dataset.n} 个数据点, 评估格点 m={eval_points.m}")
