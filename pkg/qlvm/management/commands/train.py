import logging
from pathlib import Path

import pandas as pd

from qlvm.exceptions import ConfigError
from qlvm.management.commands._base import QLVMCommand
from qlvm.models import TrainingRun
from qlvm.services.data_service import save_checkpoint
from qlvm.services.experiment import check_dimensions, fit, held_out_bound, samples_per_datum
from qlvm.services.export import write_csv

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = 'model.ckpt'


class Command(QLVMCommand):
    help = '训练 QLVM / VAE / IWAE 模型，写出检查点、逐 epoch 目标值和测试集界'
    checkpoint_option = 'resume'
    checkpoint_required = False
    requires_seed = True

    def run(self, config, options):
        # 先完成全部校验，出错时不产生任何输出
        samples = samples_per_datum(config)
        train_set, test_set = config.split_dataset()
        if self.checkpoint is not None:
            check_dimensions(self.checkpoint, train_set)
            target = Path(config['output_dir']) / CHECKPOINT_NAME
            if config['output_dir'] and Path(options['resume']).resolve() == target.resolve():
                raise ConfigError(f"refusing to overwrite the checkpoint being resumed: {options['resume']}")

        with self.output_directory(config) as directory:
            self.stdout.write(f"训练 {config['model']}: n={train_set.n}, D={train_set.dim}, m={samples}")
            outcome = fit(config, train_set, resume=self.checkpoint)
            checkpoint_path = directory / CHECKPOINT_NAME
            save_checkpoint(checkpoint_path, outcome.checkpoint(config))
            write_csv(outcome.trace, directory / 'loss.csv')

            bound = held_out_bound(outcome, config, test_set)
            write_csv(pd.DataFrame([vars(bound)]), directory / 'bound.csv')

            final_objective = float(outcome.trace['objective'].iloc[-1]) if len(outcome.trace) else float('nan')
            TrainingRun.record(
                kind=outcome.kind, seed=config['seed'], latent_dim=config['latent_dim'], samples=samples,
                epochs=outcome.epoch, final_objective=final_objective, held_out_bound=bound.mean,
                seconds_per_epoch=outcome.seconds_per_epoch, checkpoint_path=str(checkpoint_path),
            )
        self.report(f"训练完成: epoch {outcome.epoch}, 测试集 {bound.estimator} 界 {bound.mean:.4f}")
