import pandas as pd

from qlvm.management.commands._base import QLVMCommand, parse_int_list
from qlvm.models import TrainingRun
from qlvm.services.experiment import fit, held_out_bound, samples_per_datum
from qlvm.services.export import write_csv


class Command(QLVMCommand):
    help = '样本数-代价扫描：对每个 m（qlvm 为格点点数，基线为样本数）训练并记录每 epoch 耗时与测试集界'
    requires_seed = True

    def add_command_arguments(self, parser):
        parser.add_argument('--m-values', dest='m_values', required=True, help='逗号分隔的 m 列表，如 55,233,987')
        parser.add_argument('--seeds', help='逗号分隔的种子列表（默认只用 --seed）')

    def run(self, config, options):
        m_values = parse_int_list(options['m_values'])
        seeds = parse_int_list(options['seeds']) if options.get('seeds') else [config['seed']]
        runs = [config.with_sample_count(m).replace(seed=seed) for m in m_values for seed in seeds]
        samples = [samples_per_datum(run) for run in runs]
        train_set, test_set = config.split_dataset()

        rows = []
        with self.output_directory(config) as directory:
            for run, m in zip(runs, samples):
                self.stdout.write(f"m={m}, seed={run['seed']}")
                outcome = fit(run, train_set)
                bound = held_out_bound(outcome, run, test_set)
                final_objective = float(outcome.trace['objective'].iloc[-1])
                rows.append({
                    'm': m,
                    'seed': run['seed'],
                    # 耗时固定 3 位小数
                    'seconds_per_epoch': f'{outcome.seconds_per_epoch:.3f}',
                    'final_train_objective': final_objective,
                    'test_bound': bound.mean,
                })
                TrainingRun.record(
                    kind=outcome.kind, seed=run['seed'], latent_dim=run['latent_dim'], samples=m,
                    epochs=outcome.epoch, final_objective=final_objective, held_out_bound=bound.mean,
                    seconds_per_epoch=outcome.seconds_per_epoch,
                )
            write_csv(pd.DataFrame(rows), directory / 'sweep.csv')
        self.report(f"扫描完成: {len(rows)} 次训练")
