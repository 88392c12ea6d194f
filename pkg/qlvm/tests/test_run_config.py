import tempfile
from pathlib import Path

from django.test import SimpleTestCase, override_settings
from django.conf import settings

from qlvm.exceptions import ConfigError, LatticeError
from qlvm.services.run_config import CONFIG_SCHEMA, RunConfig, parse_overrides


class RunConfigLayeringTest(SimpleTestCase):
    """配置分层合并"""

    def test_defaults_cover_schema(self):
        self.assertEqual(set(settings.QLVM_DEFAULTS), set(CONFIG_SCHEMA))
        config = RunConfig.from_sources()
        self.assertIsNone(config['seed'])
        self.assertEqual(config['hidden'], (64, 64))
        self.assertEqual(config.lattice_rule().m, 233)

    def test_layer_order(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'run.conf'
            path.write_text('# 实验配置\nepochs=7\nlr=0.01\nseed=3\n', encoding='utf-8')
            config = RunConfig.from_sources(str(path), ['lr=0.05'], seed=11,
                                            base={'epochs': '5', 'batch_size': '8', 'seed': '99'})
        self.assertEqual(config['batch_size'], 8)
        self.assertEqual(config['epochs'], 7)
        self.assertEqual(config['lr'], 0.05)
        self.assertEqual(config['seed'], 11)

    def test_checkpoint_seed_not_inherited(self):
        config = RunConfig.from_sources(base={'seed': '99', 'output_dir': '/elsewhere'})
        self.assertIsNone(config['seed'])
        self.assertEqual(config['output_dir'], '')
        with self.assertRaises(ConfigError):
            config.require_seed()

    def test_unknown_key(self):
        with self.assertRaises(ConfigError):
            RunConfig.from_sources(overrides=['learning_rate=0.1'])
        with self.assertRaises(ConfigError):
            RunConfig.from_sources(base={'bogus': '1'})

    def test_invalid_values(self):
        with self.assertRaises(ConfigError):
            RunConfig.from_sources(overrides=['epochs=many'])
        with self.assertRaises(ConfigError):
            RunConfig.from_sources(overrides=['model=flow'])
        with self.assertRaises(ConfigError):
            RunConfig.from_sources(overrides=['image_shape=3x4x5'])
        with self.assertRaises(ConfigError):
            parse_overrides(['epochs'])

    def test_missing_config_file(self):
        with self.assertRaises(ConfigError):
            RunConfig.from_sources('/nonexistent/run.conf')

    def test_resolved_text_is_sorted(self):
        text = RunConfig.from_sources(seed=1).resolved_text()
        keys = [line.split('=', 1)[0] for line in text.splitlines()]
        self.assertEqual(keys, sorted(CONFIG_SCHEMA))
        self.assertIn('seed=1', text.splitlines())

    @override_settings(QLVM_DEFAULTS={**settings.QLVM_DEFAULTS, 'epochs': '3'})
    def test_defaults_from_settings(self):
        self.assertEqual(RunConfig.from_sources()['epochs'], 3)


class LatticeSelectionTest(SimpleTestCase):
    """格点规则选择"""

    def test_fibonacci_needs_two_dimensions(self):
        config = RunConfig.from_sources(overrides=['latent_dim=3'])
        with self.assertRaises(LatticeError):
            config.lattice_rule()

    def test_korobov_search_and_fixed_base(self):
        searched = RunConfig.from_sources(overrides=['latent_dim=3', 'lattice=korobov', 'lattice_m=101'])
        self.assertEqual(searched.lattice_rule().m, 101)
        self.assertEqual(searched.lattice_rule().d, 3)
        fixed = searched.replace(korobov_a=12)
        self.assertEqual(fixed.lattice_rule().generator, (1, 12, 43))

    def test_eval_rule(self):
        self.assertEqual(RunConfig.from_sources().eval_rule().m, 6765)
        three = RunConfig.from_sources(overrides=['latent_dim=3', 'eval_fib_index=8'])
        self.assertEqual(three.eval_rule().m, 21)
        self.assertEqual(three.eval_rule().d, 3)

    def test_with_sample_count(self):
        config = RunConfig.from_sources()
        self.assertEqual(config.with_sample_count(144).lattice_rule().m, 144)
        self.assertEqual(config.with_sample_count(144)['lattice'], 'fibonacci')
        other = config.with_sample_count(100)
        self.assertEqual((other['lattice'], other.lattice_rule().m), ('korobov', 100))
        iwae = RunConfig.from_sources(overrides=['model=iwae']).with_sample_count(5)
        self.assertEqual(iwae['samples'], 5)

    def test_train_and_baseline_configs(self):
        config = RunConfig.from_sources(overrides=['hidden=32,16', 'model=iwae'], seed=4)
        self.assertEqual(config.train_config().hidden, (32, 16))
        baseline = config.baseline_config()
        self.assertEqual((baseline.kind, baseline.samples, baseline.seed), ('iwae', 10, 4))
        with self.assertRaises(ConfigError):
            RunConfig.from_sources().train_config()

    def test_per_coordinate_prior(self):
        config = RunConfig.from_sources(overrides=['prior=gaussian', 'prior_loc=0,1', 'prior_scale=2'], seed=1)
        self.assertEqual(config['prior_loc'], (0.0, 1.0))
        self.assertEqual(config['prior_scale'], (2.0,))
        train_config = config.train_config()
        self.assertEqual(train_config.prior_loc, (0.0, 1.0))
        with self.assertRaises(ConfigError):
            RunConfig.from_sources(overrides=['prior_loc=0,1,2'], seed=1).train_config()
        with self.assertRaises(ConfigError):
            RunConfig.from_sources(overrides=['prior_scale=1,wide'])


class DatasetSelectionTest(SimpleTestCase):
    """数据来源"""

    def test_synthetic_dataset_and_split(self):
        config = RunConfig.from_sources(overrides=['synth_n=50', 'synth_side=8', 'synth_clusters=2'])
        dataset = config.load_dataset()
        self.assertEqual((dataset.n, dataset.dim), (50, 64))
        train_set, test_set = config.split_dataset(dataset)
        self.assertEqual((train_set.n, test_set.n), (40, 10))

    def test_missing_paths(self):
        with self.assertRaises(ConfigError):
            RunConfig.from_sources(overrides=['dataset=idx']).load_dataset()
        with self.assertRaises(ConfigError):
            RunConfig.from_sources(overrides=['dataset=matrix']).load_dataset()
