import contextlib
import io
import os
import shutil
import tempfile
import unittest
from types import SimpleNamespace
from unittest import mock

import numpy as np
import yaml

from jmflex.cli import build_parser, main
from jmflex.config import parse_config_dict, parse_model_config
from jmflex.data import Archive, Dataset, write_dataset
from jmflex.errors import ConfigurationError, FitFailure, NonConcaveBlock, NumericalError
from jmflex.likelihood import ThetaState
from jmflex.runner import (FitRun, RunManifest, compare_fits, export, load_fit, read_chain_csv, run_fit,
                           run_replicates, run_simulate, summarize_fit, worker_count, write_fit_archive)
from jmflex.simulation import SimSetting
from jmflex.utils import read_json
from tests.fixtures import CONFIG_DIR, tiny_data, tiny_frames

SMALL_CONFIG = {
    'model': {
        'lambda': [{'kind': 'pspline_time', 'n_basis': 6}],
        'gamma': [{'kind': 'intercept'}, {'kind': 'linear_covariate', 'covariate': 'x1'}],
        'mu': [{'kind': 'intercept'}, {'kind': 'pspline_time', 'n_basis': 5}, {'kind': 'random_intercept'}],
        'sigma': [{'kind': 'intercept'}],
        'alpha': {'g1': 'identity', 'g2': 'constant'},
    },
    'quadrature': {'nodes': 7},
    'mode': {'max_outer_iters': 8},
    'mcmc': {'n_iter': 20, 'burnin': 10, 'thin': 1},
}


class TestRunManifest(unittest.TestCase):

    def test_forward_only(self):
        manifest = RunManifest('abc', 1)
        self.assertEqual(manifest.status, 'running')
        self.assertFalse(manifest.is_final)
        manifest.advance('converged')
        self.assertTrue(manifest.is_final)
        self.assertIsNotNone(manifest.finished)
        with self.assertRaises(ValueError):
            manifest.advance('failed')

    def test_restart_status(self):
        manifest = RunManifest('abc', 1)
        with self.assertRaises(ValueError):
            manifest.advance('paused')
        manifest.advance('restarted-2-times')
        self.assertTrue(manifest.is_final)


class TestFitRun(unittest.TestCase):

    def setUp(self):
        self.config = parse_config_dict(dict(SMALL_CONFIG))
        self.data = tiny_data(n=12)

    def test_restart_after_non_concave_block(self):
        mode = SimpleNamespace(restarts=0)
        with mock.patch('jmflex.runner.posterior_mode', side_effect=[NonConcaveBlock('alpha.assoc'), mode]) as fit:
            _, result, chain, _ = FitRun(self.config, self.data, seed=5, mode_only=True).fit()
        self.assertIs(result, mode)
        self.assertEqual(result.restarts, 1)
        self.assertIsNone(chain)
        self.assertIsNone(fit.call_args_list[0][0][2])
        self.assertIsInstance(fit.call_args_list[1][0][2], ThetaState)

    def test_budget_exhausted(self):
        error = NumericalError('non-finite log-posterior', block='mu.intercept')
        with mock.patch('jmflex.runner.posterior_mode', side_effect=error) as fit:
            with self.assertRaises(FitFailure) as ctx:
                FitRun(self.config, self.data, restarts=2, mode_only=True).fit()
        self.assertEqual(fit.call_count, 3)
        self.assertEqual(ctx.exception.restarts, 2)
        self.assertEqual(ctx.exception.block, 'mu.intercept')

    def test_shrink_association_basis(self):
        config = parse_model_config(os.path.join(CONFIG_DIR, 'setting1.yaml'))
        run = FitRun(config, self.data, shrink_alpha=True)
        once = run._shrunk(config)
        self.assertEqual(once.spec.alpha.g1_n_basis, 5)
        self.assertEqual(run._shrunk(once).spec.alpha.g1_n_basis, 5)
        self.assertIs(run._shrunk(self.config), self.config)

    def test_shrunk_config_used_on_restart(self):
        config = parse_model_config(os.path.join(CONFIG_DIR, 'setting1.yaml'))
        mode = SimpleNamespace(restarts=0)
        with mock.patch('jmflex.runner.posterior_mode', side_effect=[NonConcaveBlock('alpha.assoc'), mode]):
            model, _, _, used = FitRun(config, tiny_data(n=20), shrink_alpha=True, mode_only=True).fit()
        self.assertEqual(used.spec.alpha.g1_n_basis, 5)
        self.assertEqual(model.block('alpha.assoc').size, 4)

    def test_negative_restarts(self):
        with self.assertRaises(ConfigurationError):
            FitRun(self.config, self.data, restarts=-1)

    def test_workers(self):
        self.assertEqual(worker_count(4), 4)
        self.assertEqual(worker_count(0), 1)
        with mock.patch.dict(os.environ, {'JMFLEX_WORKERS': '3'}):
            self.assertEqual(worker_count(), 3)


class TestRuns(unittest.TestCase):

    def setUp(self):
        self.tmp_dir = tempfile.mkdtemp()
        self.surv = os.path.join(self.tmp_dir, 'surv.csv')
        self.long = os.path.join(self.tmp_dir, 'long.csv')
        write_dataset(Dataset(*tiny_frames(n=15, seed=7)), self.surv, self.long)
        self.config = os.path.join(self.tmp_dir, 'small.yaml')
        with open(self.config, 'w') as f:
            yaml.safe_dump(SMALL_CONFIG, f)

    def tearDown(self):
        shutil.rmtree(self.tmp_dir)

    def out(self, name):
        return os.path.join(self.tmp_dir, name)

    def test_mode_only(self):
        manifest = run_fit(self.surv, self.long, self.config, self.out('mode'), seed=2, mode_only=True)
        self.assertTrue(manifest.status == 'converged' or manifest.status.startswith('restarted-'))
        files = set(os.listdir(self.out('mode')))
        self.assertTrue({'manifest.json', 'mode_summary.json', 'fit.h5'} <= files)
        self.assertFalse({'chain.csv', 'dic.json', 'summary.json'} & files)
        self.assertFalse(any(name.startswith('.tmp-') for name in files))
        summary = read_json(self.out('mode/mode_summary.json'))
        self.assertEqual(summary['config_hash'], manifest.config_hash)
        self.assertIn('lambda.pspline_time', summary['blocks'])
        self.assertEqual(read_json(self.out('mode/manifest.json'))['status'], manifest.status)
        model, draws, _, attrs = load_fit(self.out('mode'))
        self.assertEqual(attrs['kind'], 'mode')
        self.assertEqual(draws['mu.intercept'].shape, (1000, 1))
        self.assertEqual(model.data.n, 15)
        with self.assertRaises(ConfigurationError):
            compare_fits([self.out('mode')])

    def test_chain_is_reproducible(self):
        first = run_fit(self.surv, self.long, self.config, self.out('a'), seed=3)
        run_fit(self.surv, self.long, self.config, self.out('b'), seed=3)
        self.assertTrue(first.status == 'converged' or first.status.startswith('restarted-'))
        with open(self.out('a/chain.csv'), 'rb') as f:
            chain_a = f.read()
        with open(self.out('b/chain.csv'), 'rb') as f:
            chain_b = f.read()
        self.assertEqual(chain_a, chain_b)
        frame, config_hash = read_chain_csv(self.out('a/chain.csv'))
        self.assertEqual(config_hash, first.config_hash)
        self.assertEqual(set(frame['iteration']), set(range(11, 21)))

        dic_a = read_json(self.out('a/dic.json'))
        self.assertAlmostEqual(dic_a['dic'], dic_a['dbar'] + dic_a['pd'])
        summary = read_json(self.out('a/summary.json'))
        self.assertIn('alpha_slope', summary)
        self.assertLessEqual(summary['alpha_slope']['q0.025'], summary['alpha_slope']['q0.975'])
        self.assertEqual(Archive(self.out('a/fit.h5')).attrs()['kind'], 'chain')

        ranking = compare_fits([self.out('a'), self.out('b')], out=self.out('compare.csv'))
        self.assertEqual(len(ranking), 2)
        self.assertAlmostEqual(ranking['dic'][0], ranking['dic'][1])
        self.assertTrue(os.path.exists(self.out('compare.csv')))

        curve = export(self.out('a'), 'alpha', out=self.out('alpha.csv'))
        self.assertEqual(len(curve), 120)
        with open(self.out('alpha.csv')) as f:
            self.assertTrue(f.readline().startswith('# config_hash='))
        self.assertEqual(len(export(self.out('a'), 'lambda', grid=(0.0, 10.0, 11))), 11)

        table = summarize_fit(self.out('a'))
        self.assertIn('sigma.intercept', set(table['block']))
        self.assertIn('mu.random_intercept:tau2', set(table['block']))

    def test_mcmc_overrides(self):
        manifest = run_fit(self.surv, self.long, self.config, self.out('short'), iterations=12, burnin=8, thin=2)
        frame, _ = read_chain_csv(self.out('short/chain.csv'))
        self.assertEqual(set(frame['iteration']), {10, 12})
        self.assertEqual(manifest.config_hash, read_json(self.out('short/dic.json'))['config_hash'])

    def test_failed_fit_marks_manifest(self):
        with mock.patch('jmflex.runner.posterior_mode', side_effect=NonConcaveBlock('alpha.assoc')):
            with self.assertRaises(FitFailure):
                run_fit(self.surv, self.long, self.config, self.out('bad'), restarts=1, mode_only=True)
        self.assertEqual(read_json(self.out('bad/manifest.json'))['status'], 'failed')
        self.assertFalse(os.path.exists(self.out('bad/fit.h5')))

    def test_unexpected_error_marks_manifest(self):
        with mock.patch('jmflex.runner.posterior_mode', side_effect=ValueError('singular design')):
            with self.assertRaises(ValueError):
                run_fit(self.surv, self.long, self.config, self.out('odd'), mode_only=True)
        self.assertEqual(read_json(self.out('odd/manifest.json'))['status'], 'failed')

    def test_censor_gap(self):
        manifest = run_fit(self.surv, self.long, self.config, self.out('gap'), seed=1, mode_only=True,
                           censor_gap=0.5)
        model, _, _, attrs = load_fit(self.out('gap'))
        original = Dataset(*tiny_frames(n=15, seed=7))
        self.assertEqual(model.data.metadata['censor_gap'], 0.5)
        self.assertTrue(np.all(model.data.T <= original.T))
        self.assertTrue(np.any(model.data.T < original.T))
        self.assertEqual(yaml.safe_load(attrs['config_yaml'])['censor_gap'], 0.5)
        self.assertEqual(attrs['config_hash'], manifest.config_hash)
        with self.assertRaises(ConfigurationError):
            run_fit(self.surv, self.long, self.config, self.out('nogap'), mode_only=True, censor_gap=0.0)

    def test_fit_archive_temporary_files(self):
        config = parse_config_dict(dict(SMALL_CONFIG))
        mode = SimpleNamespace(coefficients={'mu.intercept': np.zeros(1)}, variances={'mu.intercept': np.ones(0)})
        draws = {'mu.intercept': np.zeros((2, 1))}
        os.makedirs(self.out('arch'))
        target = self.out('arch/fit.h5')
        with mock.patch('jmflex.runner.os.replace', wraps=os.replace) as rename:
            write_fit_archive(target, config, None, mode, draws, {}, {'kind': 'mode'})
            write_fit_archive(target, config, None, mode, draws, {}, {'kind': 'mode'})
        sources = [call.args[0] for call in rename.call_args_list]
        self.assertEqual(len(set(sources)), 2)
        self.assertTrue(all(os.path.basename(source).startswith('.tmp-') for source in sources))
        self.assertEqual(os.listdir(self.out('arch')), ['fit.h5'])
        with mock.patch.object(Archive, 'write', side_effect=OSError('disk full')):
            with self.assertRaises(OSError):
                write_fit_archive(self.out('arch/other.h5'), config, None, mode, draws, {}, {})
        self.assertEqual(os.listdir(self.out('arch')), ['fit.h5'])

    def test_simulate(self):
        paths = run_simulate(1, 20, 0.1, 4, self.out('sim'))
        for path in paths.values():
            self.assertTrue(os.path.exists(path))
        self.assertEqual(sorted(os.listdir(self.out('sim'))), ['long.csv', 'surv.csv', 'truth.h5'])

    def test_replicates(self):
        config = parse_config_dict(dict(SMALL_CONFIG))
        reports, table = run_replicates(SimSetting(n=40, seed=1), 2, config, self.out('rep'), mode_only=True,
                                        workers=1)
        self.assertEqual([r['replicate'] for r in reports], [0, 1])
        self.assertTrue(os.path.exists(self.out('rep/replicates.json')))
        self.assertTrue(os.path.exists(self.out('rep/metrics.csv')))
        for report in reports:
            if not report['failed']:
                self.assertIn('alpha_slope', report['metrics'])
                self.assertIn('gamma.linear_covariate_x1', report['coefficients'])
        if not all(r['failed'] for r in reports):
            self.assertIn('mse', set(table['metric']))


class TestCli(unittest.TestCase):

    def setUp(self):
        self.tmp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp_dir)

    def run_main(self, argv):
        stderr = io.StringIO()
        with contextlib.redirect_stderr(stderr), contextlib.redirect_stdout(io.StringIO()):
            code = main(argv)
        return code, stderr.getvalue()

    def test_usage_errors(self):
        out = os.path.join(self.tmp_dir, 'sim')
        self.assertEqual(self.run_main(['simulate', '--setting', '4', '--out', out])[0], 1)
        self.assertEqual(self.run_main(['simulate', '--setting', '1', '--keep', '1.5', '--out', out])[0], 1)
        self.assertEqual(self.run_main(['bootstrap'])[0], 1)
        self.assertEqual(self.run_main([])[0], 1)
        fit = ['fit', '--surv', 's.csv', '--long', 'l.csv', '--config', 'c.yaml', '--out', out]
        self.assertEqual(self.run_main(fit + ['--censor-gap', 'a year'])[0], 1)
        self.assertEqual(build_parser().parse_args(fit + ['--censor-gap', '365']).censor_gap, 365.0)
        self.assertIsNone(build_parser().parse_args(fit).censor_gap)

    def test_missing_data(self):
        out = os.path.join(self.tmp_dir, 'fit')
        code, stderr = self.run_main(['fit', '--surv', os.path.join(self.tmp_dir, 'none.csv'),
                                      '--long', os.path.join(self.tmp_dir, 'none_long.csv'),
                                      '--config', os.path.join(CONFIG_DIR, 'linear.yaml'), '--out', out])
        self.assertEqual(code, 2)
        self.assertIn('DataError', stderr)
        self.assertEqual(read_json(os.path.join(out, 'error.json'))['error'], 'DataError')

    def test_missing_config(self):
        out = os.path.join(self.tmp_dir, 'rep')
        code, _ = self.run_main(['replicate', '--setting', '1', '--replicates', '1', '--config',
                                 os.path.join(self.tmp_dir, 'none.yaml'), '--out', out])
        self.assertEqual(code, 2)
        self.assertEqual(read_json(os.path.join(out, 'error.json'))['error'], 'ConfigurationError')

    def test_fit_failure_exit_code(self):
        surv = os.path.join(self.tmp_dir, 'surv.csv')
        long = os.path.join(self.tmp_dir, 'long.csv')
        write_dataset(Dataset(*tiny_frames(n=12)), surv, long)
        config = os.path.join(self.tmp_dir, 'small.yaml')
        with open(config, 'w') as f:
            yaml.safe_dump(SMALL_CONFIG, f)
        out = os.path.join(self.tmp_dir, 'fit')
        with mock.patch('jmflex.runner.posterior_mode', side_effect=NonConcaveBlock('lambda.pspline_time')):
            code, _ = self.run_main(['fit', '--surv', surv, '--long', long, '--config', config, '--out', out,
                                     '--restarts', '0', '--mode-only'])
        self.assertEqual(code, 3)
        payload = read_json(os.path.join(out, 'error.json'))
        self.assertEqual(payload['error'], 'FitFailure')
        self.assertEqual(payload['block'], 'lambda.pspline_time')

    def test_simulate(self):
        out = os.path.join(self.tmp_dir, 'sim')
        code, _ = self.run_main(['simulate', '--setting', '3', '--n', '15', '--seed', '2', '--out', out])
        self.assertEqual(code, 0)
        self.assertTrue(os.path.exists(os.path.join(out, 'truth.h5')))
        self.assertFalse(os.path.exists(os.path.join(out, 'error.json')))


if __name__ == '__main__':
    unittest.main()
