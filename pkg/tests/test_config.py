import copy
import os
import shutil
import tempfile
import unittest

import yaml

from jmflex.config import dump_config, parse_config_dict, parse_model_config
from jmflex.errors import ConfigurationError
from jmflex.likelihood import JointModel
from tests.fixtures import CONFIG_DIR, tiny_data

MINIMAL = {
    'model': {
        'lambda': [{'kind': 'pspline_time', 'n_basis': 6}],
        'gamma': [{'kind': 'intercept'}],
        'mu': [{'kind': 'intercept'}, {'kind': 'random_intercept'}],
        'sigma': [{'kind': 'intercept'}],
        'alpha': {'g1': 'identity', 'g2': 'constant'},
    },
}


def with_changes(section, value):
    payload = copy.deepcopy(MINIMAL)
    payload['model'][section] = value
    return payload


class TestShippedConfigs(unittest.TestCase):

    def test_setting1(self):
        config = parse_model_config(os.path.join(CONFIG_DIR, 'setting1.yaml'))
        self.assertEqual(config.quadrature_nodes, 15)
        self.assertEqual(config.mcmc.n_saved, 5000)
        model = JointModel(config.spec, tiny_data(n=20), config.rule)
        self.assertEqual(model.block('lambda.pspline_time').size, 9)
        self.assertEqual(model.block('alpha.assoc').size, 5)
        self.assertEqual(model.block('mu.functional_random_intercept').size, 20 * 5)
        self.assertEqual(model.block('mu.functional_random_intercept').prior, 'anisotropic')

    def test_setting3(self):
        config = parse_model_config(os.path.join(CONFIG_DIR, 'setting3.yaml'))
        self.assertEqual(config.spec.alpha.g2, 'group_factor')
        self.assertEqual(config.spec.alpha.g2_column, 'group')
        model = JointModel(config.spec, tiny_data(n=20), config.rule)
        self.assertEqual(model.block('alpha.assoc').size, 10)
        self.assertEqual(model.block('alpha.group').size, 1)

    def test_linear(self):
        config = parse_model_config(os.path.join(CONFIG_DIR, 'linear.yaml'))
        self.assertEqual(config.spec.alpha.g1, 'identity')
        self.assertEqual(config.with_alpha_basis(4), config)


class TestParsing(unittest.TestCase):

    def setUp(self):
        self.tmp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp_dir)

    def test_minimal(self):
        config = parse_config_dict(copy.deepcopy(MINIMAL))
        self.assertEqual(config.response_transform, 'identity')
        self.assertEqual([term.name for term in config.spec.mu_terms], ['intercept', 'random_intercept'])

    def test_invalid_models(self):
        bad = [
            with_changes('alpha', None),
            with_changes('alpha', {}),
            with_changes('lambda', [{'kind': 'cubic_time'}]),
            with_changes('lambda', [{'kind': 'pspline_time', 'smoothness': 2}]),
            with_changes('lambda', [{'n_basis': 6}]),
            with_changes('sigma', [{'kind': 'intercept'}, {'kind': 'functional_random_intercept'}]),
            with_changes('alpha', {'g1': 'pspline', 'g2': 'constant', 'lag': 1}),
            with_changes('alpha', {'g1': 'pspline', 'g2': 'group_factor'}),
            with_changes('lambda', [{'kind': 'pspline_time', 'knots': [1.0, 2.0]}]),
        ]
        for payload in bad:
            with self.subTest(model=payload['model']):
                with self.assertRaises(ConfigurationError):
                    parse_config_dict(payload)

    def test_invalid_sections(self):
        for changes in ({'output': {}}, {'quadrature': {'nodes': 0}}, {'quadrature': {'rule': 'simpson'}},
                        {'mcmc': {'n_iter': 10, 'burnin': 20}}, {'mcmc': {'chains': 2}},
                        {'mode': {'max_outer_iters': 0}}, {'response_transform': 'logit'}, {'censor_gap': 0},
                        {'censor_gap': -1.0}, {'censor_gap': 'one year'}, {'censor_gap': True}):
            payload = dict(copy.deepcopy(MINIMAL), **changes)
            with self.subTest(section=list(changes)):
                with self.assertRaises(ConfigurationError):
                    parse_config_dict(payload)
        with self.assertRaises(ConfigurationError):
            parse_config_dict(['model'])

    def test_censor_gap(self):
        self.assertIsNone(parse_config_dict(copy.deepcopy(MINIMAL)).censor_gap)
        config = parse_config_dict(dict(copy.deepcopy(MINIMAL), censor_gap=365))
        self.assertEqual(config.censor_gap, 365.0)
        self.assertEqual(config.with_alpha_basis(4).censor_gap, 365.0)
        self.assertNotEqual(config.hash, parse_config_dict(copy.deepcopy(MINIMAL)).hash)

    def test_files(self):
        with self.assertRaises(ConfigurationError):
            parse_model_config(os.path.join(self.tmp_dir, 'missing.yaml'))
        path = os.path.join(self.tmp_dir, 'broken.yaml')
        with open(path, 'w') as f:
            f.write('model: [unclosed\n')
        with self.assertRaises(ConfigurationError):
            parse_model_config(path)

    def test_dump_round_trip(self):
        config = parse_model_config(os.path.join(CONFIG_DIR, 'setting1.yaml'))
        path = os.path.join(self.tmp_dir, 'dumped.yaml')
        with open(path, 'w') as f:
            f.write(dump_config(config))
        again = parse_model_config(path)
        self.assertEqual(again.hash, config.hash)
        self.assertEqual(yaml.safe_load(dump_config(again)), config.raw)

    def test_alpha_basis_changes_hash(self):
        config = parse_model_config(os.path.join(CONFIG_DIR, 'setting1.yaml'))
        smaller = config.with_alpha_basis(5)
        self.assertEqual(smaller.spec.alpha.g1_n_basis, 5)
        self.assertEqual(smaller.raw['model']['alpha']['n_basis'], 5)
        self.assertNotEqual(smaller.hash, config.hash)
        self.assertEqual(config.spec.alpha.g1_n_basis, 6)


if __name__ == '__main__':
    unittest.main()
