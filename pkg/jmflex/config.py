"""
YAML model configuration.

A configuration file has the sections

    model:               term lists per predictor plus the association
      lambda: [...]
      gamma:  [...]
      mu:     [...]
      sigma:  [...]
      alpha:  {g1: ..., g2: ..., column: ...}
    quadrature: {nodes: 15}
    mode:  {ModeFitConfig fields}
    mcmc:  {McmcConfig fields}
    response_transform: identity | log | sqrt
    censor_gap: end follow-up this long after the last measurement (optional,
                applied to data read from files)

Each term is a mapping with a `kind` and the Term fields it needs, e.g.
{kind: pspline_time, n_basis: 10}; explicit bases are given by `knots`
(interior knots) and `domain`.
"""
import os
from dataclasses import dataclass, field, replace

import yaml

from jmflex.data import RESPONSE_TRANSFORMS
from jmflex.errors import ConfigurationError
from jmflex.estimation import ModeFitConfig
from jmflex.likelihood import QuadratureRule
from jmflex.mcmc import McmcConfig
from jmflex.model import AssocSpec, JointModelSpec, Term, TermKind
from jmflex.splines import BasisSpec
from jmflex.utils import config_hash

SECTIONS = ('model', 'quadrature', 'mode', 'mcmc', 'response_transform', 'censor_gap')
TERM_KEYS = ('kind', 'name', 'covariate', 'n_basis', 'degree', 'diff_order', 'center', 'factor', 'knots', 'domain')
ALPHA_KEYS = ('g1', 'g2', 'column', 'n_basis', 'time_n_basis', 'degree', 'diff_order', 'grid_size', 'knots',
              'domain')


@dataclass
class ModelConfig:
    """Everything a fit needs besides the data."""
    spec: JointModelSpec
    mode: ModeFitConfig = field(default_factory=ModeFitConfig)
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    quadrature_nodes: int = 15
    response_transform: str = 'identity'
    raw: dict = field(default_factory=dict)
    censor_gap: float = None

    @property
    def rule(self) -> QuadratureRule:
        return QuadratureRule.gauss_legendre(self.quadrature_nodes)

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def with_alpha_basis(self, n_basis: int) -> 'ModelConfig':
        """Copy with a nonlinear association basis of `n_basis` functions."""
        alpha = self.spec.alpha
        if alpha.g1 != 'pspline':
            return self
        alpha = replace(alpha, g1_n_basis=int(n_basis), g1_basis=None, constraint=None, built=False)
        raw = dict(self.raw)
        raw['model'] = dict(raw.get('model', {}))
        raw['model']['alpha'] = {**raw['model'].get('alpha', {}), 'n_basis': int(n_basis)}
        return replace(self, spec=replace(self.spec, alpha=alpha), raw=raw)


def _basis(entry: dict, context: str):
    if 'knots' not in entry and 'domain' not in entry:
        return None
    if 'domain' not in entry:
        raise ConfigurationError(f'{context}: explicit knots need a domain.')
    return BasisSpec(tuple(entry.get('knots', ())), int(entry.get('degree', 3)), int(entry.get('diff_order', 2)),
                     tuple(entry['domain']))


def parse_term(entry: dict, predictor: str) -> Term:
    if not isinstance(entry, dict) or 'kind' not in entry:
        raise ConfigurationError(f'{predictor}: every term needs a kind, got {entry!r}.')
    unknown = set(entry) - set(TERM_KEYS)
    if unknown:
        raise ConfigurationError(f'{predictor}: unknown term keys {sorted(unknown)}.')
    try:
        kind = TermKind(entry['kind'])
    except ValueError:
        raise ConfigurationError(f"{predictor}: unknown term kind '{entry['kind']}'.")
    kwargs = {key: entry[key] for key in ('name', 'covariate', 'n_basis', 'degree', 'diff_order', 'center', 'factor')
              if key in entry}
    return Term(kind, basis=_basis(entry, predictor), **kwargs)


def parse_alpha(entry) -> AssocSpec:
    if not entry:
        raise ConfigurationError('The association (model.alpha) is mandatory in a joint model.')
    if not isinstance(entry, dict):
        raise ConfigurationError(f'model.alpha must be a mapping, got {entry!r}.')
    unknown = set(entry) - set(ALPHA_KEYS)
    if unknown:
        raise ConfigurationError(f'alpha: unknown keys {sorted(unknown)}.')
    kwargs = {'g1': entry.get('g1', 'identity'), 'g2': entry.get('g2', 'constant'), 'g2_column': entry.get('column'),
              'g1_basis': _basis(entry, 'alpha')}
    for key, target in (('n_basis', 'g1_n_basis'), ('time_n_basis', 'g2_n_basis'), ('degree', 'degree'),
                        ('diff_order', 'diff_order'), ('grid_size', 'grid_size')):
        if key in entry:
            kwargs[target] = int(entry[key])
    return AssocSpec(**kwargs)


def parse_config_dict(payload: dict) -> ModelConfig:
    """Build a validated ModelConfig from an already loaded mapping."""
    if not isinstance(payload, dict):
        raise ConfigurationError('Configuration must be a mapping.')
    unknown = set(payload) - set(SECTIONS)
    if unknown:
        raise ConfigurationError(f'Unknown configuration sections {sorted(unknown)}.')
    model = payload.get('model') or {}
    unknown = set(model) - {'lambda', 'gamma', 'mu', 'sigma', 'alpha'}
    if unknown:
        raise ConfigurationError(f'Unknown model sections {sorted(unknown)}.')
    terms = {k: tuple(parse_term(entry, k) for entry in (model.get(k) or ())) for k in ('lambda', 'gamma', 'mu',
                                                                                        'sigma')}
    spec = JointModelSpec(terms['lambda'], terms['gamma'], terms['mu'], terms['sigma'], parse_alpha(model.get('alpha')))
    spec.validate()
    try:
        mode = ModeFitConfig(**(payload.get('mode') or {}))
        mcmc = McmcConfig(**(payload.get('mcmc') or {}))
    except TypeError as err:
        raise ConfigurationError(f'Invalid mode/mcmc settings: {err}')
    quadrature = payload.get('quadrature') or {}
    if set(quadrature) - {'nodes'}:
        raise ConfigurationError(f'Unknown quadrature keys {sorted(set(quadrature) - {"nodes"})}.')
    nodes = int(quadrature.get('nodes', 15))
    QuadratureRule.gauss_legendre(nodes)
    transform = payload.get('response_transform', 'identity')
    if transform not in RESPONSE_TRANSFORMS:
        raise ConfigurationError(f"Unknown response transform '{transform}'. Use one of {RESPONSE_TRANSFORMS}.")
    gap = payload.get('censor_gap')
    if gap is not None and (isinstance(gap, bool) or not isinstance(gap, (int, float)) or not gap > 0):
        raise ConfigurationError(f'censor_gap must be a positive number, got {gap!r}.')
    return ModelConfig(spec, mode, mcmc, nodes, transform, payload, None if gap is None else float(gap))


def parse_model_config(path: str) -> ModelConfig:
    """
    Load and validate a YAML model configuration.

    Raises:
        ConfigurationError: Missing file, invalid YAML, unknown term kind or
            key, association kind illegal for a predictor, missing association.
    """
    if not os.path.exists(path):
        raise ConfigurationError(f'Configuration file {path} not found.')
    with open(path, 'r', encoding='utf-8') as f:
        try:
            payload = yaml.safe_load(f)
        except yaml.YAMLError as err:
            raise ConfigurationError(f'Invalid YAML in {path}: {err}')
    return parse_config_dict(payload or {})


def dump_config(config: ModelConfig) -> str:
    return yaml.safe_dump(config.raw, sort_keys=True)
