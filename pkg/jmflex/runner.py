"""
Run orchestration: fits with the restart policy, simulation runs,
replicate studies and the artifacts they leave in an output directory.

All artifacts are written to a temporary file first and renamed into
place, so an interrupted or failed run never leaves a partial file.
"""
import logging
import multiprocessing
import os
import tempfile
from dataclasses import dataclass, asdict, replace
from datetime import datetime, timezone

import numpy as np
import pandas as pd
import yaml

from jmflex import __version__
from jmflex.config import ModelConfig, dump_config, parse_config_dict, parse_model_config
from jmflex.data import Archive, load_dataset, write_dataset
from jmflex.effects import export_effects, slope_draws
from jmflex.errors import ConfigurationError, FitFailure, NonConcaveBlock, NumericalError
from jmflex.estimation import FitResult, posterior_mode
from jmflex.likelihood import JointModel, ThetaState
from jmflex.mcmc import SampleChain, dic, posterior_mean, summarize
from jmflex.simulation import SimSetting, aggregate_metrics, metrics, simulate_dataset, write_truth
from jmflex.utils import Progress, atomic_write, read_json, write_json

logger = logging.getLogger(__name__)

MODE_DRAWS = 1000
TERMINAL = ('converged', 'failed')


@dataclass
class RunManifest:
    """
    Provenance of one run. Status moves forward only: 'running', then
    'converged', 'restarted-<k>-times' or 'failed'.
    """
    config_hash: str
    seed: int
    version: str = __version__
    started: str = None
    finished: str = None
    status: str = 'running'
    command: str = 'fit'

    def __post_init__(self) -> None:
        self.started = self.started or datetime.now(timezone.utc).isoformat()

    @property
    def is_final(self) -> bool:
        return self.status in TERMINAL or self.status.startswith('restarted-')

    def advance(self, status: str) -> None:
        if self.is_final:
            raise ValueError(f"Run status '{self.status}' is final; cannot move to '{status}'.")
        if not (status in TERMINAL or (status.startswith('restarted-') and status.endswith('-times'))):
            raise ValueError(f"Unknown run status '{status}'.")
        self.status = status
        self.finished = datetime.now(timezone.utc).isoformat()

    def write(self, out_dir: str) -> None:
        write_json(os.path.join(out_dir, 'manifest.json'), asdict(self))


def jittered_start(model: JointModel, seed: int, scale: float = 0.1) -> ThetaState:
    """Starting state with the blocks' starting coefficients perturbed by N(0, scale^2)."""
    rng = np.random.default_rng(seed)
    return ThetaState(model, {block.name: block.start + rng.normal(0.0, scale, block.size) for block in model.blocks})


class FitRun:
    """
    One fit of a configuration to a dataset: posterior mode, then (unless
    mode_only) a posterior-mean chain started at the mode.

    A NonConcaveBlock or NumericalError restarts the fit from jittered
    starting values with seed + 1, optionally with the nonlinear association
    basis reduced by two functions, until the restart budget is used up.

    Attributes:
        config (ModelConfig): Model and estimation settings.
        data (Dataset): The data.
        seed (int): Seed of the first attempt. Default is 0.
        restarts (int): Maximum number of restarts. Default is 3.
        shrink_alpha (bool): Shrink the association basis on each restart. Default is False.
        mode_only (bool): Skip posterior-mean sampling. Default is False.
        progress (bool): Report progress of the loops. Default is False.
    """

    def __init__(self, config: ModelConfig, data, seed: int = 0, restarts: int = 3, shrink_alpha: bool = False,
                 mode_only: bool = False, progress: bool = False) -> None:
        if restarts < 0:
            raise ConfigurationError(f'restarts must be nonnegative, got {restarts}.')
        self.config = config
        self.data = data
        self.seed = int(seed)
        self.restarts = int(restarts)
        self.shrink_alpha = shrink_alpha
        self.mode_only = mode_only
        self.progress = progress

    def _shrunk(self, config: ModelConfig) -> ModelConfig:
        alpha = config.spec.alpha
        if alpha.g1 != 'pspline':
            return config
        current = alpha.g1_basis.n_basis if alpha.g1_basis is not None else alpha.g1_n_basis
        smaller = max(current - 2, alpha.degree + 2)
        if smaller < current:
            logger.info(f'Association basis reduced from {current} to {smaller} functions')
        return config.with_alpha_basis(smaller)

    def fit(self) -> tuple:
        """
        Raises:
            FitFailure: Every attempt failed.

        Returns:
            tuple: (JointModel, FitResult, SampleChain or None, ModelConfig actually used)
        """
        config = self.config
        failed_counter = 0
        last_error = None
        for attempt in range(self.restarts + 1):
            seed = self.seed + attempt
            try:
                model = JointModel(config.spec, self.data, config.rule)
                start = None if attempt == 0 else jittered_start(model, seed)
                mode = posterior_mode(model, replace(config.mode, progress=self.progress), start)
                mode.restarts = attempt
                chain = None
                if not self.mode_only:
                    mcmc = replace(config.mcmc, rng_seed=seed, progress=self.progress)
                    chain = posterior_mean(model, mcmc, mode)
                return model, mode, chain, config
            except (NonConcaveBlock, NumericalError) as err:
                failed_counter += 1
                last_error = err
                logger.warning(f'Error: {err}. Failed {failed_counter}/{self.restarts + 1} times.'
                               + (f' Restarting with seed {seed + 1} ...' if attempt < self.restarts else ''))
                if self.shrink_alpha:
                    config = self._shrunk(config)
        raise FitFailure(f'Fit failed after {self.restarts} restart(s): {last_error}', restarts=self.restarts,
                         block=getattr(last_error, 'block', None))


def _draws_of(model: JointModel, mode: FitResult, chain: SampleChain, seed: int) -> tuple:
    if chain is not None:
        return chain.coefficients, chain.variances
    draws = mode.approximate_draws(MODE_DRAWS, np.random.default_rng([seed, 1]))
    variances = {name: np.repeat(tau2[None, :], MODE_DRAWS, axis=0) for name, tau2 in mode.variances.items()}
    return draws, variances


def mode_summary(model: JointModel, mode: FitResult, config_hash: str, seed: int) -> dict:
    blocks = {}
    for block in model.blocks:
        blocks[block.name] = {'coefficients': mode.coefficients[block.name],
                              'sd': mode.sd(block.name),
                              'variances': mode.variances[block.name],
                              'prior': block.prior}
    return {'config_hash': config_hash, 'seed': seed, 'converged': mode.converged, 'iterations': mode.iterations,
            'restarts': mode.restarts, 'log_posterior': mode.logpost_trace[-1], 'suspect': mode.suspect,
            'blocks': blocks}


def write_chain_csv(path: str, chain: SampleChain, config_hash: str) -> None:
    text = f'# config_hash={config_hash}\n' + chain.to_frame().to_csv(index=False, float_format='%.17g')
    atomic_write(path, text)


def read_chain_csv(path: str) -> tuple:
    """(long-format chain frame, config hash) from a chain CSV."""
    with open(path, 'r', encoding='utf-8') as f:
        header = f.readline().strip()
    if not header.startswith('# config_hash='):
        raise ConfigurationError(f'{path} lacks the config hash header.')
    return pd.read_csv(path, comment='#'), header.split('=', 1)[1]


def write_fit_archive(path: str, config: ModelConfig, model: JointModel, mode: FitResult, draws: dict,
                      variances: dict, attrs: dict) -> None:
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), prefix='.tmp-', suffix='.h5')
    os.close(fd)
    try:
        Archive(tmp).write({'mode': mode.coefficients, 'mode_variances': mode.variances,
                            'draws': draws, 'variance_draws': variances},
                           attrs={**attrs, 'config_yaml': dump_config(config), 'config_hash': config.hash})
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def load_data(surv: str, long: str, config: ModelConfig):
    """Dataset of the CSV pair with the configuration's response transform and censoring gap applied."""
    data = load_dataset(surv, long, response_transform=config.response_transform)
    if config.censor_gap is not None:
        data = data.censor_after_last_measurement(config.censor_gap)
        logger.info(f"Censored {data.metadata['censored_after_gap']} subject(s) {config.censor_gap:g} after their "
                    f'last measurement')
    return data


def run_fit(surv: str, long: str, config_path: str, out: str, seed: int = 0, mode_only: bool = False,
            restarts: int = 3, shrink_alpha: bool = False, iterations: int = None, burnin: int = None,
            thin: int = None, censor_gap: float = None, progress: bool = False) -> RunManifest:
    """
    Fit a configuration to CSV data and write the run's artifacts to `out`:
    mode_summary.json, fit.h5 and manifest.json always; chain.csv,
    summary.json and dic.json unless mode_only. `censor_gap` overrides the
    configuration's censoring gap.

    Raises:
        DataError, ConfigurationError: Invalid inputs.
        FitFailure: The restart budget was exhausted. The manifest is left
            'failed' for this and any other error raised during the fit.
    """
    config = parse_model_config(config_path)
    overrides = {key: value for key, value in (('n_iter', iterations), ('burnin', burnin), ('thin', thin))
                 if value is not None}
    if overrides:
        config = replace(config, mcmc=replace(config.mcmc, **overrides))
        config.raw = {**config.raw, 'mcmc': {**(config.raw.get('mcmc') or {}), **overrides}}
    if censor_gap is not None:
        if not censor_gap > 0:
            raise ConfigurationError(f'censor_gap must be positive, got {censor_gap}.')
        config = replace(config, censor_gap=float(censor_gap), raw={**config.raw, 'censor_gap': float(censor_gap)})
    data = load_data(surv, long, config)
    os.makedirs(out, exist_ok=True)
    manifest = RunManifest(config.hash, seed)
    manifest.write(out)
    try:
        model, mode, chain, used = FitRun(config, data, seed, restarts, shrink_alpha, mode_only, progress).fit()
    except Exception:
        manifest.advance('failed')
        manifest.write(out)
        raise
    write_json(os.path.join(out, 'mode_summary.json'), mode_summary(model, mode, used.hash, seed))
    draws, variances = _draws_of(model, mode, chain, seed)
    if chain is not None:
        write_chain_csv(os.path.join(out, 'chain.csv'), chain, used.hash)
        table = summarize(chain)
        slopes = slope_draws(model, draws)
        lower, upper = np.quantile(slopes, [0.025, 0.975])
        write_json(os.path.join(out, 'summary.json'),
                   {'config_hash': used.hash, 'records': table.to_dict(orient='records'),
                    'acceptance': chain.acceptance_rates,
                    'alpha_slope': {'mean': float(slopes.mean()), 'q0.025': float(lower), 'q0.975': float(upper)}})
        write_json(os.path.join(out, 'dic.json'), {'config_hash': used.hash, **dic(chain, model)})
    write_fit_archive(os.path.join(out, 'fit.h5'), used, model, mode, draws, variances,
                      {'surv_path': os.path.abspath(surv), 'long_path': os.path.abspath(long), 'seed': seed,
                       'kind': 'chain' if chain is not None else 'mode'})
    manifest.config_hash = used.hash
    manifest.advance('converged' if mode.restarts == 0 else f'restarted-{mode.restarts}-times')
    manifest.write(out)
    return manifest


def load_fit(fit_dir: str) -> tuple:
    """(JointModel, coefficient draws, variance draws, attributes) of a fit directory."""
    path = os.path.join(fit_dir, 'fit.h5')
    if not os.path.exists(path):
        raise ConfigurationError(f'No fit archive in {fit_dir}.')
    archive = Archive(path)
    attrs = archive.attrs()
    config = parse_config_dict(yaml.safe_load(attrs['config_yaml']))
    data = load_data(attrs['surv_path'], attrs['long_path'], config)
    model = JointModel(config.spec, data, config.rule)
    return model, archive.get_group('draws'), archive.get_group('variance_draws'), attrs


def export(fit_dir: str, which: str, grid: tuple = None, out: str = None) -> pd.DataFrame:
    model, draws, _, attrs = load_fit(fit_dir)
    frame = export_effects(model, draws, which, grid)
    if out is not None:
        atomic_write(out, f"# config_hash={attrs['config_hash']}\n" + frame.to_csv(index=False, float_format='%.10g'))
    return frame


def summarize_fit(fit_dir: str, quantiles: tuple = (0.025, 0.975)) -> pd.DataFrame:
    _, draws, variances, _ = load_fit(fit_dir)
    store = dict(draws)
    store.update({f'{name}:tau2': values for name, values in variances.items() if values.size})
    return summarize(store, quantiles)


def compare_fits(fit_dirs: list, out: str = None) -> pd.DataFrame:
    """Rank fit directories by DIC, lowest first; mixing config hashes is reported."""
    rows = []
    for fit_dir in fit_dirs:
        path = os.path.join(fit_dir, 'dic.json')
        if not os.path.exists(path):
            raise ConfigurationError(f'{fit_dir} has no dic.json (mode-only fit?).')
        rows.append({'fit': fit_dir, **read_json(path)})
    frame = pd.DataFrame(rows).sort_values('dic', kind='mergesort').reset_index(drop=True)
    if frame['config_hash'].nunique() > 1:
        logger.info(f"Comparing {frame['config_hash'].nunique()} different configurations")
    if out is not None:
        atomic_write(out, frame.to_csv(index=False, float_format='%.10g'))
    return frame


def run_simulate(setting: int, n: int, keep: float, seed: int, out: str) -> dict:
    """Write surv.csv, long.csv and the truth sidecar truth.h5 for one simulated dataset."""
    sim = SimSetting(setting=setting, n=n, thinning_keep=keep, seed=seed)
    data, truth = simulate_dataset(sim)
    os.makedirs(out, exist_ok=True)
    paths = {'surv': os.path.join(out, 'surv.csv'), 'long': os.path.join(out, 'long.csv'),
             'truth': os.path.join(out, 'truth.h5')}
    tmp = {key: os.path.join(out, f'.tmp-{os.path.basename(path)}') for key, path in paths.items()}
    write_dataset(data, tmp['surv'], tmp['long'])
    write_truth(tmp['truth'], truth, sim)
    for key, path in paths.items():
        os.replace(tmp[key], path)
    return paths


def _coefficient_intervals(model: JointModel, draws: dict) -> dict:
    out = {}
    for block in model.predictor_blocks('gamma'):
        if block.term.kind.value == 'linear_covariate' and block.size == 1:
            values = draws[block.name][:, 0]
            lower, upper = np.quantile(values, [0.025, 0.975])
            out[block.name] = {'mean': float(values.mean()), 'lower': float(lower), 'upper': float(upper)}
    return out


def _replicate_job(job: tuple) -> dict:
    setting, payload, replicate, mode_only, restarts, shrink_alpha = job
    sim = SimSetting(**setting)
    config = parse_config_dict(payload)
    data, truth = simulate_dataset(sim, np.random.default_rng([sim.seed, replicate]))
    seed = sim.seed + 1000 * replicate
    try:
        model, mode, chain, _ = FitRun(config, data, seed, restarts, shrink_alpha, mode_only).fit()
    except FitFailure as err:
        return {'replicate': replicate, 'failed': True, 'error': str(err)}
    draws, _ = _draws_of(model, mode, chain, seed)
    return {'replicate': replicate, 'failed': False, 'restarts': mode.restarts,
            'metrics': metrics(truth, draws, model), 'coefficients': _coefficient_intervals(model, draws)}


def worker_count(workers: int = None) -> int:
    if workers is not None:
        return max(int(workers), 1)
    return max(int(os.environ.get('JMFLEX_WORKERS', '1')), 1)


def run_replicates(setting: SimSetting, replicates: int, config: ModelConfig, out: str = None,
                   mode_only: bool = False, restarts: int = 3, shrink_alpha: bool = False,
                   workers: int = None) -> tuple:
    """
    Simulate and fit `replicates` datasets of one setting, sharded across
    worker processes, and aggregate their metrics.

    Replicate r draws its data from default_rng([seed, r]) and fits with
    seed + 1000 r, so results do not depend on the worker count.

    Returns:
        tuple: (list of per-replicate reports, aggregated metrics DataFrame)
    """
    jobs = [(asdict(setting), config.raw, r, mode_only, restarts, shrink_alpha) for r in range(int(replicates))]
    n_workers = min(worker_count(workers), max(len(jobs), 1))
    progress = Progress(len(jobs))
    reports = []
    if n_workers == 1:
        for i, job in enumerate(jobs, start=1):
            reports.append(_replicate_job(job))
            progress.update(i, message=f'replicate {job[2]} done')
    else:
        with multiprocessing.get_context('spawn').Pool(n_workers) as pool:
            for i, report in enumerate(pool.imap(_replicate_job, jobs), start=1):
                reports.append(report)
                progress.update(i, message=f"replicate {report['replicate']} done")
    progress.complete(f'{sum(not r["failed"] for r in reports)}/{len(reports)} replicates fitted')
    table = aggregate_metrics([r['metrics'] for r in reports if not r['failed']])
    if out is not None:
        os.makedirs(out, exist_ok=True)
        write_json(os.path.join(out, 'replicates.json'), {'config_hash': config.hash, 'setting': asdict(setting),
                                                          'reports': reports})
        atomic_write(os.path.join(out, 'metrics.csv'), table.to_csv(index=False, float_format='%.10g'))
    return reports, table


def write_error(out: str, err: BaseException) -> dict:
    payload = {'error': type(err).__name__, 'message': str(err), 'block': getattr(err, 'block', None)}
    if out:
        try:
            write_json(os.path.join(out, 'error.json'), payload)
        except OSError as io_err:
            logger.warning(f'Could not write error.json: {io_err}')
    return payload
