import hashlib
import json
import logging
import os
import sys
import tempfile
import time

"""
Progress reporting for long loops (Newton sweeps, MCMC iterations,
replicates) and small file helpers shared by the runner and simulation.
"""


class Progress:
    """
    Track and report the progress of a loop through the 'jmflex.progress' logger.

    Attributes:
        total (int): Number of steps to complete.
        start_time (float): Time at which tracking started.
        current (int): Steps completed so far.
    """

    def __init__(self, total, save_log=False, log_filename='jmflex.log'):
        self.total = max(int(total), 1)
        self.start_time = time.time()
        self.current = 0
        self.logger = logging.getLogger('jmflex.progress')
        # Only add handlers if they haven't been added before.
        if not self.logger.handlers:
            self.logger.setLevel(logging.INFO)
            self.logger.propagate = False
            consol_formatter = logging.Formatter('%(message)s')
            ch = logging.StreamHandler(sys.stdout)
            ch.setFormatter(consol_formatter)
            self.logger.addHandler(ch)
        if save_log and not any(isinstance(h, logging.FileHandler) and h.baseFilename == os.path.abspath(log_filename)
                                for h in self.logger.handlers):
            file_formatter = logging.Formatter('[%(asctime)s] %(message)s')
            fh = logging.FileHandler(log_filename, mode='a')
            fh.setFormatter(file_formatter)
            self.logger.addHandler(fh)

    @classmethod
    def resume(cls, start_idx, total, save_log=False, log_filename='jmflex.log'):
        progress = cls(total, save_log, log_filename)
        progress.current = start_idx
        progress.logger.info(f'Continuing progress from {start_idx}/{total}')
        return progress

    def update(self, progress, message=''):
        self.current = progress
        elapsed_time = time.time() - self.start_time
        estimated_total_time = (elapsed_time / self.current) * self.total if self.current > 0 else 0
        remaining_time = max(estimated_total_time - elapsed_time, 0.0)
        self._log_progress(elapsed_time, remaining_time, message)

    def _log_progress(self, elapsed_time, remaining_time, message):
        progress_percentage = (self.current / self.total) * 100
        log_message = (
            f'{progress_percentage:.2f}% ({self.current}/{self.total}) | {elapsed_time:.2f}s elapsed, '
            f'{remaining_time:.2f}s remaining | {message}'
        )
        self.logger.info(log_message)

    def show_msg(self, message):
        self.logger.info(message)

    def complete(self, message='Task completed!'):
        elapsed_time = time.time() - self.start_time
        self.logger.info(f'100.00% | {elapsed_time:.2f}s elapsed | 0.00s remaining | {message}')


def set_verbosity(verbose: int) -> None:
    """Level of the 'jmflex' loggers: warnings by default, info with -v, debug with -vv."""
    level = logging.WARNING if verbose <= 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logger = logging.getLogger('jmflex')
    logger.setLevel(level)
    if not logger.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter('%(levelname)s %(name)s: %(message)s'))
        logger.addHandler(handler)
    logging.getLogger('jmflex.progress').setLevel(logging.INFO if verbose >= 0 else logging.WARNING)


def atomic_write(path: str, text: str) -> None:
    """Write `text` to a temporary file in the target directory, then rename it into place."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix='.tmp-')
    try:
        with os.fdopen(fd, 'w', encoding='utf-8') as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def write_json(path: str, payload: dict) -> None:
    atomic_write(path, json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + '\n')


def read_json(path: str) -> dict:
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def config_hash(payload) -> str:
    """Stable sha256 of a JSON-serializable configuration."""
    text = json.dumps(payload, sort_keys=True, default=_jsonable)
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def _jsonable(value):
    if hasattr(value, 'tolist'):
        return value.tolist()
    if hasattr(value, 'item'):
        return value.item()
    return str(value)
