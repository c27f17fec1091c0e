import os

import h5py
import numpy as np
import pandas as pd

from jmflex.errors import DataError

"""
Data handling: the joint survival/longitudinal Dataset, CSV ingestion and
HDF5 archives for fits and simulation truths.
"""

RESPONSE_TRANSFORMS = ('identity', 'log', 'sqrt')


class Dataset:
    """
    Per-subject survival records plus long-format longitudinal records.

    Attributes:
        surv (pd.DataFrame): One row per subject; subject index is the row position.
        long (pd.DataFrame): One row per measurement, sorted by subject then time.
        id_key (str): Subject id column in both tables. Default is 'id'.
        time_key (str): Follow-up time (survival) and measurement time (longitudinal). Default is 'time'.
        event_key (str): Event indicator column in the survival table. Default is 'event'.
        response_key (str): Marker column in the longitudinal table. Default is 'y'.
        metadata (dict): Free-form notes, e.g. subjects left without measurements.
    """

    def __init__(self, surv: pd.DataFrame, long: pd.DataFrame,
                 id_key: str = 'id',
                 time_key: str = 'time',
                 event_key: str = 'event',
                 response_key: str = 'y',
                 metadata: dict = None) -> None:
        self.id_key = id_key
        self.time_key = time_key
        self.event_key = event_key
        self.response_key = response_key
        self.metadata = dict(metadata or {})
        self.surv = self._validate_surv(surv.reset_index(drop=True))
        self.long = self._validate_long(long.reset_index(drop=True))
        empty = sorted(set(self.surv[id_key]) - set(self.long[id_key]))
        if empty:
            self.metadata['subjects_without_measurements'] = [_plain(i) for i in empty]

    def _validate_surv(self, surv: pd.DataFrame) -> pd.DataFrame:
        for key in (self.id_key, self.time_key, self.event_key):
            if key not in surv.columns:
                raise DataError(f"Survival table lacks column '{key}'.")
        if surv[self.id_key].duplicated().any():
            row = int(np.flatnonzero(surv[self.id_key].duplicated().to_numpy())[0]) + 1
            raise DataError('duplicate subject id', row=row, table='survival')
        for key in (self.time_key, self.event_key):
            values = pd.to_numeric(surv[key], errors='coerce')
            bad = values.isna() | ~np.isfinite(values.to_numpy(dtype=float, na_value=np.nan))
            if bad.any():
                raise DataError(f"non-numeric value in '{key}'", row=int(np.flatnonzero(bad.to_numpy())[0]) + 1,
                                table='survival')
            surv[key] = values.astype(float)
        bad = surv[self.time_key].to_numpy() <= 0
        if bad.any():
            raise DataError('follow-up time must be positive', row=int(np.flatnonzero(bad)[0]) + 1, table='survival')
        bad = ~np.isin(surv[self.event_key].to_numpy(), (0.0, 1.0))
        if bad.any():
            raise DataError('event indicator must be 0 or 1', row=int(np.flatnonzero(bad)[0]) + 1, table='survival')
        return surv

    def _validate_long(self, long: pd.DataFrame) -> pd.DataFrame:
        for key in (self.id_key, self.time_key, self.response_key):
            if key not in long.columns:
                raise DataError(f"Longitudinal table lacks column '{key}'.")
        for key in (self.time_key, self.response_key):
            values = pd.to_numeric(long[key], errors='coerce')
            bad = values.isna() | ~np.isfinite(values.to_numpy(dtype=float, na_value=np.nan))
            if bad.any():
                raise DataError(f"non-numeric value in '{key}'", row=int(np.flatnonzero(bad.to_numpy())[0]) + 1,
                                table='longitudinal')
            long[key] = values.astype(float)
        index = pd.Index(self.surv[self.id_key])
        position = index.get_indexer(long[self.id_key])
        bad = position < 0
        if bad.any():
            raise DataError('subject id not in survival table', row=int(np.flatnonzero(bad)[0]) + 1,
                            table='longitudinal')
        times = long[self.time_key].to_numpy()
        bad = (times < 0) | (times > self.surv[self.time_key].to_numpy()[position])
        if bad.any():
            raise DataError('measurement time outside [0, follow-up time]', row=int(np.flatnonzero(bad)[0]) + 1,
                            table='longitudinal')
        long = long.assign(_subject=position)
        long = long.sort_values(['_subject', self.time_key], kind='mergesort').reset_index(drop=True)
        return long

    @property
    def n(self) -> int:
        return len(self.surv)

    @property
    def N(self) -> int:
        return len(self.long)

    @property
    def T(self) -> np.ndarray:
        return self.surv[self.time_key].to_numpy(dtype=float)

    @property
    def delta(self) -> np.ndarray:
        return self.surv[self.event_key].to_numpy(dtype=float)

    @property
    def y(self) -> np.ndarray:
        return self.long[self.response_key].to_numpy(dtype=float)

    @property
    def t(self) -> np.ndarray:
        return self.long[self.time_key].to_numpy(dtype=float)

    @property
    def subject_index(self) -> np.ndarray:
        return self.long['_subject'].to_numpy(dtype=int)

    @property
    def ids(self) -> np.ndarray:
        return self.surv[self.id_key].to_numpy()

    def has_covariate(self, name: str) -> bool:
        return name in self.surv.columns or name in self.long.columns

    def covariate(self, name: str, subjects: np.ndarray, long_rows: bool = False) -> np.ndarray:
        """
        Covariate values for the given subject rows.

        Longitudinal (time-varying) columns are only available when
        `long_rows` is True, i.e. when the rows are the longitudinal records
        themselves; baseline columns are looked up by subject.
        """
        if long_rows and name in self.long.columns:
            return self.long[name].to_numpy()
        if name in self.surv.columns:
            return self.surv[name].to_numpy()[subjects]
        if name in self.long.columns:
            raise DataError(f"Covariate '{name}' is time-varying and cannot be evaluated at survival times.")
        raise DataError(f"Covariate '{name}' not found in the data.")

    def transformed(self, transform: str) -> 'Dataset':
        """Copy with the longitudinal response transformed (identity, log or sqrt)."""
        if transform not in RESPONSE_TRANSFORMS:
            raise DataError(f"Unknown response transform '{transform}'.")
        if transform == 'identity':
            return self
        y = self.y
        if transform == 'log' and np.any(y <= 0):
            raise DataError('log transform needs a positive response', row=int(np.flatnonzero(y <= 0)[0]) + 1,
                            table='longitudinal')
        if transform == 'sqrt' and np.any(y < 0):
            raise DataError('sqrt transform needs a nonnegative response', row=int(np.flatnonzero(y < 0)[0]) + 1,
                            table='longitudinal')
        long = self.long.drop(columns='_subject').copy()
        long[self.response_key] = np.log(y) if transform == 'log' else np.sqrt(y)
        return Dataset(self.surv.copy(), long, self.id_key, self.time_key, self.event_key, self.response_key,
                       {**self.metadata, 'response_transform': transform})

    def censor_after_last_measurement(self, gap: float) -> 'Dataset':
        """
        Copy with each subject's follow-up ended `gap` time units after its
        last longitudinal measurement, T_i = min(T_i, last t_ij + gap).

        A subject whose follow-up is shortened becomes censored. Measurements
        after the new follow-up time are dropped. Subjects without
        measurements keep their records.

        Raises:
            DataError: `gap` is not positive.
        """
        if not gap > 0:
            raise DataError(f'censoring gap must be positive, got {gap}')
        last = self.long.groupby('_subject')[self.time_key].max().reindex(np.arange(self.n)).to_numpy(dtype=float)
        limit = last + gap
        T = self.T
        shortened = np.zeros(self.n, dtype=bool)
        measured = np.isfinite(limit)
        shortened[measured] = limit[measured] < T[measured]
        surv = self.surv.copy()
        surv.loc[shortened, self.time_key] = limit[shortened]
        surv.loc[shortened, self.event_key] = 0.0
        follow_up = surv[self.time_key].to_numpy(dtype=float)
        long = self.long[self.t <= follow_up[self.subject_index]].drop(columns='_subject').copy()
        return Dataset(surv, long, self.id_key, self.time_key, self.event_key, self.response_key,
                       {**self.metadata, 'censor_gap': float(gap), 'censored_after_gap': int(shortened.sum())})

    def subset(self, subjects: np.ndarray) -> 'Dataset':
        subjects = np.asarray(subjects)
        keep = self.ids[subjects]
        surv = self.surv.iloc[subjects].copy()
        long = self.long[self.long[self.id_key].isin(keep)].drop(columns='_subject').copy()
        return Dataset(surv, long, self.id_key, self.time_key, self.event_key, self.response_key, self.metadata)

    def equals(self, other: 'Dataset') -> bool:
        return self.surv.equals(other.surv) and self.long.equals(other.long)


def load_dataset(surv_path: str, long_path: str,
                 id_key: str = 'id',
                 time_key: str = 'time',
                 event_key: str = 'event',
                 response_key: str = 'y',
                 response_transform: str = 'identity') -> Dataset:
    """
    Load and validate a survival CSV and a long-format longitudinal CSV.

    Parameters:
        surv_path (str): CSV with columns id, time, event and baseline covariates.
        long_path (str): CSV with columns id, time, y and time-varying covariates.
        response_transform (str, optional): 'identity', 'log' or 'sqrt'. Default is 'identity'.

    Raises:
        DataError: Orphan ids, measurement after follow-up, invalid event
            indicators or non-numeric required fields; the message names the row.

    Returns:
        Dataset
    """
    for path in (surv_path, long_path):
        if not path.endswith('.csv'):
            raise DataError(f'Unsupported file format for {path}. Please use .csv files.')
        if not os.path.exists(path):
            raise DataError(f'File {path} not found.')
    surv = pd.read_csv(surv_path, encoding='utf-8')
    long = pd.read_csv(long_path, encoding='utf-8')
    dataset = Dataset(surv, long, id_key, time_key, event_key, response_key)
    return dataset.transformed(response_transform)


def write_dataset(dataset: Dataset, surv_path: str, long_path: str) -> None:
    dataset.surv.to_csv(surv_path, index=False)
    dataset.long.drop(columns='_subject').to_csv(long_path, index=False)


class Archive:
    """
    HDF5 archive of named groups of arrays plus file-level attributes.

    Attributes:
        file_path (str): Path to the .h5 file.
    """

    def __init__(self, file_path: str) -> None:
        if not file_path.endswith(('.h5', '.hdf5')):
            raise ValueError('Unsupported file format. Please use .h5 or .hdf5 files.')
        self.file_path = file_path

    def write(self, groups: dict, attrs: dict = None) -> None:
        """Write all groups at once, replacing any existing file."""
        with h5py.File(self.file_path, 'w') as f:
            for key, value in (attrs or {}).items():
                f.attrs[key] = value
            for name, arrays in groups.items():
                grp = f.create_group(name)
                for key, array in arrays.items():
                    grp.create_dataset(key, data=np.asarray(array))

    def attrs(self) -> dict:
        with h5py.File(self.file_path, 'r') as f:
            return {key: _plain(value) for key, value in f.attrs.items()}

    def keys(self) -> list:
        with h5py.File(self.file_path, 'r') as f:
            return list(f.keys())

    def get_group(self, name: str) -> dict:
        with h5py.File(self.file_path, 'r') as f:
            if name not in f:
                raise KeyError(f'Group {name} not found.')
            return {key: f[name][key][()] for key in f[name].keys()}


def _plain(value):
    if isinstance(value, bytes):
        return value.decode('utf-8')
    if isinstance(value, np.generic):
        return value.item()
    return value
