"""Ingestion, transforms, splits and design matrices for the telemonitoring panel."""

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

# UCI header -> internal identifier, in file order.
UCI_COLUMNS = {
    "subject#": "subject",
    "age": "age",
    "sex": "sex",
    "test_time": "test_time",
    "motor_UPDRS": "motor_updrs",
    "total_UPDRS": "total_updrs",
    "Jitter(%)": "jitter_pct",
    "Jitter(Abs)": "jitter_abs",
    "Jitter:RAP": "jitter_rap",
    "Jitter:PPQ5": "jitter_ppq5",
    "Jitter:DDP": "jitter_ddp",
    "Shimmer": "shimmer",
    "Shimmer(dB)": "shimmer_db",
    "Shimmer:APQ3": "shimmer_apq3",
    "Shimmer:APQ5": "shimmer_apq5",
    "Shimmer:APQ11": "shimmer_apq11",
    "Shimmer:DDA": "shimmer_dda",
    "NHR": "nhr",
    "HNR": "hnr",
    "RPDE": "rpde",
    "DFA": "dfa",
    "PPE": "ppe",
}
HEADER = list(UCI_COLUMNS)
COLUMNS = list(UCI_COLUMNS.values())
VOICE_FEATURES = COLUMNS[6:]
RESPONSE = "total_updrs"
# test_time + 16 voice features, the neural-model input vector
NETWORK_INPUTS = ["test_time", *VOICE_FEATURES]
DEFAULT_STANDARDIZED = ["age", *NETWORK_INPUTS]

_ALIASES = {name.lower(): name for name in COLUMNS}
_ALIASES.update({h.lower(): UCI_COLUMNS[h] for h in HEADER})


def canonical_name(name: str) -> str:
    """Resolve a UCI header or internal identifier (case-insensitive)."""
    try:
        return _ALIASES[name.strip().lower()]
    except KeyError:
        raise KeyError(f"unknown column {name!r}") from None


class SchemaError(ValueError):
    pass


class ObservationRow(NamedTuple):
    subject: int
    age: float
    sex: int
    test_time: float
    motor_updrs: float
    total_updrs: float
    voice: np.ndarray


@dataclass(frozen=True)
class Provenance:
    source: str = ""
    transforms: tuple = ()
    split: str = ""

    def with_transform(self, entry: str) -> "Provenance":
        return replace(self, transforms=self.transforms + (entry,))

    def to_text(self) -> str:
        lines = [f"source={self.source}"]
        lines += [f"transform={t}" for t in self.transforms]
        if self.split:
            lines.append(f"split={self.split}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class PanelDataset:
    """Rows grouped by subject and sorted by test_time within subject.

    ``values`` holds all 22 columns in :data:`COLUMNS` order.  The array is
    read-only; transforms return new datasets.
    """

    values: np.ndarray
    provenance: Provenance = field(default_factory=Provenance)

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1, len(COLUMNS))
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    column_names = COLUMNS

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def __len__(self) -> int:
        return self.n_rows

    def col(self, name: str) -> np.ndarray:
        return self.values[:, COLUMNS.index(canonical_name(name))]

    @property
    def subject_ids(self) -> np.ndarray:
        return self.values[:, 0].astype(np.int64)

    @property
    def subjects(self) -> list:
        ids = self.subject_ids
        if ids.size == 0:
            return []
        keep = np.concatenate([[True], ids[1:] != ids[:-1]])
        return [int(s) for s in ids[keep]]

    @property
    def response(self) -> np.ndarray:
        return self.col(RESPONSE)

    def subject_index(self) -> np.ndarray:
        """Zero-based position of each row's subject in :attr:`subjects`."""
        ids = self.subject_ids
        if ids.size == 0:
            return np.zeros(0, dtype=np.int64)
        return np.cumsum(np.concatenate([[0], ids[1:] != ids[:-1]])).astype(np.int64)

    def group_slices(self) -> list:
        ids = self.subject_ids
        if ids.size == 0:
            return []
        starts = np.flatnonzero(np.concatenate([[True], ids[1:] != ids[:-1]]))
        ends = np.append(starts[1:], ids.size)
        return [slice(int(a), int(b)) for a, b in zip(starts, ends)]

    def group_sizes(self) -> dict:
        return {s: sl.stop - sl.start for s, sl in zip(self.subjects, self.group_slices())}

    @property
    def rows(self):
        for r in self.values:
            yield ObservationRow(int(r[0]), r[1], int(r[2]), r[3], r[4], r[5], r[6:].copy())

    def take(self, mask_or_index, provenance: Optional[Provenance] = None) -> "PanelDataset":
        return PanelDataset(self.values[mask_or_index], provenance or self.provenance)

    def with_column(self, name: str, values, note: str) -> "PanelDataset":
        v = self.values.copy()
        v[:, COLUMNS.index(canonical_name(name))] = values
        return PanelDataset(v, self.provenance.with_transform(note))


def _sorted_by_subject_time(values: np.ndarray) -> np.ndarray:
    # stable on original row order for ties
    order = np.lexsort((np.arange(values.shape[0]), values[:, 3], values[:, 0]))
    return values[order]


def _validate(values: np.ndarray, first_line: int = 2, row_numbers=None) -> None:
    def where(i):
        return row_numbers[i] if row_numbers is not None else i + first_line

    for i, r in enumerate(values):
        if not np.all(np.isfinite(r)):
            raise SchemaError(f"row {where(i)}: non-finite value")
        if r[5] <= 0:
            raise SchemaError(f"row {where(i)}: total_UPDRS must be positive, got {r[5]}")
        if r[0] != int(r[0]):
            raise SchemaError(f"row {where(i)}: subject id must be an integer, got {r[0]}")


def load_csv(path) -> PanelDataset:
    """Read the UCI telemonitoring CSV (header row, 22 columns).

    Raises :class:`SchemaError` naming the offending file row on schema or
    value problems.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: missing header row") from None
        header = [h.strip() for h in header]
        try:
            names = [canonical_name(h) for h in header]
        except KeyError as exc:
            raise SchemaError(f"{path}: {exc.args[0]}") from None
        if names != COLUMNS:
            raise SchemaError(f"{path}: expected {len(COLUMNS)} columns {HEADER}, got {header}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(COLUMNS):
                raise SchemaError(f"row {lineno}: expected {len(COLUMNS)} fields, got {len(rec)}")
            parsed = []
            for name, cell in zip(COLUMNS, rec):
                cell = cell.strip()
                if cell == "" or cell.lower() in ("na", "nan"):
                    raise SchemaError(f"row {lineno}: missing value in column {name}")
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise SchemaError(f"row {lineno}: non-numeric value {cell!r} in column {name}") from None
            rows.append(parsed)
    values = np.array(rows, dtype=float).reshape(-1, len(COLUMNS))
    _validate(values)
    values = _sorted_by_subject_time(values)
    n_subj = len(np.unique(values[:, 0]))
    prov = Provenance(source=str(path), transforms=(f"loaded rows={len(values)} subjects={n_subj}",))
    return PanelDataset(values, prov)


def from_array(values, source: str = "<memory>") -> PanelDataset:
    values = np.asarray(values, dtype=float).reshape(-1, len(COLUMNS))
    _validate(values, first_line=0)
    return PanelDataset(_sorted_by_subject_time(values), Provenance(source=source))


def write_csv(data: PanelDataset, path, sidecar: bool = True) -> None:
    """Write in the UCI format; ``repr`` keeps floats bit-exact on reload."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        for r in data.values:
            w.writerow([str(int(x)) if k in (0,) else repr(float(x)) for k, x in enumerate(r)])
    if sidecar:
        path.with_suffix(path.suffix + ".provenance").write_text(data.provenance.to_text(), encoding="utf-8")


# ---------------------------------------------------------------------------
# splits

@dataclass(frozen=True)
class SplitSpec:
    mode: str = "last_row"
    fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("last_row", "last_fraction"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        if self.mode == "last_fraction" and not 0.0 < self.fraction < 1.0:
            raise ValueError("fraction must lie in (0, 1)")

    def describe(self) -> str:
        if self.mode == "last_row":
            return f"mode=last_row seed={self.seed}"
        return f"mode=last_fraction fraction={self.fraction!r} seed={self.seed}"


def split(data: PanelDataset, spec: SplitSpec):
    """Hold out each subject's latest rows (ties: later file row is later)."""
    test_mask = np.zeros(data.n_rows, dtype=bool)
    for subj, sl in zip(data.subjects, data.group_slices()):
        n_i = sl.stop - sl.start
        k = 1 if spec.mode == "last_row" else math.ceil(spec.fraction * n_i)
        if n_i < k + 1:
            raise ValueError(f"subject {subj} has {n_i} rows; needs at least {k + 1} for {spec.mode}")
        test_mask[sl.stop - k:sl.stop] = True
    desc = spec.describe()
    train = data.take(~test_mask, data.provenance.with_transform(f"split train ({desc})"))
    test = data.take(test_mask, data.provenance.with_transform(f"split test ({desc})"))
    return train, test


# ---------------------------------------------------------------------------
# transforms

@dataclass(frozen=True)
class TransformSpec:
    """Feature standardisation and log response.

    Standardisation statistics use the n-1 divisor and come from the training
    partition only.  ``lognormal_correction`` switches the response
    back-transform from ``exp(mu)`` to ``exp(mu + sigma^2 / 2)``.
    """

    standardize_features: bool = False
    log_response: bool = False
    columns: tuple = tuple(DEFAULT_STANDARDIZED)
    feature_means: Optional[dict] = None
    feature_sds: Optional[dict] = None
    lognormal_correction: bool = False

    @property
    def fitted(self) -> bool:
        return not self.standardize_features or self.feature_means is not None

    def fit(self, train: PanelDataset) -> "TransformSpec":
        if not self.standardize_features:
            return self
        means, sds = {}, {}
        for c in self.columns:
            x = train.col(c)
            sd = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
            if not sd > 1e-12 * max(1.0, float(np.max(np.abs(x)))):
                raise ValueError(f"column {c!r} has zero variance in the training data")
            means[canonical_name(c)] = float(np.mean(x))
            sds[canonical_name(c)] = sd
        return replace(self, feature_means=means, feature_sds=sds)

    def apply(self, data: PanelDataset) -> PanelDataset:
        if not self.fitted:
            raise ValueError("transform statistics have not been fitted")
        v = data.values.copy()
        notes = []
        if self.standardize_features:
            for c, mu in self.feature_means.items():
                k = COLUMNS.index(c)
                v[:, k] = (v[:, k] - mu) / self.feature_sds[c]
            notes.append("standardize " + ",".join(self.feature_means))
        if self.log_response:
            v[:, COLUMNS.index(RESPONSE)] = np.log(v[:, COLUMNS.index(RESPONSE)])
            notes.append("log total_updrs")
        prov = data.provenance
        for n in notes:
            prov = prov.with_transform(n)
        return PanelDataset(v, prov)

    def inverse_response(self, mu, sigma_sq: float = 0.0) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        if not self.log_response:
            return mu
        if self.lognormal_correction:
            return np.exp(mu + 0.5 * sigma_sq)
        return np.exp(mu)


def apply_transforms(train: PanelDataset, test: PanelDataset, spec: TransformSpec):
    fitted = spec.fit(train)
    return fitted.apply(train), fitted.apply(test), fitted


@dataclass(frozen=True)
class ResponseScaling:
    """Standardisation of the response used by the neural models."""

    mean: float = 0.0
    sd: float = 1.0

    @classmethod
    def fit(cls, y) -> "ResponseScaling":
        y = np.asarray(y, dtype=float)
        sd = float(np.std(y, ddof=1))
        if not sd > 0:
            raise ValueError("response has zero variance")
        return cls(float(np.mean(y)), sd)

    def scale(self, y):
        return (np.asarray(y, dtype=float) - self.mean) / self.sd

    def unscale(self, z):
        return np.asarray(z, dtype=float) * self.sd + self.mean


# ---------------------------------------------------------------------------
# design matrices

def _term_column(data: PanelDataset, term: str) -> np.ndarray:
    if term in ("1", "intercept"):
        return np.ones(data.n_rows)
    if ":" in term:
        a, b = term.split(":")
        return data.col(a) * data.col(b)
    return data.col(term)


def normalize_term(term: str) -> str:
    """Canonical term id: ``intercept``, a column id, or ``a:b`` for an interaction."""
    term = term.strip()
    if term in ("1", "intercept"):
        return "intercept"
    for sep in (":", "*", "×"):
        if sep in term:
            parts = [p.strip() for p in term.split(sep)]
            if len(parts) != 2:
                raise KeyError(f"interaction {term!r} must name two columns")
            return ":".join(canonical_name(p) for p in parts)
    return canonical_name(term)


@dataclass
class MixedDesign:
    """Per-subject blocks ``(X_i, Z_i, y_i)`` for a mixed model."""

    X: list
    Z: list
    y: list
    subjects: list
    fixed_names: list
    random_names: list

    @property
    def n_obs(self) -> int:
        return int(sum(len(y) for y in self.y))

    @property
    def p(self) -> int:
        return len(self.fixed_names)

    @property
    def q(self) -> int:
        return len(self.random_names)

    def stacked(self):
        return np.vstack(self.X), np.vstack(self.Z), np.concatenate(self.y)


def term_matrix(data: PanelDataset, terms: Sequence, intercept: bool = True):
    names = (["intercept"] if intercept else []) + [normalize_term(t) for t in terms if normalize_term(t) != "intercept"]
    cols = [_term_column(data, t) for t in names]
    M = np.column_stack(cols) if cols else np.zeros((data.n_rows, 0))
    return M, names


def design_matrices(data: PanelDataset, fixed_terms: Sequence, random_terms: Sequence = ("intercept",),
                    response=None) -> MixedDesign:
    """Build per-subject design blocks.

    ``X_i`` starts with an intercept column followed by ``fixed_terms`` in
    order; ``Z_i`` has one column per entry of ``random_terms``
    (``"intercept"`` or a column name).  Interactions are written ``a:b``.
    """
    X, fixed_names = term_matrix(data, fixed_terms, intercept=True)
    Z, random_names = term_matrix(data, [t for t in random_terms if normalize_term(t) != "intercept"],
                                  intercept="intercept" in [normalize_term(t) for t in random_terms])
    y = data.response if response is None else np.asarray(response, dtype=float)
    slices = data.group_slices()
    return MixedDesign([X[s] for s in slices], [Z[s] for s in slices], [y[s] for s in slices],
                       data.subjects, fixed_names, random_names)


class NetData(NamedTuple):
    """Row-aligned arrays for the neural models."""

    x: np.ndarray  # (n, d) inputs
    y: np.ndarray  # (n,) targets
    seg: np.ndarray  # (n,) zero-based subject position
    subjects: list  # subject id for each position

    @property
    def n(self) -> int:
        return self.y.size

    def counts(self) -> np.ndarray:
        return np.bincount(self.seg, minlength=len(self.subjects))


def network_data(data: PanelDataset, inputs: Sequence = tuple(NETWORK_INPUTS), response=None,
                 subjects: Optional[list] = None) -> NetData:
    """Arrays for the neural models; ``subjects`` fixes the subject positions.

    Rows whose subject is missing from ``subjects`` get position -1.
    """
    x = np.column_stack([data.col(c) for c in inputs]) if inputs else np.zeros((data.n_rows, 0))
    y = data.response if response is None else np.asarray(response, dtype=float)
    subjects = list(data.subjects) if subjects is None else list(subjects)
    pos = {s: k for k, s in enumerate(subjects)}
    seg = np.array([pos.get(int(s), -1) for s in data.subject_ids], dtype=np.int64)
    return NetData(np.ascontiguousarray(x, dtype=float), np.asarray(y, dtype=float), seg, subjects)
