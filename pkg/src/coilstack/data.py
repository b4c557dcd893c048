"""Coil data model, table I/O and a synthetic fleet generator.

Two data levels exist per coil: rows of four scalar features per channel
(20 rows per measurement event) and one 20x20 noise covariance matrix (NCM)
per measurement. Labels are 0 = normal, 1 = broken.

File formats (UTF-8, LF, ``.`` decimals):

* channel table: ``coil_id,channel_index,noise_level,csp,body_coil_ratio,csp_isocenter_ratio,label``
* NCM table: ``coil_id,label,m_0_0,...,m_19_19`` (row-major), optionally with a
  ``provenance`` column after ``label``.

Measurement events are implicit: the k-th occurrence of a (coil, channel)
pair in a channel table, or of a coil in an NCM table, belongs to event k.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractViolation, ParseError, ValidationError

N_CHANNELS = 20
NORMAL, BROKEN = 0, 1
LABEL_NAMES = ("normal", "broken")
MEASURED, AUGMENTED = "measured", "augmented"
FEATURE_NAMES = ("noise_level", "csp", "body_coil_ratio", "csp_isocenter_ratio")
CHANNEL_HEADER = ("coil_id", "channel_index") + FEATURE_NAMES + ("label",)
MATRIX_COLUMNS = tuple(f"m_{i}_{j}" for i in range(N_CHANNELS) for j in range(N_CHANNELS))
SYMMETRY_TOL = 1e-9
PSD_TOL = 1e-9


@dataclass(frozen=True)
class ChannelSample:
    coil_id: str
    channel_index: int
    features: tuple
    label: int
    event: int = 0


@dataclass(frozen=True, eq=False)
class NcmSample:
    coil_id: str
    matrix: np.ndarray
    label: int
    provenance: str = MEASURED
    event: int = 0


def check_ncm(matrix, where="matrix"):
    """Raise :class:`ValidationError` unless ``matrix`` is a symmetric PSD 20x20 NCM."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (N_CHANNELS, N_CHANNELS):
        raise ValidationError(f"{where}: expected {N_CHANNELS}x{N_CHANNELS}, got {m.shape}")
    if not np.isfinite(m).all():
        raise ValidationError(f"{where}: non-finite entries")
    scale = max(np.abs(m).max(), 1e-300)
    asym = np.abs(m - m.T).max()
    if asym > SYMMETRY_TOL * scale:
        raise ValidationError(f"{where}: not symmetric (max |m - m^T| = {asym:g})")
    if (np.diag(m) < 0).any():
        raise ValidationError(f"{where}: negative diagonal entry")
    eig = np.linalg.eigvalsh((m + m.T) / 2)
    if eig[0] < -PSD_TOL * max(eig[-1], 0.0):
        raise ValidationError(f"{where}: not positive semidefinite (min eigenvalue {eig[0]:g})")
    return m


# ------------------------------------------------------------------ dataset


@dataclass
class Dataset:
    """Column-oriented store of both data levels.

    Channel arrays share length n, NCM arrays length m. Immutable by
    convention; :meth:`subset` returns a new instance.
    """

    channel_coil: np.ndarray
    channel_index: np.ndarray
    channel_event: np.ndarray
    features: np.ndarray
    channel_label: np.ndarray
    ncm_coil: np.ndarray
    ncm_event: np.ndarray
    matrices: np.ndarray
    ncm_label: np.ndarray
    ncm_provenance: np.ndarray
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_samples(cls, channels=(), ncms=(), meta=None):
        channels, ncms = list(channels), list(ncms)
        return cls(
            channel_coil=np.array([c.coil_id for c in channels], dtype=object),
            channel_index=np.array([c.channel_index for c in channels], dtype=np.int64),
            channel_event=np.array([c.event for c in channels], dtype=np.int64),
            features=np.array([c.features for c in channels], dtype=np.float64).reshape(-1, 4),
            channel_label=np.array([c.label for c in channels], dtype=np.int64),
            ncm_coil=np.array([s.coil_id for s in ncms], dtype=object),
            ncm_event=np.array([s.event for s in ncms], dtype=np.int64),
            matrices=np.array([s.matrix for s in ncms], dtype=np.float64).reshape(-1, N_CHANNELS, N_CHANNELS),
            ncm_label=np.array([s.label for s in ncms], dtype=np.int64),
            ncm_provenance=np.array([s.provenance for s in ncms], dtype=object),
            meta=dict(meta or {}),
        )

    def channel_samples(self):
        for i in range(len(self.channel_coil)):
            yield ChannelSample(
                self.channel_coil[i], int(self.channel_index[i]), tuple(self.features[i].tolist()),
                int(self.channel_label[i]), int(self.channel_event[i]),
            )

    def ncm_samples(self):
        for i in range(len(self.ncm_coil)):
            yield NcmSample(
                self.ncm_coil[i], self.matrices[i], int(self.ncm_label[i]), self.ncm_provenance[i], int(self.ncm_event[i])
            )

    def coil_ids(self):
        """All coil ids, lexicographically sorted."""
        return sorted(set(self.channel_coil.tolist()) | set(self.ncm_coil.tolist()))

    def coil_labels(self):
        """Per-coil label: broken iff any record of the coil is broken."""
        labels = dict.fromkeys(self.coil_ids(), NORMAL)
        for cid in self.channel_coil[self.channel_label == BROKEN]:
            labels[cid] = BROKEN
        for cid in self.ncm_coil[self.ncm_label == BROKEN]:
            labels[cid] = BROKEN
        return labels

    def subset(self, coil_ids):
        keep = set(coil_ids)
        c = np.array([cid in keep for cid in self.channel_coil], dtype=bool)
        n = np.array([cid in keep for cid in self.ncm_coil], dtype=bool)
        return Dataset(
            self.channel_coil[c], self.channel_index[c], self.channel_event[c], self.features[c], self.channel_label[c],
            self.ncm_coil[n], self.ncm_event[n], self.matrices[n], self.ncm_label[n], self.ncm_provenance[n],
            dict(self.meta),
        )

    def with_ncms(self, ncms):
        """Copy of this dataset whose NCM level is replaced by ``ncms``."""
        other = Dataset.from_samples((), ncms)
        return Dataset(
            self.channel_coil, self.channel_index, self.channel_event, self.features, self.channel_label,
            other.ncm_coil, other.ncm_event, other.matrices, other.ncm_label, other.ncm_provenance, dict(self.meta),
        )

    def validate(self):
        """Check coil-level consistency and the per-NCM invariants."""
        if not np.isfinite(self.features).all():
            raise ValidationError("channel features must be finite")
        if ((self.channel_index < 0) | (self.channel_index >= N_CHANNELS)).any():
            raise ValidationError("channel_index outside [0, 20)")
        counts = defaultdict(int)
        for cid, ev in zip(self.channel_coil, self.channel_event):
            counts[cid, int(ev)] += 1
        bad = sorted(k for k, v in counts.items() if v != N_CHANNELS)
        if bad:
            raise ValidationError(f"coil {bad[0][0]} event {bad[0][1]} has {counts[bad[0]]} channel rows, expected 20")
        for i, m in enumerate(self.matrices):
            check_ncm(m, where=f"NCM {i} (coil {self.ncm_coil[i]})")
        return self


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class FeatureModel:
    """Normal-class distribution of one feature and its shift under a fault.

    ``log`` features are log-normal: mean/sd/shift apply to the logarithm.
    """

    mean: float
    sd: float
    broken_shift: float
    log: bool = False


DEFAULT_FEATURES = (
    FeatureModel(0.0, 0.25, 0.9, log=True),  # noise_level
    FeatureModel(50.0, 4.0, -12.0),  # csp
    FeatureModel(1.0, 0.08, -0.12),  # body_coil_ratio
    FeatureModel(1.0, 0.08, 0.10),  # csp_isocenter_ratio
)


@dataclass(frozen=True)
class SyntheticSpec:
    coils: int = 1000
    broken_fraction: float = 0.068
    channel_events_per_coil: int = 1
    ncm_per_coil: int = 1
    features: tuple = DEFAULT_FEATURES
    coil_jitter: float = 0.5
    severity_range: tuple = (0.3, 1.5)
    neighbor_leak: float = 0.5
    coupling: float = 0.3
    broken_variance_multiplier: float = 3.0
    noise_samples: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.coils <= 0:
            raise ContractViolation("coil count must be positive")
        if self.channel_events_per_coil < 0 or self.ncm_per_coil < 0:
            raise ContractViolation("measurement counts must be non-negative")
        if not 0 <= self.broken_fraction <= 1:
            raise ContractViolation("broken fraction must lie in [0, 1]")
        if self.noise_samples < 2:
            raise ContractViolation("need at least 2 noise samples per matrix")

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["features"] = {name: asdict(f) for name, f in zip(FEATURE_NAMES, self.features)}
        d["severity_range"] = list(self.severity_range)
        return d


def _ring_distance(n):
    i = np.arange(n)
    d = np.abs(i[:, None] - i[None, :])
    return np.minimum(d, n - d)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Draw a synthetic fleet with the class prior and structure of the real one.

    Broken coils carry 1-3 faulty channels. A fault shifts the channel's
    features and, at ``neighbor_leak`` strength, those of its two ring
    neighbours, which stay labelled normal. Each NCM is the sample covariance
    of correlated channel noise; a faulty channel's noise is scaled by up to
    ``broken_variance_multiplier`` and decorrelated from the baseline.
    """
    rng = np.random.default_rng(spec.seed)
    n = N_CHANNELS
    width = len(str(spec.coils - 1))
    base_corr = spec.coupling ** _ring_distance(n)
    base_chol = np.linalg.cholesky(base_corr)
    lo, hi = spec.severity_range
    channels, ncms = [], []
    for c in range(spec.coils):
        cid = f"coil-{c:0{width}d}"
        broken = rng.random() < spec.broken_fraction
        severity = np.zeros(n)
        if broken:
            k = int(rng.integers(1, 4))
            faulty = rng.choice(n, size=k, replace=False)
            severity[faulty] = rng.uniform(lo, hi, size=k)
        labels = (severity > 0).astype(np.int64)
        leak = spec.neighbor_leak * np.maximum(np.roll(severity, 1), np.roll(severity, -1))
        effect = np.maximum(severity, leak)
        offsets = rng.normal(0.0, spec.coil_jitter, size=(n, len(spec.features)))
        for ev in range(spec.channel_events_per_coil):
            z = rng.normal(size=(n, len(spec.features)))
            cols = []
            for j, fm in enumerate(spec.features):
                v = fm.mean + fm.sd * (offsets[:, j] + z[:, j]) + fm.broken_shift * effect
                cols.append(np.exp(v) if fm.log else v)
            feats = np.column_stack(cols)
            for ch in range(n):
                channels.append(ChannelSample(cid, ch, tuple(feats[ch].tolist()), int(labels[ch]), ev))
        scales = np.exp(rng.normal(0.0, 0.1, size=n))
        var_mult = 1.0 + (spec.broken_variance_multiplier - 1.0) * np.minimum(severity, 1.0)
        for ev in range(spec.ncm_per_coil):
            x = rng.normal(size=(spec.noise_samples, n)) @ base_chol.T
            for b in np.flatnonzero(severity):
                own = rng.normal(size=spec.noise_samples)
                x[:, b] = own * np.sqrt(var_mult[b])
                for nb in ((b - 1) % n, (b + 1) % n):
                    if severity[nb] == 0:
                        x[:, nb] += spec.neighbor_leak * severity[b] * own
            x = x * scales
            x = x - x.mean(axis=0)
            cov = x.T @ x / spec.noise_samples
            cov = (cov + cov.T) / 2
            ncms.append(NcmSample(cid, cov, int(broken), MEASURED, ev))
    return Dataset.from_samples(channels, ncms, meta={"synthetic": True, "generator": spec.to_dict()})


# ---------------------------------------------------------------------- I/O


def _fmt(v):
    return repr(float(v))


def _parse_label(text, line):
    try:
        return LABEL_NAMES.index(text)
    except ValueError:
        raise ParseError(f"label must be 'normal' or 'broken', got {text!r}", line) from None


def _read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        text = fh.read()
    return list(csv.reader(io.StringIO(text)))


def load_channel_table(path):
    rows = _read_rows(path)
    if not rows:
        raise ParseError("missing header row", 1)
    header = tuple(rows[0])
    missing = [c for c in CHANNEL_HEADER if c not in header]
    if missing or header != CHANNEL_HEADER:
        what = f"missing column(s) {', '.join(missing)}" if missing else f"unexpected header {','.join(header)}"
        raise ParseError(what, 1)
    out = []
    events = defaultdict(int)
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(CHANNEL_HEADER):
            raise ParseError(f"expected {len(CHANNEL_HEADER)} fields, got {len(row)}", lineno)
        cid = row[0]
        try:
            ch = int(row[1])
        except ValueError:
            raise ParseError(f"channel_index {row[1]!r} is not an integer", lineno) from None
        if not 0 <= ch < N_CHANNELS:
            raise ParseError(f"channel_index {ch} outside [0, {N_CHANNELS})", lineno)
        feats = []
        for name, text in zip(FEATURE_NAMES, row[2:6]):
            try:
                v = float(text)
            except ValueError:
                raise ParseError(f"{name} {text!r} is not numeric", lineno) from None
            if not np.isfinite(v):
                raise ParseError(f"{name} is not finite", lineno)
            feats.append(v)
        label = _parse_label(row[6], lineno)
        ev = events[cid, ch]
        events[cid, ch] += 1
        out.append(ChannelSample(cid, ch, tuple(feats), label, ev))
    return out


def save_channel_table(samples, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(CHANNEL_HEADER) + "\n")
        for s in samples:
            fields = [s.coil_id, str(s.channel_index), *map(_fmt, s.features), LABEL_NAMES[s.label]]
            fh.write(",".join(fields) + "\n")


def load_ncm_records(path):
    rows = _read_rows(path)
    if not rows:
        raise ParseError("missing header row", 1)
    header = tuple(rows[0])
    has_prov = len(header) > 2 and header[2] == "provenance"
    start = 3 if has_prov else 2
    expected = ("coil_id", "label") + (("provenance",) if has_prov else ()) + MATRIX_COLUMNS
    if header != expected:
        raise ParseError("header must be coil_id,label[,provenance],m_0_0,...,m_19_19", 1)
    out = []
    events = defaultdict(int)
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        values = row[start:]
        if len(values) != N_CHANNELS * N_CHANNELS:
            raise ValidationError(f"record at line {lineno}: expected 400 matrix values, got {len(values)}")
        try:
            m = np.array([float(v) for v in values]).reshape(N_CHANNELS, N_CHANNELS)
        except ValueError:
            raise ParseError("matrix entry is not numeric", lineno) from None
        cid = row[0]
        check_ncm(m, where=f"record at line {lineno} (coil {cid})")
        prov = MEASURED
        if has_prov:
            prov = row[2]
            if prov not in (MEASURED, AUGMENTED):
                raise ParseError(f"provenance must be measured or augmented, got {prov!r}", lineno)
        ev = events[cid]
        events[cid] += 1
        out.append(NcmSample(cid, m, _parse_label(row[1], lineno), prov, ev))
    return out


def save_ncm_records(samples, path, with_provenance=False):
    header = ["coil_id", "label"] + (["provenance"] if with_provenance else []) + list(MATRIX_COLUMNS)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for s in samples:
            fields = [s.coil_id, LABEL_NAMES[s.label]] + ([s.provenance] if with_provenance else [])
            fields += [_fmt(v) for v in np.asarray(s.matrix).ravel()]
            fh.write(",".join(fields) + "\n")


def load_dataset(channel_path=None, ncm_path=None) -> Dataset:
    channels = load_channel_table(channel_path) if channel_path else []
    ncms = load_ncm_records(ncm_path) if ncm_path else []
    return Dataset.from_samples(channels, ncms, meta={"synthetic": False}).validate()
