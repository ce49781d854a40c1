"""Location/embedding datasets: synthetic generation with known densities, and file I/O."""

import csv
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import sphere
from .baselines import VmfMixture, VmfParams, mixture_log_density, mixture_sample
from .errors import InputError, ParseError

BIN_MAGIC = b"GFDS"
_BIN_HEAD = struct.Struct("<4sII")


@dataclass
class Dataset:
    lat: np.ndarray
    lon: np.ndarray
    cond: np.ndarray
    labels: np.ndarray = None

    def __post_init__(self):
        self.lat = np.asarray(self.lat, dtype=np.float64)
        self.lon = np.asarray(self.lon, dtype=np.float64)
        self.cond = np.atleast_2d(np.asarray(self.cond, dtype=np.float64))
        n = len(self.lat)
        if self.lon.shape != (n,) or self.cond.shape[0] != n:
            raise InputError("lat, lon and cond must have the same number of rows")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self):
        return len(self.lat)

    @property
    def xyz(self):
        return sphere.latlon_to_unit(self.lat, self.lon)

    @property
    def dim(self):
        return self.cond.shape[1]

    def subset(self, idx):
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.lat[idx], self.lon[idx], self.cond[idx], labels)

    @classmethod
    def from_xyz(cls, xyz, cond, labels=None):
        lat, lon = sphere.unit_to_latlon(xyz)
        return cls(lat, lon, cond, labels)


# synthetic data --------------------------------------------------------------


@dataclass
class SynthSpec:
    """Classes of ground-truth vMF mixtures with one-hot-plus-noise conditioning."""

    mixtures: list
    n_per_class: int = 1000
    embed_dim: int = 8
    noise: float = 0.1
    eval_fraction: float = 0.1

    def __post_init__(self):
        if not self.mixtures:
            raise InputError("need at least one class")
        if self.n_per_class < 1:
            raise InputError("n_per_class must be >= 1")
        if self.embed_dim < len(self.mixtures):
            raise InputError("embed_dim must be at least the number of classes")
        if self.noise < 0:
            raise InputError("noise must be >= 0")
        if not 0 < self.eval_fraction < 1:
            raise InputError("eval_fraction must be in (0, 1)")

    @property
    def n_classes(self):
        return len(self.mixtures)


def single_vmf(lat, lon, conc):
    return VmfMixture((VmfParams(sphere.latlon_to_unit(lat, lon), conc),), np.ones(1))


@dataclass
class TrueDensity:
    """Analytic log-density (nats) of the generating process for each class."""

    mixtures: list
    n_classes: int = field(init=False)

    def __post_init__(self):
        self.n_classes = len(self.mixtures)

    def __call__(self, label, y):
        return mixture_log_density(self.mixtures[label], y)

    def classify(self, cond):
        """Class of each conditioning row: the largest one-hot coordinate."""
        return np.argmax(np.atleast_2d(cond)[:, : self.n_classes], axis=1)

    def log_density(self, cond, y):
        y = np.atleast_2d(y)
        labels = self.classify(cond)
        if len(labels) == 1:
            labels = np.repeat(labels, len(y))
        out = np.empty(len(y))
        for c in np.unique(labels):
            sel = labels == c
            out[sel] = self(c, y[sel])
        return out

    def sample(self, label, rng, n):
        return mixture_sample(self.mixtures[label], rng, n)


def class_code(spec: SynthSpec, label):
    e = np.zeros(spec.embed_dim)
    e[label] = 1.0
    return e


def synth_generate(spec: SynthSpec, seed):
    """Draw ``n_per_class`` points per class and split them 90/10 at random.

    Returns ``(train, eval, truth)`` where ``truth`` evaluates the exact
    class-conditional log-density.
    """
    xyz, cond, labels = [], [], []
    for c, mix in enumerate(spec.mixtures):
        rng = np.random.default_rng([seed, c])
        xyz.append(mixture_sample(mix, rng, spec.n_per_class))
        jitter = spec.noise * rng.standard_normal((spec.n_per_class, spec.embed_dim))
        cond.append(class_code(spec, c) + jitter)
        labels.append(np.full(spec.n_per_class, c))
    xyz, cond, labels = np.concatenate(xyz), np.concatenate(cond), np.concatenate(labels)
    n = len(xyz)
    perm = np.random.default_rng([seed, spec.n_classes]).permutation(n)
    n_eval = max(1, int(round(spec.eval_fraction * n)))
    full = Dataset.from_xyz(xyz, cond, labels)
    return full.subset(np.sort(perm[n_eval:])), full.subset(np.sort(perm[:n_eval])), TrueDensity(list(spec.mixtures))


def buffer_split(ds: Dataset, eval_fraction, buffer_km, seed):
    """Random split that drops training points within ``buffer_km`` of any eval point."""
    if buffer_km < 0:
        raise InputError("buffer_km must be >= 0")
    n = len(ds)
    perm = np.random.default_rng(seed).permutation(n)
    n_eval = max(1, int(round(eval_fraction * n)))
    ev = np.sort(perm[:n_eval])
    tr = np.sort(perm[n_eval:])
    if buffer_km > 0 and len(tr):
        xyz = ds.xyz
        limit = buffer_km / sphere.EARTH_RADIUS_KM
        keep = np.ones(len(tr), dtype=bool)
        for lo in range(0, len(tr), 4096):
            d = np.arccos(np.clip(xyz[tr[lo : lo + 4096]] @ xyz[ev].T, -1.0, 1.0))
            keep[lo : lo + 4096] = d.min(axis=1) > limit
        tr = tr[keep]
    return ds.subset(tr), ds.subset(ev)


# CSV -----------------------------------------------------------------------


def _header(dim):
    return ["lat", "lon"] + [f"e{i}" for i in range(dim)]


def write_csv(path, ds: Dataset):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_header(ds.dim))
        for la, lo, c in zip(ds.lat, ds.lon, ds.cond):
            w.writerow([repr(float(la)), repr(float(lo))] + [repr(float(v)) for v in c])


def iter_csv(path):
    """Yield ``(lat, lon, cond)`` rows one at a time without loading the file."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            head = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        dim = len(head) - 2
        if dim < 1 or head != _header(dim):
            raise ParseError("expected header lat,lon,e0,...,e{D-1}", line=1)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != dim + 2:
                raise ParseError(f"expected {dim + 2} fields, got {len(row)}", line=line)
            try:
                vals = np.array([float(v) for v in row])
            except ValueError as exc:
                raise ParseError(str(exc), line=line) from None
            if not np.all(np.isfinite(vals)):
                raise ParseError("non-finite value", line=line)
            lat, lon = vals[0], vals[1]
            if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
                raise ParseError(f"coordinates out of range ({lat}, {lon})", line=line)
            yield lat, lon, vals[2:]


def read_csv(path):
    lat, lon, cond = [], [], []
    for la, lo, c in iter_csv(path):
        lat.append(la)
        lon.append(lo)
        cond.append(c)
    if not lat:
        raise ParseError("no data rows", line=2)
    return Dataset(np.array(lat), np.array(lon), np.stack(cond))


# binary --------------------------------------------------------------------


def write_binary(path, ds: Dataset):
    """``GFDS`` header, then one float32 row ``lat, lon, e0..`` per record."""
    rows = np.column_stack([ds.lat, ds.lon, ds.cond]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_BIN_HEAD.pack(BIN_MAGIC, len(ds), ds.dim))
        fh.write(rows.tobytes())


def _open_binary(path):
    fh = open(path, "rb")
    head = fh.read(_BIN_HEAD.size)
    if len(head) < _BIN_HEAD.size or head[:4] != BIN_MAGIC:
        fh.close()
        raise ParseError(f"{path}: not a GFDS file", line=0)
    _, count, dim = _BIN_HEAD.unpack(head)
    return fh, count, dim


def iter_binary(path, chunk=65536):
    """Yield ``Dataset`` chunks of at most ``chunk`` rows."""
    fh, count, dim = _open_binary(path)
    width = dim + 2
    with fh:
        done = 0
        while done < count:
            m = min(chunk, count - done)
            buf = fh.read(4 * width * m)
            if len(buf) != 4 * width * m:
                raise ParseError(f"{path}: truncated after {done} records", line=done + 1)
            rows = np.frombuffer(buf, dtype="<f4").reshape(m, width).astype(np.float64)
            done += m
            yield Dataset(rows[:, 0], rows[:, 1], rows[:, 2:])


def read_binary(path):
    parts = list(iter_binary(path))
    if not parts:
        raise ParseError(f"{path}: no records", line=0)
    return Dataset(np.concatenate([p.lat for p in parts]), np.concatenate([p.lon for p in parts]),
                   np.concatenate([p.cond for p in parts]))


def read_dataset(path):
    """Load a dataset by content: ``GFDS`` binary or CSV."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    return read_binary(path) if magic == BIN_MAGIC else read_csv(path)


def write_dataset(path, ds: Dataset):
    path = str(path)
    if path.endswith((".bin", ".gfds")):
        write_binary(path, ds)
    else:
        write_csv(path, ds)


def mixture_from_text(text):
    """Parse ``lat lon conc [weight]`` components separated by ``;``."""
    comps, weights = [], []
    for part in text.split(";"):
        f = part.split()
        if len(f) not in (3, 4):
            raise InputError(f"bad mixture component {part.strip()!r}; expected 'lat lon conc [weight]'")
        lat, lon, conc = map(float, f[:3])
        comps.append(VmfParams(sphere.latlon_to_unit(lat, lon), conc))
        weights.append(float(f[3]) if len(f) == 4 else 1.0)
    w = np.array(weights)
    if np.any(w < 0) or w.sum() <= 0:
        raise InputError("mixture weights must be non-negative with a positive sum")
    return VmfMixture(tuple(comps), w / w.sum())


def random_mixtures(n_classes, n_components, conc, seed):
    """Class mixtures with uniformly placed component means."""
    rng = np.random.default_rng([seed, 7919])
    out = []
    for _ in range(n_classes):
        mus = sphere.sample_uniform_sphere(rng, n_components)
        out.append(VmfMixture(tuple(VmfParams(m, conc) for m in mus), np.full(n_components, 1.0 / n_components)))
    return out


def analytic_nll_bits(truth: TrueDensity, ds: Dataset):
    """NLL in bits/dim of ``ds`` under the generating density."""
    lp = truth.log_density(ds.cond, ds.xyz) if ds.labels is None else np.concatenate(
        [truth(c, ds.xyz[ds.labels == c]) for c in np.unique(ds.labels)])
    return float(-np.mean(lp) / math.log(2.0) / 3.0)
