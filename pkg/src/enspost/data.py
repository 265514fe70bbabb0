"""ETNS tensor files, grids, normalization, dataset manifests and the synthetic generator.

ETNS layout (all integers little-endian)::

    offset 0   4 bytes  magic "ETNS"
    offset 4   u8       version (1)
    offset 5   u8       dtype (1 = float32, 2 = float64)
    offset 6   u8       ndim
    offset 7   u8       reserved (0)
    offset 8   ndim x u32 dims
    ...        row-major IEEE-754 payload
"""
from __future__ import annotations

import datetime as dt
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

MAGIC = b"ETNS"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
VARIABLES = ("geopotential_proxy", "midlevel_temperature_proxy", "surface_temperature")
SURFACE = 2


# -- ETNS ------------------------------------------------------------------

def tensor_to_bytes(array):
    array = np.asarray(array)
    if array.dtype == np.float32:
        code = 1
    elif array.dtype == np.float64:
        code = 2
    else:
        raise FormatError(f"unsupported dtype {array.dtype} (ETNS stores float32/float64)")
    if array.ndim > 255:
        raise FormatError("too many dimensions for ETNS")
    header = MAGIC + struct.pack("<BBBB", VERSION, code, array.ndim, 0)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes()


def tensor_from_bytes(buf, offset=0):
    """Decode one ETNS record starting at ``offset``; returns ``(array, end_offset)``."""
    buf = memoryview(buf)
    if len(buf) - offset < 8:
        raise FormatError("truncated ETNS header", offset + len(buf[offset:]))
    if bytes(buf[offset:offset + 4]) != MAGIC:
        raise FormatError("bad magic bytes", offset)
    version, code, ndim, reserved = struct.unpack_from("<BBBB", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported ETNS version {version}", offset + 4)
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}", offset + 5)
    if reserved != 0:
        raise FormatError("reserved byte is not zero", offset + 7)
    pos = offset + 8
    if len(buf) - pos < 4 * ndim:
        raise FormatError("truncated dimension list", len(buf))
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    dtype = DTYPE_CODES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - pos < nbytes:
        raise FormatError(f"truncated payload: expected {nbytes} bytes, found {len(buf) - pos}", len(buf))
    arr = np.frombuffer(buf[pos:pos + nbytes], dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return arr, pos + nbytes


def write_tensor(path, array):
    Path(path).write_bytes(tensor_to_bytes(array))


def read_tensor(path):
    buf = Path(path).read_bytes()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after payload", end)
    return arr


# -- named-tensor container (checkpoints) ----------------------------------

CONTAINER_MAGIC = b"ETNC"


def write_container(path, tensors, document):
    """Write named ETNS records plus a JSON document into one file.

    ``tensors`` is an ordered mapping name -> array; ordering is preserved.
    """
    doc = json.dumps(document, sort_keys=True, separators=(",", ":")).encode()
    parts = [CONTAINER_MAGIC, struct.pack("<BBBBI", VERSION, 0, 0, 0, len(doc)), doc,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode()
        blob = tensor_to_bytes(arr)
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<Q", len(blob)), blob]
    Path(path).write_bytes(b"".join(parts))


def read_container(path):
    buf = Path(path).read_bytes()
    if len(buf) < 12:
        raise FormatError("truncated container header", len(buf))
    if buf[:4] != CONTAINER_MAGIC:
        raise FormatError("bad container magic", 0)
    version, _, _, _, doc_len = struct.unpack_from("<BBBBI", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}", 4)
    pos = 12
    try:
        document = json.loads(buf[pos:pos + doc_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable container document: {exc}", pos) from exc
    pos += doc_len
    if len(buf) < pos + 4:
        raise FormatError("truncated tensor count", len(buf))
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        if len(buf) < pos + 2:
            raise FormatError("truncated tensor name", len(buf))
        (nlen,) = struct.unpack_from("<H", buf, pos)
        name = buf[pos + 2:pos + 2 + nlen].decode()
        pos += 2 + nlen
        if len(buf) < pos + 8:
            raise FormatError("truncated tensor length", len(buf))
        (blen,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        arr, end = tensor_from_bytes(buf[:pos + blen], pos)
        tensors[name] = arr
        pos = end
    return tensors, document


# -- grid ------------------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    h: int
    w: int
    lat: np.ndarray = field(repr=False)
    lon: np.ndarray = field(repr=False)
    lat_weights: np.ndarray = field(repr=False)

    @property
    def weights2d(self):
        return np.repeat(self.lat_weights[:, None], self.w, axis=1)


def build_grid(h, w):
    """Equiangular cell-centre grid with cos-latitude weights normalized to mean one."""
    if h < 1 or w < 1:
        raise ConfigError(f"grid needs positive size, got {h}x{w}")
    dlat = 180.0 / h
    dlon = 360.0 / w
    lat = -90.0 + dlat * (np.arange(h) + 0.5)
    lon = dlon * (np.arange(w) + 0.5)
    cos = np.cos(np.deg2rad(lat))
    return Grid(h, w, lat, lon, cos / cos.mean())


# -- samples and datasets --------------------------------------------------

@dataclass
class SampleRecord:
    id: str
    valid_time: str
    inputs: np.ndarray  # (k, 3, h, w)
    target: np.ndarray  # (h, w)

    @property
    def k(self):
        return self.inputs.shape[0]


class EnsembleDataset:
    """Stacked samples sharing one ensemble size and grid."""

    def __init__(self, ids, valid_times, inputs, targets):
        self.ids = list(ids)
        self.valid_times = list(valid_times)
        self.inputs = np.asarray(inputs)
        self.targets = np.asarray(targets)
        n = len(self.ids)
        if self.inputs.ndim != 5 or self.inputs.shape[0] != n or self.inputs.shape[2] != len(VARIABLES):
            raise DataError(f"inputs must be (n, k, {len(VARIABLES)}, h, w) with n={n}, got {self.inputs.shape}")
        if self.targets.shape != (n,) + self.inputs.shape[3:]:
            raise DataError(f"targets shape {self.targets.shape} does not match inputs {self.inputs.shape}")
        if self.inputs.shape[1] < 2:
            raise DataError("samples need at least two ensemble members")

    def __len__(self):
        return len(self.ids)

    @property
    def k(self):
        return self.inputs.shape[1]

    @property
    def grid_shape(self):
        return self.inputs.shape[3:]

    def record(self, i):
        return SampleRecord(self.ids[i], self.valid_times[i], self.inputs[i], self.targets[i])

    def __iter__(self):
        return (self.record(i) for i in range(len(self)))

    def subset(self, index):
        index = list(index)
        return EnsembleDataset([self.ids[i] for i in index], [self.valid_times[i] for i in index],
                               self.inputs[index], self.targets[index])

    def members(self, count):
        """Dataset restricted to the first ``count`` members."""
        return EnsembleDataset(self.ids, self.valid_times, self.inputs[:, :count], self.targets)

    def astype(self, dtype):
        return EnsembleDataset(self.ids, self.valid_times, self.inputs.astype(dtype), self.targets.astype(dtype))


# -- normalization ---------------------------------------------------------

@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self):
        return {"variables": list(VARIABLES), "mean": [float(m) for m in self.mean],
                "std": [float(s) for s in self.std]}

    @classmethod
    def from_dict(cls, doc):
        mean, std = np.asarray(doc["mean"], float), np.asarray(doc["std"], float)
        if mean.shape != (len(VARIABLES),) or std.shape != mean.shape or np.any(std <= 0):
            raise DataError("normalization stats need one positive std per input variable")
        return cls(mean, std)


def fit_normalization(train):
    """Global per-variable mean/std over all training samples, members and cells."""
    x = train.inputs.astype(np.float64)
    mean = x.mean(axis=(0, 1, 3, 4))
    std = x.std(axis=(0, 1, 3, 4))
    bad = [VARIABLES[i] for i in np.flatnonzero(~(std > 1e-12))]
    if bad:
        raise DataError(f"degenerate (constant) input variable(s) {bad}; inspect the data before normalizing")
    return NormStats(mean, std)


def apply_normalization(data, stats):
    """Normalize inputs of a dataset or sample; targets stay in physical units."""
    shape = (len(VARIABLES), 1, 1)
    if isinstance(data, SampleRecord):
        x = data.inputs
        norm = ((x - stats.mean.reshape(shape)) / stats.std.reshape(shape)).astype(x.dtype)
        return SampleRecord(data.id, data.valid_time, norm, data.target)
    x = data.inputs
    norm = ((x - stats.mean.reshape(shape)) / stats.std.reshape(shape)).astype(x.dtype)
    return EnsembleDataset(data.ids, data.valid_times, norm, data.targets)


# -- synthetic generator ---------------------------------------------------

@dataclass
class GenParams:
    n_modes: int = 8
    sigma_mem: float = 0.5
    sigma_err: float = 0.8
    coupling: tuple = (0.8, 0.9, 1.0)
    offset: tuple = (1.0, 0.5, 0.7)

    def validate(self):
        if self.n_modes < 1:
            raise ConfigError("n_modes must be >= 1")
        if self.sigma_mem < 0 or self.sigma_err < 0:
            raise ConfigError("generator standard deviations must be non-negative")
        if len(self.coupling) != len(VARIABLES) or len(self.offset) != len(VARIABLES):
            raise ConfigError(f"coupling and offset need {len(VARIABLES)} entries")

    def to_dict(self):
        d = asdict(self)
        d["coupling"] = list(self.coupling)
        d["offset"] = list(self.offset)
        return d

    @classmethod
    def from_dict(cls, doc):
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown generator keys: {sorted(unknown)}")
        p = cls(**doc)
        p.coupling, p.offset = tuple(p.coupling), tuple(p.offset)
        p.validate()
        return p


def _mode_weights(n_modes):
    return 1.0 / np.arange(1, n_modes + 1)


def truth_variance(n_modes):
    """Pointwise variance of the truth field: sum_p 1 / (2 p^2)."""
    return float(np.sum(_mode_weights(n_modes) ** 2) / 2)


def harmonic_fields(rng, count, h, w, n_modes, std=None):
    """``count`` random fields sum_p (a_p / p) cos(2 pi (fx x / w + fy y / h) + phi_p).

    With ``std`` given, fields are rescaled so the pointwise standard deviation
    is ``std`` in expectation.
    """
    a = rng.standard_normal((count, n_modes))
    f_lon = rng.integers(0, 5, (count, n_modes))
    f_lat = rng.integers(0, 5, (count, n_modes))
    phi = rng.uniform(0, 2 * np.pi, (count, n_modes))
    x = np.arange(w) / w
    y = np.arange(h) / h
    phase = 2 * np.pi * (f_lon[..., None, None] * x[None, None, None, :]
                         + f_lat[..., None, None] * y[None, None, :, None]) + phi[..., None, None]
    amp = a * _mode_weights(n_modes)
    fields = np.einsum("np,npyx->nyx", amp, np.cos(phase))
    if std is not None:
        fields *= std / math.sqrt(truth_variance(n_modes))
    return fields


def generate_synthetic(n_samples, k, grid, gen_params=None, seed=0, start="2017-01-01T00:00:00",
                       dtype=np.float32, id_prefix="s"):
    """Biased, underdispersive synthetic ensembles with a known truth.

    member i, variable v: ``c_v T + b_v + E_v + eta_{i,v}``; target ``T``.
    """
    p = gen_params or GenParams()
    p.validate()
    if k < 2:
        raise ConfigError("ensemble size must be at least 2")
    rng = np.random.default_rng(seed)
    nv = len(VARIABLES)
    c = np.asarray(p.coupling, float)[:, None, None]
    b = np.asarray(p.offset, float)[:, None, None]
    inputs = np.empty((n_samples, k, nv, grid.h, grid.w), dtype=dtype)
    targets = np.empty((n_samples, grid.h, grid.w), dtype=dtype)
    t0 = dt.datetime.fromisoformat(start)
    ids, times = [], []
    for s in range(n_samples):
        truth = harmonic_fields(rng, 1, grid.h, grid.w, p.n_modes)[0]
        err = harmonic_fields(rng, nv, grid.h, grid.w, p.n_modes, p.sigma_err)
        noise = harmonic_fields(rng, k * nv, grid.h, grid.w, p.n_modes, p.sigma_mem)
        noise = noise.reshape(k, nv, grid.h, grid.w)
        inputs[s] = c * truth + b + err + noise
        targets[s] = truth
        ids.append(f"{id_prefix}{s:05d}")
        times.append((t0 + dt.timedelta(hours=12 * s)).isoformat())
    return EnsembleDataset(ids, times, inputs, targets)


def analytic_spread_skill(gen_params, k, ddof=1, variable=SURFACE):
    """Expected (spread, rmse, ratio) of the raw ensemble of one input variable."""
    p = gen_params
    c, b = p.coupling[variable], p.offset[variable]
    spread2 = p.sigma_mem ** 2 * (k - 1) / (k - ddof)
    mse = (c - 1) ** 2 * truth_variance(p.n_modes) + b ** 2 + p.sigma_err ** 2 + p.sigma_mem ** 2 / k
    return math.sqrt(spread2), math.sqrt(mse), math.sqrt(spread2 / mse)


# -- manifests and splits --------------------------------------------------

SPLITS = ("train", "validation", "test")


@dataclass
class DatasetManifest:
    h: int
    w: int
    k: int
    records: list            # dicts: id, valid_time, inputs, target, split
    split_seed: int = 0
    val_fraction: float = 0.1
    extra: dict = field(default_factory=dict)

    def ids(self, split):
        return [r["id"] for r in self.records if r["split"] == split]

    def to_dict(self):
        return {"format": "enspost-manifest", "version": 1,
                "grid": {"h": self.h, "w": self.w}, "k": self.k,
                "split_seed": self.split_seed, "val_fraction": self.val_fraction,
                "splits": {s: self.ids(s) for s in SPLITS},
                "records": self.records, "extra": self.extra}

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format") != "enspost-manifest" or doc.get("version") != 1:
            raise DataError("not an enspost manifest (format/version mismatch)")
        m = cls(doc["grid"]["h"], doc["grid"]["w"], doc["k"], doc["records"],
                doc.get("split_seed", 0), doc.get("val_fraction", 0.1), doc.get("extra", {}))
        for r in m.records:
            if r.get("split") not in SPLITS:
                raise DataError(f"record {r.get('id')} has invalid split {r.get('split')!r}")
        return m


def split_dataset(manifest, val_fraction=0.1, seed=0):
    """Randomly reassign train/validation among the non-test records.

    The validation count is ``floor(n * val_fraction)`` (a 1e-9 guard absorbs
    binary rounding, so 1/9 of 576 gives 64).
    """
    if not 0 <= val_fraction < 1:
        raise ConfigError("val_fraction must be in [0, 1)")
    pool = [i for i, r in enumerate(manifest.records) if r["split"] != "test"]
    n_val = int(math.floor(len(pool) * val_fraction + 1e-9))
    order = np.random.default_rng(seed).permutation(len(pool))
    val = {pool[j] for j in order[:n_val]}
    records = []
    for i, r in enumerate(manifest.records):
        r = dict(r)
        if r["split"] != "test":
            r["split"] = "validation" if i in val else "train"
        records.append(r)
    return DatasetManifest(manifest.h, manifest.w, manifest.k, records, seed, val_fraction,
                           dict(manifest.extra))


def write_dataset(directory, dataset, splits):
    """Write one inputs/target ETNS pair per sample and return a manifest."""
    directory = Path(directory)
    (directory / "samples").mkdir(parents=True, exist_ok=True)
    records = []
    for rec, split in zip(dataset, splits):
        inp = f"samples/{rec.id}_inputs.etns"
        tgt = f"samples/{rec.id}_target.etns"
        write_tensor(directory / inp, rec.inputs)
        write_tensor(directory / tgt, rec.target)
        records.append({"id": rec.id, "valid_time": rec.valid_time, "inputs": inp,
                        "target": tgt, "split": split})
    h, w = dataset.grid_shape
    return DatasetManifest(h, w, dataset.k, records)


def save_manifest(path, manifest):
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=1, sort_keys=True) + "\n")


def load_manifest(path):
    try:
        return DatasetManifest.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc


def load_split(directory, split, manifest=None):
    """Load every record of ``split`` into an :class:`EnsembleDataset`."""
    directory = Path(directory)
    manifest = manifest or load_manifest(directory / "manifest.json")
    recs = [r for r in manifest.records if r["split"] == split]
    if not recs:
        raise DataError(f"split {split!r} is empty")
    inputs = np.stack([read_tensor(directory / r["inputs"]) for r in recs])
    targets = np.stack([read_tensor(directory / r["target"]) for r in recs])
    if inputs.shape[1] != manifest.k or inputs.shape[3:] != (manifest.h, manifest.w):
        raise DataError(f"stored inputs {inputs.shape[1:]} disagree with manifest grid/k")
    return EnsembleDataset([r["id"] for r in recs], [r["valid_time"] for r in recs], inputs, targets)


def save_norm_stats(path, stats):
    Path(path).write_text(json.dumps(stats.to_dict(), indent=1) + "\n")


def load_norm_stats(path):
    try:
        return NormStats.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"cannot read normalization stats {path}: {exc}") from exc
