"""Synthetic RF modulation data, task splitting, augmentation and raw-array storage.

Storage format
--------------
A dataset directory holds ``manifest.json`` plus two flat binary files per
split. ``{split}_x.bin`` is the row-major little-endian array of shape
``[count, *shape]`` in ``dtype`` (``float32`` or ``float64``);
``{split}_y.bin`` holds ``count`` little-endian int64 labels. Example ids are
the row numbers. The manifest::

    {
      "name": "rf8", "modality": "signal1d" | "image2d",
      "classes": ["BPSK", ...], "seed": 0, "dtype": "float32", "shape": [2, 256],
      "splits": {"train": {"count": 3200, "inputs": "train_x.bin",
                           "labels": "train_y.bin", "class_counts": [400, ...]}, ...},
      "generator": {...}            # optional, echo of the generator settings
    }
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .continual import TaskSchedule
from .errors import ConfigurationError, IngestionError

MODULATIONS = ("BPSK", "QPSK", "8PSK", "16QAM", "64QAM", "GFSK", "AM-DSB", "FM")

# modulation -> family; family grouping makes one task per family, in this order
FAMILIES = {
    "BPSK": "psk", "QPSK": "psk", "8PSK": "psk",
    "16QAM": "qam", "64QAM": "qam",
    "GFSK": "fsk",
    "AM-DSB": "analog", "FM": "analog",
}
FAMILY_ORDER = ("psk", "qam", "fsk", "analog")


def _psk(m):
    return np.exp(2j * np.pi * np.arange(m) / m)


def _qam(m):
    k = int(round(np.sqrt(m)))
    levels = np.arange(-(k - 1), k, 2, dtype=np.float64)
    pts = (levels[:, None] + 1j * levels[None, :]).ravel()
    return pts / np.sqrt(np.mean(np.abs(pts) ** 2))


CONSTELLATIONS = {
    "BPSK": np.array([1.0 + 0j, -1.0 + 0j]),
    "QPSK": _psk(4) * np.exp(1j * np.pi / 4),
    "8PSK": _psk(8),
    "16QAM": _qam(16),
    "64QAM": _qam(64),
}


def rrc_taps(sps, rolloff=0.35, span=8):
    """Root-raised-cosine impulse response, ``span * sps + 1`` taps, unit energy."""
    n = np.arange(-span * sps // 2, span * sps // 2 + 1, dtype=np.float64)
    t = n / sps
    b = rolloff
    h = np.empty_like(t)
    for i, ti in enumerate(t):
        if abs(ti) < 1e-12:
            h[i] = 1.0 + b * (4 / np.pi - 1)
        elif b > 0 and abs(abs(ti) - 1 / (4 * b)) < 1e-9:
            h[i] = (b / np.sqrt(2)) * ((1 + 2 / np.pi) * np.sin(np.pi / (4 * b))
                                        + (1 - 2 / np.pi) * np.cos(np.pi / (4 * b)))
        else:
            num = np.sin(np.pi * ti * (1 - b)) + 4 * b * ti * np.cos(np.pi * ti * (1 + b))
            den = np.pi * ti * (1 - (4 * b * ti) ** 2)
            h[i] = num / den
    return h / np.sqrt(np.sum(h ** 2))


def matched_filter_symbols(iq, sps=8, rolloff=0.35, span=8):
    """Matched-filter a pulse-shaped complex signal and sample at symbol instants.

    Inverse of the digital pulse shaping in :func:`generate_rf_dataset` (for
    a signal generated without phase offset); symbols within ``span / 2`` of
    either end are dropped because the filter is not fully supported there.
    """
    h = rrc_taps(sps, rolloff, span)
    if np.ndim(iq) == 2:
        iq = iq[0] + 1j * iq[1]
    r = np.convolve(iq, h) / np.sqrt(sps)
    delay = (len(h) - 1) // 2
    n_sym = len(iq) // sps
    k = np.arange(span // 2, n_sym - span // 2)
    return r[k * sps + delay]


def _digital(mod, L, rng, sps, rolloff, span):
    pts = CONSTELLATIONS[mod]
    n_sym = L // sps + 2 * span + 1
    sym = pts[rng.integers(0, len(pts), n_sym)]
    up = np.zeros(n_sym * sps, dtype=np.complex128)
    up[::sps] = sym
    s = np.convolve(up, rrc_taps(sps, rolloff, span)) * np.sqrt(sps)
    # rrc delay is span*sps/2, a multiple of sps, so symbol peaks stay on multiples of sps
    start = span * sps
    return s[start:start + L]


def _message(L, rng, smooth):
    w = np.hanning(smooth)
    m = np.convolve(rng.standard_normal(L + smooth), w / w.sum(), mode="valid")[:L]
    m = m - m.mean()
    return m / (np.max(np.abs(m)) + 1e-12)


def _gfsk(L, rng, sps, bt=0.35, h=0.5):
    n_sym = L // sps + 4
    bits = rng.integers(0, 2, n_sym) * 2.0 - 1.0
    freq = np.repeat(bits, sps)
    t = np.arange(-2 * sps, 2 * sps + 1) / sps
    sigma = np.sqrt(np.log(2)) / (2 * np.pi * bt)
    g = np.exp(-t ** 2 / (2 * sigma ** 2))
    freq = np.convolve(freq, g / g.sum(), mode="same")
    phase = np.pi * h * np.cumsum(freq) / sps
    return np.exp(1j * phase[2 * sps:2 * sps + L])


def _synthesize(mod, L, rng, sps, rolloff, span):
    if mod in CONSTELLATIONS:
        return _digital(mod, L, rng, sps, rolloff, span)
    if mod == "GFSK":
        return _gfsk(L, rng, sps)
    if mod == "AM-DSB":
        s = (1.0 + 0.5 * _message(L, rng, 4 * sps)).astype(np.complex128)
    elif mod == "FM":
        s = np.exp(1j * 2 * np.pi * 0.05 * np.cumsum(_message(L, rng, 4 * sps)))
    else:
        raise ValueError(f"unsupported modulation {mod!r}; supported: {MODULATIONS}")
    return s / np.sqrt(np.mean(np.abs(s) ** 2))


@dataclass
class RFDataset:
    x: np.ndarray           # [N, 2, L] in-phase / quadrature
    y: np.ndarray           # [N] modulation index into ``classes``
    snr_db: np.ndarray      # [N]
    classes: list
    clean: Optional[np.ndarray] = None


def generate_rf_dataset(mod_set=MODULATIONS, n_per_class=500, L=1024, snr_db=10.0, seed=0,
                        sps=8, rolloff=0.35, span=8, random_phase=True, dtype=np.float32,
                        return_clean=False):
    """Generate ``n_per_class`` noisy baseband examples for every modulation in ``mod_set``.

    Digital modulations are random symbol streams shaped by a root-raised
    cosine filter and scaled to unit nominal power; analog ones are unit
    power. A uniform random phase rotation (optional) and complex white
    Gaussian noise of power ``10 ** (-snr_db / 10)`` follow. Example ``i`` of
    class ``c`` draws from ``numpy.random.default_rng([seed, c, i])``.
    """
    mod_set = list(mod_set)
    for mod in mod_set:
        if mod not in MODULATIONS:
            raise ValueError(f"unsupported modulation {mod!r}; supported: {MODULATIONS}")
    if int(n_per_class) < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    noise_power = 10.0 ** (-float(snr_db) / 10.0)
    n = len(mod_set) * n_per_class
    x = np.empty((n, 2, L), dtype=dtype)
    clean = np.empty((n, 2, L), dtype=np.float64) if return_clean else None
    y = np.repeat(np.arange(len(mod_set), dtype=np.int64), n_per_class)
    row = 0
    for c, mod in enumerate(mod_set):
        for i in range(n_per_class):
            rng = np.random.default_rng([int(seed), c, i])
            s = _synthesize(mod, L, rng, sps, rolloff, span)
            if random_phase:
                s = s * np.exp(1j * rng.uniform(0, 2 * np.pi))
            noise = np.sqrt(noise_power / 2) * (rng.standard_normal(L) + 1j * rng.standard_normal(L))
            r = s + noise
            x[row, 0], x[row, 1] = r.real, r.imag
            if return_clean:
                clean[row, 0], clean[row, 1] = s.real, s.imag
            row += 1
    return RFDataset(x=x, y=y, snr_db=np.full(n, float(snr_db)), classes=mod_set, clean=clean)


def stratified_splits(y, fractions, seed=0):
    """Partition example ids per class by ``fractions`` (dict name -> share, summing to 1).

    Returns dict name -> sorted index array. Rounding leftovers go to the
    last split.
    """
    names = list(fractions)
    shares = np.array([fractions[k] for k in names], dtype=np.float64)
    if np.any(shares <= 0) or abs(shares.sum() - 1) > 1e-9:
        raise ConfigurationError(f"split fractions must be positive and sum to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    out = {k: [] for k in names}
    for c in np.unique(y):
        idx = rng.permutation(np.nonzero(y == c)[0])
        cuts = np.floor(np.cumsum(shares)[:-1] * len(idx) + 0.5).astype(int)
        for k, part in zip(names, np.split(idx, cuts)):
            out[k].append(part)
    return {k: np.sort(np.concatenate(v)) for k, v in out.items()}


def split_tasks(class_ids, n_tasks=None, grouping="contiguous", explicit=None, class_names=None):
    """Partition classes into tasks.

    ``contiguous`` slices ``class_ids`` in order into ``n_tasks`` equal groups;
    ``family`` makes one task per modulation family present (see
    ``FAMILIES`` / ``FAMILY_ORDER``; needs ``class_names``); ``explicit`` takes
    the list of per-task class lists as given.
    """
    class_ids = [int(c) for c in class_ids]
    if grouping == "explicit":
        if explicit is None:
            raise ConfigurationError("grouping 'explicit' needs the per-task class lists")
        tasks = [tuple(int(c) for c in t) for t in explicit]
    elif grouping == "contiguous":
        if not n_tasks or len(class_ids) % int(n_tasks):
            raise ConfigurationError(f"{n_tasks} tasks do not divide {len(class_ids)} classes")
        k = len(class_ids) // int(n_tasks)
        tasks = [tuple(class_ids[i:i + k]) for i in range(0, len(class_ids), k)]
    elif grouping == "family":
        if class_names is None:
            raise ConfigurationError("grouping 'family' needs class names")
        fam = {}
        for c, name in zip(class_ids, class_names):
            if name not in FAMILIES:
                raise ConfigurationError(f"no family known for class {name!r}")
            fam.setdefault(FAMILIES[name], []).append(c)
        tasks = [tuple(fam[f]) for f in FAMILY_ORDER if f in fam]
        if n_tasks is not None and len(tasks) != int(n_tasks):
            raise ConfigurationError(
                f"family grouping yields {len(tasks)} tasks, {n_tasks} requested")
    else:
        raise ConfigurationError(f"unknown grouping {grouping!r}")
    if n_tasks is not None and len(tasks) != int(n_tasks):
        raise ConfigurationError(f"grouping has {len(tasks)} tasks, {n_tasks} requested")
    schedule = TaskSchedule(tasks)
    if sorted(schedule.classes) != sorted(class_ids):
        raise ConfigurationError(
            f"grouping covers classes {sorted(schedule.classes)}, expected {sorted(class_ids)}")
    return schedule


def hflip(x):
    return x[..., ::-1].copy()


def augment_image(x, seed=None, flip=None, crop=True, pad=4, rng=None):
    """Random horizontal flip (p=0.5) and random crop after ``pad``-pixel zero padding.

    ``x`` is ``[C, H, W]``. ``flip`` forces (True) or suppresses (False) the
    flip. Evaluation code simply does not call this.
    """
    rng = np.random.default_rng(seed) if rng is None else rng
    x = np.asarray(x)
    do_flip = bool(rng.random() < 0.5) if flip is None else bool(flip)
    if do_flip:
        x = hflip(x)
    if crop and pad > 0:
        h, w = x.shape[-2:]
        padded = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)])
        i, j = rng.integers(0, 2 * pad + 1, size=2)
        x = padded[..., i:i + h, j:j + w]
    return np.ascontiguousarray(x)


@dataclass
class DatasetManifest:
    name: str
    modality: str
    classes: list
    splits: dict
    seed: int
    dtype: str
    shape: list
    generator: dict = field(default_factory=dict)
    root: Optional[Path] = None

    def __post_init__(self):
        if self.modality not in ("signal1d", "image2d"):
            raise ConfigurationError(f"unknown modality {self.modality!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"unsupported dtype {self.dtype!r}")

    def to_dict(self):
        d = {"name": self.name, "modality": self.modality, "classes": list(self.classes),
             "seed": int(self.seed), "dtype": self.dtype, "shape": list(self.shape),
             "splits": self.splits}
        if self.generator:
            d["generator"] = self.generator
        return d

    @classmethod
    def load(cls, path):
        path = Path(path)
        d = json.loads(path.read_text(encoding="utf-8"))
        try:
            return cls(name=d["name"], modality=d["modality"], classes=list(d["classes"]),
                       splits=d["splits"], seed=int(d["seed"]), dtype=d["dtype"],
                       shape=list(d["shape"]), generator=d.get("generator", {}), root=path.parent)
        except KeyError as exc:
            raise IngestionError(f"manifest {path} lacks field {exc}") from exc


def write_dataset(out_dir, name, modality, classes, splits, seed, dtype="float32", generator=None):
    """Write ``splits`` (dict name -> (x, y)) as flat binaries plus ``manifest.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    np_dtype = np.dtype(dtype).newbyteorder("<")
    shape = None
    entries = {}
    for split, (x, y) in splits.items():
        x = np.ascontiguousarray(x, dtype=np_dtype)
        y = np.ascontiguousarray(y, dtype=np.dtype("<i8"))
        if shape is None:
            shape = list(x.shape[1:])
        (out_dir / f"{split}_x.bin").write_bytes(x.tobytes(order="C"))
        (out_dir / f"{split}_y.bin").write_bytes(y.tobytes(order="C"))
        entries[split] = {"count": int(len(y)), "inputs": f"{split}_x.bin", "labels": f"{split}_y.bin",
                          "class_counts": [int(np.sum(y == c)) for c in range(len(classes))]}
    manifest = DatasetManifest(name=name, modality=modality, classes=list(classes), splits=entries,
                               seed=int(seed), dtype=dtype, shape=shape or [], generator=generator or {})
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8")
    return path


def read_dataset(manifest_path):
    """Read every split listed in a manifest; returns (manifest, dict split -> (x, y))."""
    manifest = (manifest_path if isinstance(manifest_path, DatasetManifest)
                else DatasetManifest.load(manifest_path))
    root = manifest.root or Path(".")
    np_dtype = np.dtype(manifest.dtype).newbyteorder("<")
    record = int(np.prod(manifest.shape)) * np_dtype.itemsize
    out = {}
    for split, entry in manifest.splits.items():
        count = int(entry["count"])
        raw = (root / entry["inputs"]).read_bytes()
        if len(raw) != count * record:
            bad = min(len(raw) // record, count)
            raise IngestionError(
                f"split '{split}': {entry['inputs']} holds {len(raw)} bytes, expected "
                f"{count} records of {record} bytes; first bad record index {bad}", record=bad)
        labels = np.frombuffer((root / entry["labels"]).read_bytes(), dtype="<i8")
        if len(labels) != count:
            bad = min(len(labels), count)
            raise IngestionError(
                f"split '{split}': {len(labels)} labels for {count} records; first bad record index {bad}",
                record=bad)
        out_of_range = np.nonzero((labels < 0) | (labels >= len(manifest.classes)))[0]
        if len(out_of_range):
            bad = int(out_of_range[0])
            raise IngestionError(f"split '{split}': record {bad} has label {labels[bad]} outside "
                                 f"0..{len(manifest.classes) - 1}", record=bad)
        x = np.frombuffer(raw, dtype=np_dtype).reshape([count] + list(manifest.shape))
        out[split] = (x.astype(manifest.dtype), labels.astype(np.int64))
    return manifest, out


def load_image_dataset(manifest_path):
    """Read an ``image2d`` dataset normalized per channel with training-split statistics."""
    manifest, splits = read_dataset(manifest_path)
    if manifest.modality != "image2d":
        raise IngestionError(f"dataset {manifest.name!r} has modality {manifest.modality}, expected image2d")
    if "train" not in splits:
        raise IngestionError("image dataset needs a 'train' split for normalization statistics")
    xt = splits["train"][0].astype(np.float64)
    axes = (0,) + tuple(range(2, xt.ndim))
    mean = xt.mean(axis=axes, keepdims=True)
    std = xt.std(axis=axes, keepdims=True)
    std[std == 0] = 1.0
    out = {k: (((x.astype(np.float64) - mean) / std).astype(manifest.dtype), y) for k, (x, y) in splits.items()}
    return manifest, out
