"""Vibration dataset pipeline: MAT ingest, FFT windows, splits, batches.

Raw recordings are chunked into 2048-sample windows; each window is
de-meaned, transformed with a real FFT, reduced to the magnitudes of
bins 0..1023, and standardized per window so inference never needs
corpus-level statistics.  A manifest records every window's origin,
label, and split assignment plus all preprocessing parameters, and a
deterministic synthetic corpus provides a CI stand-in for the real
bearing data.
"""

from __future__ import annotations

import fnmatch
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .matfile import parse_mat
from .models import NUM_CLASSES

log = logging.getLogger(__name__)

WINDOW_RAW = 2048
FFT_BINS = WINDOW_RAW // 2
SAMPLE_RATE = 12000.0
WINDOWS_PER_CLASS = 280

MANIFEST_FORMAT = "dkdl-manifest"
MANIFEST_VERSION = 1

FEATURE_MAGIC = b"DKDW"

# Default drive-end file numbering for the 12 kHz bearing corpus, one
# load condition.  Matching is first-line-wins, so the healthy pattern
# sits last: "*97*" would otherwise swallow the 197 outer-race file.
DEFAULT_LABEL_MAP = (
    ("*118*", 1, 0.18),
    ("*185*", 2, 0.36),
    ("*222*", 3, 0.53),
    ("*130*", 4, 0.18),
    ("*197*", 5, 0.36),
    ("*234*", 6, 0.53),
    ("*105*", 7, 0.18),
    ("*169*", 8, 0.36),
    ("*209*", 9, 0.53),
    ("*97*", 0, 0.0),
)

DRIVE_END_PATTERN = "*_DE_time"


@dataclass
class RawRecording:
    """One accelerometer channel pulled out of a source file."""

    signal: np.ndarray
    sample_rate: float
    source_file: str
    variable_name: str


@dataclass
class SampleWindow:
    """A single preprocessed window: 1024 features plus provenance."""

    features: np.ndarray
    label: int
    origin: tuple


@dataclass
class ManifestEntry:
    file: str
    variable: str
    label: int
    fault_size_mm: float
    hop: int
    num_windows: int


@dataclass
class WindowRecord:
    entry: int
    offset: int
    label: int
    split: str


@dataclass
class DatasetManifest:
    """Everything needed to rebuild or audit a dataset, minus raw bytes.

    ``features`` holds the in-memory feature matrix aligned with
    ``windows`` and is never serialized into the JSON document; it
    travels separately as a flat binary cache.
    """

    entries: list = field(default_factory=list)
    windows: list = field(default_factory=list)
    seed: int = 0
    split_ratio: float = 0.8
    window_raw: int = WINDOW_RAW
    fft_bins: int = FFT_BINS
    sample_rate: float = SAMPLE_RATE
    source: str = "synthetic"
    features: np.ndarray | None = None

    def split_indices(self, split):
        _check_split_name(split)
        return np.array(
            [i for i, w in enumerate(self.windows) if w.split == split], dtype=np.int64
        )

    def labels(self):
        return np.array([w.label for w in self.windows], dtype=np.int64)

    def class_counts(self, split):
        _check_split_name(split)
        counts = {}
        for w in self.windows:
            if w.split == split:
                counts[w.label] = counts.get(w.label, 0) + 1
        return counts

    def _core_dict(self):
        return {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "source": self.source,
            "seed": int(self.seed),
            "split_ratio": float(self.split_ratio),
            "window_raw": int(self.window_raw),
            "fft_bins": int(self.fft_bins),
            "sample_rate": float(self.sample_rate),
            "entries": [
                {
                    "file": e.file,
                    "variable": e.variable,
                    "label": int(e.label),
                    "fault_size_mm": float(e.fault_size_mm),
                    "hop": int(e.hop),
                    "num_windows": int(e.num_windows),
                }
                for e in self.entries
            ],
            "windows": [
                {
                    "entry": int(w.entry),
                    "offset": int(w.offset),
                    "label": int(w.label),
                    "split": w.split,
                }
                for w in self.windows
            ],
        }

    @property
    def hash(self):
        """Hex digest over every preprocessing parameter and window."""
        blob = json.dumps(self._core_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def to_json(self, feature_file=None):
        doc = self._core_dict()
        doc["class_counts"] = {
            split: {str(k): v for k, v in sorted(self.class_counts(split).items())}
            for split in ("train", "test")
        }
        doc["feature_file"] = feature_file
        doc["hash"] = self.hash
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest is not valid JSON: {exc}") from None
        if doc.get("format") != MANIFEST_FORMAT:
            raise DataError("not a dataset manifest")
        if doc.get("version") != MANIFEST_VERSION:
            raise DataError(f"unsupported manifest version {doc.get('version')!r}")
        manifest = cls(
            entries=[
                ManifestEntry(
                    file=e["file"],
                    variable=e["variable"],
                    label=int(e["label"]),
                    fault_size_mm=float(e["fault_size_mm"]),
                    hop=int(e["hop"]),
                    num_windows=int(e["num_windows"]),
                )
                for e in doc["entries"]
            ],
            windows=[
                WindowRecord(
                    entry=int(w["entry"]),
                    offset=int(w["offset"]),
                    label=int(w["label"]),
                    split=w["split"],
                )
                for w in doc["windows"]
            ],
            seed=int(doc["seed"]),
            split_ratio=float(doc["split_ratio"]),
            window_raw=int(doc["window_raw"]),
            fft_bins=int(doc["fft_bins"]),
            sample_rate=float(doc["sample_rate"]),
            source=doc["source"],
        )
        recorded = doc.get("hash")
        if recorded is not None and recorded != manifest.hash:
            raise DataError("manifest hash mismatch; file was edited or corrupted")
        return manifest


def _check_split_name(split):
    if split not in ("train", "test"):
        raise DataError(f"unknown split {split!r}; expected 'train' or 'test'")


# ---------------------------------------------------------------------------
# Spectral preprocessing


def spectral_magnitudes(window, remove_mean=True):
    """One-sided FFT magnitudes of a single raw window.

    Returns bins 0..n/2-1 without standardization; ``preprocess`` applies
    the per-window standardization on top of this.
    """
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 1:
        raise DataError(f"expected a 1-d window, got shape {window.shape}")
    return _magnitude_rows(window[None, :], remove_mean=remove_mean)[0]


def _magnitude_rows(windows, remove_mean=True):
    if remove_mean:
        windows = windows - windows.mean(axis=1, keepdims=True)
    spectrum = np.fft.rfft(windows, axis=1)
    return np.abs(spectrum)[:, : windows.shape[1] // 2]


def _standardize_rows(features):
    # Per-window statistics; a degenerate all-zero spectrum stays zero.
    centered = features - features.mean(axis=1, keepdims=True)
    std = centered.std(axis=1, keepdims=True)
    std[std == 0.0] = 1.0
    return centered / std


def _features_at(signal, offsets, window_raw):
    if len(offsets) == 0:
        return np.zeros((0, window_raw // 2), dtype=np.float64)
    idx = np.asarray(offsets, dtype=np.int64)[:, None] + np.arange(window_raw)[None, :]
    return _standardize_rows(_magnitude_rows(signal[idx]))


def preprocess(recording, window_raw=WINDOW_RAW, hop=None, label=-1):
    """Chunk a recording into standardized spectral windows.

    ``hop`` defaults to ``window_raw`` (non-overlapping windows).  A
    recording shorter than one window yields an empty list with a
    warning rather than an error.
    """
    if hop is None:
        hop = window_raw
    if window_raw < 2 or window_raw % 2 != 0:
        raise DataError(f"window_raw must be an even number >= 2, got {window_raw}")
    if hop < 1:
        raise DataError(f"hop must be >= 1, got {hop}")
    signal = np.asarray(recording.signal, dtype=np.float64).ravel()
    if not np.all(np.isfinite(signal)):
        raise DataError(
            f"non-finite samples in {recording.source_file} ({recording.variable_name})"
        )
    if signal.size < window_raw:
        log.warning(
            "recording %s (%s) has %d samples, shorter than one %d-sample window",
            recording.source_file,
            recording.variable_name,
            signal.size,
            window_raw,
        )
        return []
    offsets = list(range(0, signal.size - window_raw + 1, hop))
    features = _features_at(signal, offsets, window_raw)
    return [
        SampleWindow(
            features=features[i],
            label=label,
            origin=(recording.source_file, offset),
        )
        for i, offset in enumerate(offsets)
    ]


# ---------------------------------------------------------------------------
# Synthetic corpus


def _synth_signal(label, num_windows, window_raw, seed, sample_rate):
    """Deterministic per-class signal: harmonics, fault bursts, noise."""
    rng = np.random.default_rng([int(seed), 0, int(label)])
    n = num_windows * window_raw
    t = np.arange(n, dtype=np.float64) / sample_rate
    fundamental = 50.0 * (label + 1)
    signal = np.zeros(n, dtype=np.float64)
    for harmonic, amplitude in enumerate((1.0, 0.5, 0.25), start=1):
        phase = rng.uniform(0.0, 2.0 * np.pi)
        signal += amplitude * np.sin(2.0 * np.pi * fundamental * harmonic * t + phase)
    if label >= 1:
        # Impulsive bursts stand in for bearing fault impacts: a decaying
        # resonance retriggered at a class-specific repetition rate.
        period = int(sample_rate / (8.0 + 2.0 * label))
        duration = 64
        k = np.arange(duration, dtype=np.float64)
        resonance = 1800.0 + 220.0 * label
        kernel = np.exp(-k / 12.0) * np.sin(2.0 * np.pi * resonance * k / sample_rate)
        amplitude = 1.0 + 0.1 * label
        for start in range(int(rng.integers(0, period)), n - duration, period):
            signal[start : start + duration] += amplitude * kernel
    power = np.mean(signal**2)
    # Additive Gaussian noise at 10 dB signal-to-noise ratio.
    signal += rng.normal(0.0, np.sqrt(power / 10.0), n)
    return signal


def _synth_fault_size(label):
    if label == 0:
        return 0.0
    return (0.18, 0.36, 0.53)[(label - 1) % 3]


def synth_dataset(
    num_per_class=WINDOWS_PER_CLASS,
    seed=0,
    split_ratio=0.8,
    window_raw=WINDOW_RAW,
):
    """Build the synthetic ten-class corpus with a stratified split.

    Windows never overlap (hop equals the window), so a random
    stratified assignment cannot leak test samples into train.
    """
    if num_per_class < 1:
        raise DataError(f"num_per_class must be >= 1, got {num_per_class}")
    _check_split_ratio(split_ratio)
    manifest = DatasetManifest(
        seed=int(seed),
        split_ratio=float(split_ratio),
        window_raw=int(window_raw),
        fft_bins=int(window_raw) // 2,
        sample_rate=SAMPLE_RATE,
        source="synthetic",
    )
    feature_rows = []
    for label in range(NUM_CLASSES):
        signal = _synth_signal(label, num_per_class, window_raw, seed, SAMPLE_RATE)
        offsets = list(range(0, num_per_class * window_raw, window_raw))
        features = _features_at(signal, offsets, window_raw)
        entry_index = len(manifest.entries)
        manifest.entries.append(
            ManifestEntry(
                file=f"synthetic://class{label}",
                variable=f"class{label}",
                label=label,
                fault_size_mm=_synth_fault_size(label),
                hop=window_raw,
                num_windows=len(offsets),
            )
        )
        n_train = _train_count(len(offsets), split_ratio)
        order = np.random.default_rng([int(seed), 1, label]).permutation(len(offsets))
        split_of = {}
        for rank, window_index in enumerate(order):
            split_of[int(window_index)] = "train" if rank < n_train else "test"
        for i, offset in enumerate(offsets):
            manifest.windows.append(
                WindowRecord(
                    entry=entry_index,
                    offset=offset,
                    label=label,
                    split=split_of[i],
                )
            )
            feature_rows.append(features[i])
    manifest.features = np.asarray(feature_rows, dtype=np.float64)
    verify_split(manifest)
    return manifest


def _check_split_ratio(split_ratio):
    if not 0.0 < split_ratio <= 1.0:
        raise DataError(f"split_ratio must be in (0, 1], got {split_ratio}")


def _train_count(total, split_ratio):
    return min(total, int(np.floor(total * split_ratio + 0.5)))


# ---------------------------------------------------------------------------
# Label maps and raw-file ingest


def parse_label_map(path):
    """Read a `glob<TAB>label<TAB>fault_size_mm` file, first match wins."""
    rules = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(
                f"{path}:{lineno}: expected 'glob<TAB>label<TAB>fault_size_mm', got {raw!r}"
            )
        try:
            rules.append((parts[0].strip(), int(parts[1]), float(parts[2])))
        except ValueError:
            raise DataError(f"{path}:{lineno}: bad label or fault size in {raw!r}") from None
    if not rules:
        raise DataError(f"label map {path} contains no rules")
    return rules


def _resolve_label_map(data_dir, label_map):
    if label_map is None:
        default_file = Path(data_dir) / "labels.tsv"
        if default_file.is_file():
            return parse_label_map(default_file)
        return list(DEFAULT_LABEL_MAP)
    if isinstance(label_map, (str, Path)):
        return parse_label_map(label_map)
    return list(label_map)


def _match_label(name, rules):
    for pattern, label, fault_size in rules:
        if fnmatch.fnmatch(name, pattern):
            return label, fault_size
    return None


def _pick_signal_variable(variables, path):
    """Prefer the drive-end channel; fall back to the longest vector."""
    named = [v for v in variables if fnmatch.fnmatch(v.name, DRIVE_END_PATTERN)]
    pool = named if named else [v for v in variables if min(v.data.shape) == 1]
    pool = [v for v in pool if v.data.size >= 2]
    if not pool:
        raise DataError(f"{path}: no usable signal variable found")
    return max(pool, key=lambda v: v.data.size)


def read_recording(path, sample_rate=SAMPLE_RATE):
    """Load the vibration channel of one MAT file as a RawRecording."""
    variable = _pick_signal_variable(parse_mat(path), path)
    signal = np.asarray(variable.data, dtype=np.float64).ravel(order="F")
    return RawRecording(
        signal=signal,
        sample_rate=sample_rate,
        source_file=str(path),
        variable_name=variable.name,
    )


def _region_offsets(length, window_raw, split_ratio, target_train, target_test):
    """Offsets for one recording: overlapping train, non-overlapping test.

    The signal is cut at ``split_ratio`` into a leading train region and a
    trailing test region, so no train window can overlap a test window
    even when the train hop is smaller than the window.
    """
    boundary = int(length * split_ratio)
    train_span = boundary - window_raw
    if train_span < 0:
        train, hop = [], window_raw
    else:
        hop = max(1, train_span // max(1, target_train - 1)) if target_train else window_raw
        hop = min(hop, window_raw)
        train = list(range(0, train_span + 1, hop))[: max(target_train, 0)]
    test = list(range(boundary, length - window_raw + 1, window_raw))[: max(target_test, 0)]
    return train, test, hop


def build_manifest(
    data_dir,
    split_ratio=0.8,
    seed=0,
    window_raw=WINDOW_RAW,
    windows_per_class=WINDOWS_PER_CLASS,
    label_map=None,
):
    """Ingest a directory of MAT recordings into a split dataset.

    Files are labeled by the first matching glob rule.  Per-class window
    counts are balanced to the smallest class so the split stays
    stratified even when recording lengths differ.
    """
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataError(f"data directory {data_dir} does not exist")
    _check_split_ratio(split_ratio)
    rules = _resolve_label_map(data_dir, label_map)

    labeled_files = []
    for path in sorted(data_dir.glob("*.mat")) + sorted(data_dir.glob("*.MAT")):
        match = _match_label(path.name, rules)
        if match is None:
            log.warning("no label-map rule matches %s; skipping", path.name)
            continue
        labeled_files.append((path, match[0], match[1]))
    present = {label for _, label, _ in labeled_files}
    missing = sorted(set(range(NUM_CLASSES)) - present)
    if missing:
        raise DataError(f"data directory {data_dir} is missing classes {missing}")

    labeled_files.sort(key=lambda item: (item[1], item[0].name))
    target_train = _train_count(windows_per_class, split_ratio)
    target_test = windows_per_class - target_train

    entries = []
    recordings = []
    candidates = {label: {"train": [], "test": []} for label in range(NUM_CLASSES)}
    per_class_files = {}
    for path, label, _ in labeled_files:
        per_class_files[label] = per_class_files.get(label, 0) + 1
    for path, label, fault_size in labeled_files:
        recording = read_recording(path)
        share = per_class_files[label]
        entry_train = -(-target_train // share)
        entry_test = -(-target_test // share)
        train, test, hop = _region_offsets(
            recording.signal.size, window_raw, split_ratio, entry_train, entry_test
        )
        if not train and not test:
            log.warning("recording %s too short for any window; skipping", path.name)
            continue
        entry_index = len(entries)
        entries.append(
            ManifestEntry(
                file=str(path),
                variable=recording.variable_name,
                label=label,
                fault_size_mm=fault_size,
                hop=hop,
                num_windows=0,
            )
        )
        recordings.append(recording)
        for offset in train:
            candidates[label]["train"].append((entry_index, offset))
        for offset in test:
            candidates[label]["test"].append((entry_index, offset))

    quota = {}
    for split, target in (("train", target_train), ("test", target_test)):
        available = min(len(candidates[label][split]) for label in range(NUM_CLASSES))
        quota[split] = min(target, available)
    if quota["train"] == 0:
        raise DataError("no class has any train windows; recordings too short")

    manifest = DatasetManifest(
        seed=int(seed),
        split_ratio=float(split_ratio),
        window_raw=int(window_raw),
        fft_bins=int(window_raw) // 2,
        sample_rate=SAMPLE_RATE,
        source=str(data_dir),
        entries=entries,
    )
    for label in range(NUM_CLASSES):
        for split in ("train", "test"):
            pool = candidates[label][split]
            keep = quota[split]
            if len(pool) > keep:
                rng = np.random.default_rng([int(seed), 2, label])
                chosen = rng.choice(len(pool), size=keep, replace=False)
                pool = [pool[i] for i in sorted(chosen)]
            for entry_index, offset in pool:
                manifest.windows.append(
                    WindowRecord(entry=entry_index, offset=offset, label=label, split=split)
                )
    manifest.windows.sort(key=lambda w: (w.entry, w.offset, w.split))
    for w in manifest.windows:
        entries[w.entry].num_windows += 1

    feature_rows = np.zeros((len(manifest.windows), manifest.fft_bins), dtype=np.float64)
    by_entry = {}
    for i, w in enumerate(manifest.windows):
        by_entry.setdefault(w.entry, []).append(i)
    for entry_index, window_ids in by_entry.items():
        offsets = [manifest.windows[i].offset for i in window_ids]
        feats = _features_at(recordings[entry_index].signal, offsets, window_raw)
        for row, i in enumerate(window_ids):
            feature_rows[i] = feats[row]
    manifest.features = feature_rows
    verify_split(manifest)
    return manifest


# ---------------------------------------------------------------------------
# Split auditing


def verify_split(manifest):
    """Fail loudly on leakage, overlap, or class imbalance."""
    seen = {"train": set(), "test": set()}
    for w in manifest.windows:
        key = (w.entry, w.offset)
        if key in seen["train" if w.split == "test" else "test"]:
            raise DataError(f"window {key} appears in both splits")
        if key in seen[w.split]:
            raise DataError(f"duplicate window {key} in {w.split}")
        seen[w.split].add(key)

    window_raw = manifest.window_raw
    test_by_entry = {}
    for entry, offset in seen["test"]:
        test_by_entry.setdefault(entry, []).append(offset)
    for entry, offset in seen["train"]:
        for test_offset in test_by_entry.get(entry, ()):
            if offset < test_offset + window_raw and test_offset < offset + window_raw:
                raise DataError(
                    f"train window at offset {offset} overlaps test window at "
                    f"{test_offset} in entry {entry}"
                )
    for entry, offsets in test_by_entry.items():
        offsets = sorted(offsets)
        for a, b in zip(offsets, offsets[1:]):
            if b - a < window_raw:
                raise DataError(f"test windows overlap within entry {entry}")

    for split in ("train", "test"):
        counts = manifest.class_counts(split)
        if counts and max(counts.values()) - min(counts.values()) > 1:
            raise DataError(f"{split} split is not stratified: {counts}")
        if counts and len(counts) not in (0, NUM_CLASSES):
            raise DataError(f"{split} split covers only classes {sorted(counts)}")


# ---------------------------------------------------------------------------
# Persistence: manifest JSON + feature cache blob


def save_features(path, features):
    """Write features as a flat little-endian float32 blob."""
    features = np.ascontiguousarray(features, dtype="<f4")
    if features.ndim != 2:
        raise DataError(f"feature matrix must be 2-d, got shape {features.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", features.shape[0], features.shape[1]))
        fh.write(features.tobytes())


def load_features(path):
    blob = Path(path).read_bytes()
    if blob[:4] != FEATURE_MAGIC:
        raise DataError(f"{path} is not a feature cache (bad magic {blob[:4]!r})")
    if len(blob) < 12:
        raise DataError(f"{path} is truncated: no header")
    count, dim = struct.unpack_from("<II", blob, 4)
    expected = 12 + 4 * count * dim
    if len(blob) != expected:
        raise DataError(
            f"{path} is truncated or padded: expected {expected} bytes, found {len(blob)}"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=12).reshape(count, dim)
    return data.astype(np.float64)


def save_dataset(manifest, manifest_path):
    """Write manifest JSON plus an adjacent feature cache when present."""
    manifest_path = Path(manifest_path)
    feature_file = None
    if manifest.features is not None:
        feature_file = manifest_path.stem + ".dkdw"
        save_features(manifest_path.parent / feature_file, manifest.features)
    manifest_path.write_text(manifest.to_json(feature_file=feature_file))
    return manifest_path


def load_dataset(manifest_path):
    """Read a manifest and, if recorded, its cached feature matrix."""
    manifest_path = Path(manifest_path)
    try:
        text = manifest_path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from None
    manifest = DatasetManifest.from_json(text)
    feature_file = json.loads(text).get("feature_file")
    if feature_file is not None:
        features = load_features(manifest_path.parent / feature_file)
        if features.shape != (len(manifest.windows), manifest.fft_bins):
            raise DataError(
                f"feature cache shape {features.shape} does not match manifest "
                f"({len(manifest.windows)} windows x {manifest.fft_bins} bins)"
            )
        manifest.features = features
    return manifest


# ---------------------------------------------------------------------------
# Batch iteration


def load_batches(manifest, split, batch_size, shuffle_seed=None, yield_indices=False):
    """Yield (inputs, labels) batches; order is a pure function of seeds.

    Inputs arrive shaped (batch, 1, fft_bins) as float64, labels as
    int64.  With ``yield_indices`` each batch carries its manifest window
    indices as a third element, so callers can align per-window data
    (cached teacher outputs, origins) with a shuffled stream.  Iterating
    an empty split is refused so an accidental ratio-1.0 manifest cannot
    silently evaluate on nothing.
    """
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    if manifest.features is None:
        raise DataError("manifest has no features attached; load the feature cache first")
    indices = manifest.split_indices(split)
    if indices.size == 0:
        raise DataError(f"refusing to iterate the empty {split!r} split")
    if shuffle_seed is not None:
        indices = np.random.default_rng(int(shuffle_seed)).permutation(indices)
    labels = manifest.labels()
    for start in range(0, indices.size, batch_size):
        batch = indices[start : start + batch_size]
        x = manifest.features[batch][:, None, :]
        if yield_indices:
            yield x, labels[batch], batch
        else:
            yield x, labels[batch]
