"""Manifests, curation, subset construction, splits, folds and class weights.

Class indices everywhere follow the order in which labels first appear in a
manifest; :func:`build_subset` emits the negative class first.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from .imgcore import read_samples

SEVERITIES = ("none", "normal_pcr_plus", "mild", "moderate", "severe")
POPULATIONS = ("adult", "paediatric")
MANIFEST_COLUMNS = ("path", "label", "source", "severity", "population", "patient_id")

# Published COVID-19 image counts per source database.
SOURCE_REGISTRY = {
    "ieee8023": 196,
    "figure1": 35,
    "actualmed": 58,
    "twitter": 132,
    "sirm": 38,
    "radiopaedia": 28,
    "covidgr": 426,
    "hannover": 243,
    "eurorad": 258,
    "peer_reviewed": 166,
    "bimcv": 2474,
    "covid19_cxr_repository": 400,
}
COVID_TOTAL = 4454
# Sources of normal images used by the subset settings, plus a catch-all.
EXTERNAL_SOURCES = ("chestxray14", "kaggle_pneumonia", "synthetic", "external")

# Severity settings: (positive tier, per-class train/val/test counts as published).
SEVERITY_SETTINGS = {
    1: ("normal_pcr_plus", (55, 7, 14)),
    2: ("mild", (70, 10, 20)),
    3: ("moderate", (120, 17, 34)),
    4: ("severe", (56, 7, 16)),
}

SUBSET_SETTINGS = ("binary", "severity:1", "severity:2", "severity:3", "severity:4",
                   "population", "mixed-normal", "adult-normal")


class ManifestError(ValueError):
    """Malformed manifest; ``line`` is the 1-based CSV line when known."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class InsufficientRecordsError(ValueError):
    def __init__(self, label, needed, available):
        self.label, self.needed, self.available = label, needed, available
        super().__init__(
            f"class {label!r} needs {needed} records but only {available} available "
            f"(short by {needed - available})"
        )


@dataclass(frozen=True)
class SampleRecord:
    path: str
    label: str
    source: str = "external"
    severity: str = "none"
    population: str = "adult"
    patient_id: str | None = None

    def __post_init__(self):
        if not self.label:
            raise ValueError("label must be non-empty")
        if self.severity not in SEVERITIES:
            raise ValueError(f"unknown severity {self.severity!r}")
        if self.population not in POPULATIONS:
            raise ValueError(f"unknown population {self.population!r}")


@dataclass
class Manifest:
    records: list[SampleRecord]
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def image_path(self, i) -> Path:
        p = Path(self.records[i].path)
        return p if p.is_absolute() else self.root / p

    def classes(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.label, None)
        return list(seen)

    def label_indices(self, classes=None) -> list[int]:
        classes = classes or self.classes()
        lookup = {c: i for i, c in enumerate(classes)}
        return [lookup[r.label] for r in self.records]

    def subset(self, indices) -> "Manifest":
        return Manifest([self.records[i] for i in indices], self.root)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(MANIFEST_COLUMNS)
            for r in self.records:
                writer.writerow([r.path, r.label, r.source, r.severity, r.population,
                                 r.patient_id or ""])


def parse_manifest(path) -> Manifest:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ManifestError("empty manifest", line=1) from None
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise ManifestError(f"missing column(s): {', '.join(missing)}", line=1)
        col = {c: header.index(c) for c in MANIFEST_COLUMNS}
        records = []
        for row in reader:
            line = reader.line_num
            if not row or all(not v.strip() for v in row):
                continue
            if len(row) < len(header):
                raise ManifestError(f"expected {len(header)} fields, got {len(row)}", line=line)
            values = {c: row[i].strip() for c, i in col.items()}
            try:
                records.append(SampleRecord(
                    path=values["path"],
                    label=values["label"],
                    source=values["source"] or "external",
                    severity=values["severity"] or "none",
                    population=values["population"] or "adult",
                    patient_id=values["patient_id"] or None,
                ))
            except ValueError as exc:
                raise ManifestError(str(exc), line=line) from None
    return Manifest(records, path.parent)


def content_hash(path) -> str:
    """SHA-256 over bit depth, shape and decoded samples at their native depth."""
    samples, depth = read_samples(path)
    h = hashlib.sha256()
    h.update(f"{depth}:{samples.shape}:{samples.dtype.str}".encode())
    h.update(samples.tobytes())
    return h.hexdigest()


def dedup(manifest: Manifest) -> tuple[Manifest, list[str]]:
    """Drop records whose decoded pixels duplicate an earlier record."""
    seen: set[str] = set()
    kept, dropped = [], []
    for i, rec in enumerate(manifest.records):
        digest = content_hash(manifest.image_path(i))
        if digest in seen:
            dropped.append(rec.path)
            continue
        seen.add(digest)
        kept.append(rec)
    return Manifest(kept, manifest.root), dropped


def reconcile_registry(manifest: Manifest, covid_label: str = "covid19") -> dict:
    """Compare per-source COVID-19 counts with the published registry."""
    found = {k: 0 for k in SOURCE_REGISTRY}
    other = 0
    for r in manifest.records:
        if r.label != covid_label:
            continue
        if r.source in found:
            found[r.source] += 1
        else:
            other += 1
    rows = {
        k: {"expected": SOURCE_REGISTRY[k], "found": found[k], "missing": SOURCE_REGISTRY[k] - found[k]}
        for k in SOURCE_REGISTRY
    }
    return {
        "sources": rows,
        "expected_total": COVID_TOTAL,
        "found_total": sum(found.values()),
        "unregistered": other,
    }


# --- random number generation -------------------------------------------------

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """SplitMix64 generator (Steele, Lea & Flood); fixed so splits are portable."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` by rejection sampling."""
        if n < 1:
            raise ValueError("n must be >= 1")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            z = self.next_u64()
            if z < limit:
                return z % n

    def shuffle(self, items: list) -> list:
        """Fisher-Yates shuffle, returning a new list."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.below(i + 1)
            out[i], out[j] = out[j], out[i]
        return out


# --- subsets ------------------------------------------------------------------


def _select(indices: list[int], n: int, rng: SplitMix64) -> list[int]:
    if len(indices) <= n:
        return list(indices)
    return sorted(rng.shuffle(indices)[:n])


def build_subset(manifest: Manifest, setting: str, n_per_class: int | None = None,
                 seed: int = 0) -> Manifest:
    """Assemble the two-class subset for a named experimental setting.

    ``binary`` (normal vs covid19), ``severity:K`` (normal vs one COVIDGR tier,
    relabelled with the tier name), ``population`` (paediatric vs adult
    normals), ``mixed-normal`` (paediatric normals vs covid19) and
    ``adult-normal`` (adult normals vs covid19). Without ``n_per_class`` the
    severity settings draw their published per-class totals and the others take
    as many as the smaller class allows.
    """
    recs = manifest.records
    normal = [i for i, r in enumerate(recs) if r.label == "normal" and r.severity == "none"]
    covid = [i for i, r in enumerate(recs) if r.label == "covid19"]
    if setting == "binary":
        neg, pos, names = normal, covid, ("normal", "covid19")
    elif setting.startswith("severity:"):
        try:
            tier, counts = SEVERITY_SETTINGS[int(setting.split(":", 1)[1])]
        except (KeyError, ValueError):
            raise ValueError(f"unknown severity setting {setting!r}") from None
        neg = normal
        pos = [i for i in covid if recs[i].severity == tier]
        names = ("normal", tier)
        if n_per_class is None:
            n_per_class = sum(counts)
    elif setting == "population":
        neg = [i for i in normal if recs[i].population == "paediatric"]
        pos = [i for i in normal if recs[i].population == "adult"]
        names = ("paediatric", "adult")
    elif setting == "mixed-normal":
        neg = [i for i in normal if recs[i].population == "paediatric"]
        pos, names = covid, ("normal", "covid19")
    elif setting == "adult-normal":
        neg = [i for i in normal if recs[i].population == "adult"]
        pos, names = covid, ("normal", "covid19")
    else:
        raise ValueError(f"unknown subset setting {setting!r}; expected one of {SUBSET_SETTINGS}")

    if n_per_class is None:
        n_per_class = min(len(neg), len(pos))
    for label, idx in zip(names, (neg, pos)):
        if n_per_class < 1 or len(idx) < n_per_class:
            raise InsufficientRecordsError(label, max(n_per_class, 1), len(idx))
    rng = SplitMix64(seed)
    out = []
    for label, idx in zip(names, (neg, pos)):
        out.extend(replace(recs[i], label=label) for i in _select(idx, n_per_class, rng))
    return Manifest(out, manifest.root)


# --- class weights ------------------------------------------------------------


@dataclass(frozen=True)
class ClassWeights:
    counts: tuple[int, ...]
    constants: tuple[float, ...]
    weights: tuple[float, ...]

    @property
    def n_classes(self) -> int:
        return len(self.counts)

    @classmethod
    def uniform(cls, n_classes: int) -> "ClassWeights":
        return cls((1,) * n_classes, (1.0,) * n_classes, (1.0,) * n_classes)


def compute_class_weights(counts, constants=None) -> ClassWeights:
    """``w(c) = C_c * sum(n) / (N * n_c)``: inverse-frequency class weights."""
    counts = tuple(int(n) for n in counts)
    if not counts:
        raise ValueError("need at least one class")
    if any(n < 1 for n in counts):
        raise ValueError("every class count must be >= 1")
    constants = tuple(float(c) for c in constants) if constants is not None else (1.0,) * len(counts)
    if len(constants) != len(counts):
        raise ValueError("one class constant per class is required")
    total, n_classes = sum(counts), len(counts)
    weights = tuple(c * total / (n_classes * n) for c, n in zip(constants, counts))
    return ClassWeights(counts, constants, weights)


# --- splits and folds ---------------------------------------------------------

PARTITIONS = ("train", "val", "test")


def split_counts(n: int, fractions=(0.7, 0.1, 0.2)) -> tuple[int, int, int]:
    """``val = floor(n f_val)``, ``test = floor(n f_test)``, the rest trains."""
    f_train, f_val, f_test = fractions
    if min(fractions) < 0 or not math.isclose(f_train + f_val + f_test, 1.0, abs_tol=1e-9):
        raise ValueError("fractions must be non-negative and sum to 1")
    # Round before flooring so 0.1 * 1580 = 158.00000000000003 and friends stay exact.
    val = math.floor(round(n * f_val, 9))
    test = math.floor(round(n * f_test, 9))
    return n - val - test, val, test


def _units(manifest: Manifest, indices: list[int]) -> list[list[int]]:
    # Records sharing a patient id stay together.
    groups: dict[str, list[int]] = {}
    units: list[list[int]] = []
    for i in indices:
        pid = manifest.records[i].patient_id
        if pid is None:
            units.append([i])
        elif pid in groups:
            groups[pid].append(i)
        else:
            groups[pid] = [i]
            units.append(groups[pid])
    return units


def _per_class(manifest: Manifest, classes) -> dict[str, list[int]]:
    out: dict[str, list[int]] = {c: [] for c in classes}
    for i, r in enumerate(manifest.records):
        out[r.label].append(i)
    return out


@dataclass
class SplitPlan:
    classes: list[str]
    train: dict[str, list[int]]
    val: dict[str, list[int]]
    test: dict[str, list[int]]
    seed: int
    fractions: tuple[float, float, float] | None = None

    def indices(self, partition: str) -> list[int]:
        part = getattr(self, partition)
        return sorted(i for c in self.classes for i in part[c])

    def counts(self) -> dict[str, tuple[int, int, int]]:
        return {c: (len(self.train[c]), len(self.val[c]), len(self.test[c])) for c in self.classes}

    def to_json(self, manifest: Manifest) -> dict:
        return {
            "seed": self.seed,
            "fractions": list(self.fractions) if self.fractions else None,
            "classes": self.classes,
            "partitions": {
                p: {c: [manifest.records[i].path for i in getattr(self, p)[c]] for c in self.classes}
                for p in PARTITIONS
            },
        }

    @classmethod
    def from_json(cls, data: dict, manifest: Manifest) -> "SplitPlan":
        lookup = _path_lookup(manifest)
        parts = {
            p: {c: [lookup[path] for path in data["partitions"][p][c]] for c in data["classes"]}
            for p in PARTITIONS
        }
        fr = data.get("fractions")
        return cls(list(data["classes"]), parts["train"], parts["val"], parts["test"],
                   int(data["seed"]), tuple(fr) if fr else None)


def _path_lookup(manifest: Manifest) -> dict[str, int]:
    lookup: dict[str, int] = {}
    for i, r in enumerate(manifest.records):
        if r.path in lookup:
            raise ManifestError(f"duplicate path {r.path!r}; plans need unique paths")
        lookup[r.path] = i
    return lookup


def _fill(units, targets) -> list[list[int]]:
    # Greedy: a unit joins the first partition (in target order) with room for it;
    # whatever fits nowhere goes to the last bucket.
    buckets: list[list[int]] = [[] for _ in range(len(targets) + 1)]
    for unit in units:
        for b, target in enumerate(targets):
            if len(buckets[b]) + len(unit) <= target:
                buckets[b].extend(unit)
                break
        else:
            buckets[-1].extend(unit)
    return buckets


def stratified_split(manifest: Manifest, fractions=(0.7, 0.1, 0.2), seed: int = 0,
                     counts: tuple[int, int, int] | None = None) -> SplitPlan:
    """Per-class seeded split into train/val/test.

    Counts follow :func:`split_counts` unless explicit per-class ``counts``
    are given (used for settings whose published splits are fixed numbers).
    """
    classes = manifest.classes()
    by_class = _per_class(manifest, classes)
    rng = SplitMix64(seed)
    train, val, test = {}, {}, {}
    for c in classes:
        idx = by_class[c]
        if counts is not None:
            n_tr, n_val, n_te = counts
            if sum(counts) > len(idx):
                raise InsufficientRecordsError(c, sum(counts), len(idx))
        else:
            if len(idx) < 3:
                raise ValueError(f"class {c!r} has {len(idx)} samples; need at least 3")
            n_tr, n_val, n_te = split_counts(len(idx), fractions)
        units = rng.shuffle(_units(manifest, idx))
        v, t, rest = _fill(units, (n_val, n_te))
        if counts is not None:
            rest = rest[:n_tr]
        val[c], test[c], train[c] = v, t, rest
    return SplitPlan(classes, train, val, test, seed,
                     tuple(fractions) if counts is None else None)


@dataclass
class FoldPlan:
    classes: list[str]
    test: list[dict[str, list[int]]]
    val: list[dict[str, list[int]]]
    seed: int
    all_indices: dict[str, list[int]] = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.test)

    def split(self, fold: int) -> SplitPlan:
        train = {}
        for c in self.classes:
            held = set(self.test[fold][c]) | set(self.val[fold][c])
            train[c] = [i for i in self.all_indices[c] if i not in held]
        return SplitPlan(self.classes, train, self.val[fold], self.test[fold], self.seed)

    def to_json(self, manifest: Manifest) -> dict:
        def paths(part):
            return {c: [manifest.records[i].path for i in part[c]] for c in self.classes}

        return {
            "seed": self.seed,
            "k": self.k,
            "classes": self.classes,
            "folds": [{"test": paths(t), "val": paths(v)} for t, v in zip(self.test, self.val)],
        }

    @classmethod
    def from_json(cls, data: dict, manifest: Manifest) -> "FoldPlan":
        lookup = _path_lookup(manifest)
        classes = list(data["classes"])
        test = [{c: [lookup[p] for p in f["test"][c]] for c in classes} for f in data["folds"]]
        val = [{c: [lookup[p] for p in f["val"][c]] for c in classes} for f in data["folds"]]
        return cls(classes, test, val, int(data["seed"]), _per_class(manifest, classes))


def kfold_plan(manifest: Manifest, k: int = 5, val_frac: float = 0.1, seed: int = 0) -> FoldPlan:
    """Stratified k-fold plan with a per-fold validation carve-out.

    Per class, units are shuffled and dealt to the least-filled fold (round
    robin when every unit is a single record). Each fold's validation set is
    the first ``floor(val_frac * pool)`` records of its shuffled training pool.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if not 0 <= val_frac < 1:
        raise ValueError("val_frac must lie in [0, 1)")
    classes = manifest.classes()
    by_class = _per_class(manifest, classes)
    rng = SplitMix64(seed)
    test = [{} for _ in range(k)]
    val = [{} for _ in range(k)]
    for c in classes:
        idx = by_class[c]
        if len(idx) < k:
            raise ValueError(f"class {c!r} has {len(idx)} samples; need at least k={k}")
        units = rng.shuffle(_units(manifest, idx))
        assignment = []
        sizes = [0] * k
        for unit in units:
            f = min(range(k), key=lambda j: (sizes[j], j))
            sizes[f] += len(unit)
            assignment.append(f)
        for f in range(k):
            test[f][c] = [i for u, a in zip(units, assignment) if a == f for i in u]
            pool = [u for u, a in zip(units, assignment) if a != f]
            n_val = math.floor(round(val_frac * sum(len(u) for u in pool), 9))
            val[f][c] = _fill(pool, (n_val,))[0]
    return FoldPlan(classes, test, val, seed, by_class)


def save_json(data, path) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
