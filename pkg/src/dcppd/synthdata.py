"""Seeded phantom volumes with planted findings, exact labels and templated reports."""
from __future__ import annotations

import csv
import io
import json
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import grammar
from .questions import (
    KINDS,
    KIND_QS1,
    LOBE_SIDE,
    LOBES,
    LUNG_KINDS,
    QS2_FULL,
    QS2_KEYS,
    QS3_FULL,
    QS3_KEYS,
    QS_ORDER,
    SIDES,
    LabelVector,
    QuestionSet,
    default_sets,
)

DATASET_FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class InvariantError(ValueError):
    pass


@dataclass(frozen=True)
class FindingSpec:
    kind: str
    laterality: str
    lobe: Optional[str] = None
    extent: int = 3
    intensity: float = 0.8
    center: Optional[tuple[int, int, int]] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvariantError(f"unknown finding kind {self.kind!r}")
        if self.laterality not in SIDES:
            raise InvariantError(f"laterality must be left/right, got {self.laterality!r}")
        if self.lobe is not None:
            if self.kind == "pleural_effusion":
                raise InvariantError("pleural effusion never carries a lobe")
            if LOBE_SIDE.get(self.lobe) != self.laterality:
                raise InvariantError(f"lobe {self.lobe} inconsistent with {self.laterality} laterality")
        if self.extent < 1:
            raise InvariantError("extent must be >= 1")
        if not 0.0 < self.intensity <= 1.0:
            raise InvariantError("intensity must lie in (0, 1]")


# (extent low, extent high, intensity low, intensity high); extents inclusive.
DEFAULT_PROFILES = {
    "ggo": (5, 6, 0.28, 0.34),
    "consolidation": (4, 5, 0.58, 0.66),
    "nodule": (3, 4, 0.85, 0.95),
    "pleural_effusion": (5, 6, 0.42, 0.48),
}


@dataclass
class DatasetConfig:
    grid: tuple[int, int, int] = (32, 32, 32)
    windows: tuple[tuple[float, float], ...] = ((0.0, 0.5), (0.2, 0.8), (0.5, 1.0))
    window_names: Optional[tuple[str, ...]] = None
    prevalence: dict = field(default_factory=lambda: {k: 0.25 for k in KINDS})
    lobe_prob: float = 1.0
    background: float = 0.1
    noise_std: float = 0.03
    profiles: dict = field(default_factory=lambda: dict(DEFAULT_PROFILES))
    # Each entry (kind, laterality, lobe) is planted instead of sampling presence.
    forced_findings: Optional[tuple[tuple[str, str, Optional[str]], ...]] = None
    structured: bool = True
    qs1_subset: str = "toy"

    def validate(self) -> None:
        for kind, p in self.prevalence.items():
            if kind not in KINDS:
                raise ConfigError(f"prevalence given for unknown kind {kind!r}")
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"prevalence for {kind} must lie in [0, 1], got {p}")
        if not 0.0 <= self.lobe_prob <= 1.0:
            raise ConfigError("lobe_prob must lie in [0, 1]")
        if len(self.grid) != 3 or min(self.grid) < 1:
            raise ConfigError(f"grid must be three positive sizes, got {self.grid}")
        if not self.windows:
            raise ConfigError("at least one window is required")
        for lo, hi in self.windows:
            if lo >= hi:
                raise ConfigError(f"window lower bound {lo} must be below upper bound {hi}")
        if self.window_names is not None and len(self.window_names) != len(self.windows):
            raise ConfigError("window_names must match windows")
        for kind in KINDS:
            e_lo, e_hi, i_lo, i_hi = self.profiles[kind]
            if not 1 <= e_lo <= e_hi:
                raise ConfigError(f"bad extent range for {kind}")
            if not 0.0 < i_lo <= i_hi <= 1.0:
                raise ConfigError(f"bad intensity range for {kind}")
            for loc in _locations(kind):
                _center_ranges(self.grid, kind, *loc, e_hi)

    @property
    def n_channels(self) -> int:
        return len(self.windows)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["windows"] = [list(w) for w in self.windows]
        d["profiles"] = {k: list(v) for k, v in self.profiles.items()}
        if self.forced_findings is not None:
            d["forced_findings"] = [list(f) for f in self.forced_findings]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        d["grid"] = tuple(d["grid"])
        d["windows"] = tuple(tuple(w) for w in d["windows"])
        if d.get("window_names") is not None:
            d["window_names"] = tuple(d["window_names"])
        if "profiles" in d:
            d["profiles"] = {k: tuple(v) for k, v in d["profiles"].items()}
        if d.get("forced_findings") is not None:
            d["forced_findings"] = tuple(tuple(f) for f in d["forced_findings"])
        return cls(**d)


def _locations(kind):
    if kind == "pleural_effusion":
        return [(side, None) for side in SIDES]
    return [(side, None) for side in SIDES] + [(LOBE_SIDE[lobe], lobe) for lobe in LOBES]


def lobe_region(grid, lobe: str) -> tuple[slice, slice, slice]:
    """Axis-aligned voxel region of a lobe.

    Axis 0 splits left (low half) from right; axis 2 runs superior to inferior.
    The left lung is split in two along axis 2, the right lung in three.
    """
    H, W, D = grid
    half = H // 2
    x = slice(0, half) if LOBE_SIDE[lobe] == "left" else slice(half, H)
    if lobe == "LUL":
        z = slice(0, D // 2)
    elif lobe == "LLL":
        z = slice(D // 2, D)
    elif lobe == "RUL":
        z = slice(0, D // 3)
    elif lobe == "RML":
        z = slice(D // 3, (2 * D) // 3)
    else:
        z = slice((2 * D) // 3, D)
    return x, slice(0, W), z


def _center_ranges(grid, kind, side, lobe, extent):
    """Inclusive per-axis center ranges keeping the footprint inside the volume."""
    H, W, D = grid
    half = H // 2
    if side == "left":
        x_lo, x_hi = extent, half - 1 - extent
    else:
        x_lo, x_hi = half + extent, H - 1 - extent
    y_lo, y_hi = extent, W - 1 - extent
    z_lo, z_hi = extent, D - 1 - extent
    if kind == "pleural_effusion":
        # against the lateral chest wall, posterior and inferior
        if side == "left":
            x_hi = min(x_hi, x_lo + 2)
        else:
            x_lo = max(x_lo, x_hi - 2)
        y_lo = max(y_lo, W // 2)
        z_lo = max(z_lo, D // 2)
    elif lobe is not None:
        _, _, zs = lobe_region(grid, lobe)
        z_lo, z_hi = max(z_lo, zs.start), min(z_hi, zs.stop - 1)
    ranges = ((x_lo, x_hi), (y_lo, y_hi), (z_lo, z_hi))
    for axis, (lo, hi) in enumerate(ranges):
        if lo > hi:
            raise ConfigError(
                f"grid {tuple(grid)} too small for {kind} extent {extent} "
                f"({side}, {lobe}) on axis {axis}"
            )
    return ranges


def derive_seed(seed: int, index: int) -> int:
    """Per-item seed from ``(seed, index)``; order-independent."""
    return int(np.random.SeedSequence(seed, spawn_key=(index,)).generate_state(1)[0])


def _place(rng, grid, kind, side, lobe, profile) -> FindingSpec:
    e_lo, e_hi, i_lo, i_hi = profile
    extent = int(rng.integers(e_lo, e_hi + 1))
    intensity = float(rng.uniform(i_lo, i_hi))
    ranges = _center_ranges(grid, kind, side, lobe, extent)
    center = tuple(int(rng.integers(lo, hi + 1)) for lo, hi in ranges)
    return FindingSpec(kind, side, lobe, extent, round(intensity, 6), center)


def sample_findings(rng: np.random.Generator, config: DatasetConfig) -> list[FindingSpec]:
    """Draw the findings of one phantom; consumes ``rng`` before any voxel noise."""
    findings = []
    if config.forced_findings is not None:
        for kind, side, lobe in config.forced_findings:
            findings.append(_place(rng, config.grid, kind, side, lobe, config.profiles[kind]))
        return findings
    for kind in KINDS:
        present = rng.random() < config.prevalence.get(kind, 0.0)
        side = SIDES[int(rng.integers(2))]
        lobe = None
        if kind in LUNG_KINDS and rng.random() < config.lobe_prob:
            side_lobes = [lb for lb in LOBES if LOBE_SIDE[lb] == side]
            lobe = side_lobes[int(rng.integers(len(side_lobes)))]
        if present:
            findings.append(_place(rng, config.grid, kind, side, lobe, config.profiles[kind]))
    return findings


@dataclass
class PhantomVolume:
    data: np.ndarray  # [channels, H, W, D], float32 in [0, 1]
    spacing: float = 1.0
    channel_descriptors: tuple[str, ...] = ()

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]


def apply_windows(
    raw: np.ndarray, windows: Sequence[tuple[float, float]], names: Optional[Sequence[str]] = None
) -> PhantomVolume:
    """Stack ``clamp((raw - lo) / (hi - lo), 0, 1)`` for each window, in order."""
    raw = np.asarray(raw, dtype=np.float64)
    channels = []
    for lo, hi in windows:
        if lo >= hi:
            raise ConfigError(f"window lower bound {lo} must be below upper bound {hi}")
        channels.append(np.clip((raw - lo) / (hi - lo), 0.0, 1.0))
    if names is None:
        names = tuple(f"window[{lo:g},{hi:g}]" for lo, hi in windows)
    return PhantomVolume(np.stack(channels).astype(np.float32), 1.0, tuple(names))


def render_raw(findings: Sequence[FindingSpec], rng: np.random.Generator, config: DatasetConfig) -> np.ndarray:
    grid = config.grid
    raw = np.full(grid, config.background, dtype=np.float64)
    if config.noise_std > 0:
        raw += rng.normal(0.0, config.noise_std, size=grid)
    axes = np.ogrid[: grid[0], : grid[1], : grid[2]]
    for f in findings:
        r2 = sum((a - c) ** 2 for a, c in zip(axes, f.center))
        sigma = f.extent / 2.0
        blob = f.intensity * np.exp(-0.5 * r2 / sigma**2)
        raw += np.where(r2 <= f.extent**2, blob, 0.0)
    return np.clip(raw, 0.0, 1.0)


@dataclass
class GroundTruth:
    findings: list[FindingSpec]
    qs1: LabelVector
    qs2: LabelVector
    qs3: LabelVector

    @classmethod
    def from_findings(cls, findings: Sequence[FindingSpec], qs1_subset: str = "toy") -> "GroundTruth":
        sets = default_sets(qs1_subset)
        return cls(list(findings), *labels_from_findings(findings, sets))

    def labels(self) -> dict[str, LabelVector]:
        return {"QS1": self.qs1, "QS2": self.qs2, "QS3": self.qs3}

    def check_hierarchy(self) -> None:
        """Raise :class:`InvariantError` unless lobe => laterality => presence holds."""
        check_hierarchy(self.qs1, self.qs2, self.qs3)
        expected = labels_from_findings(self.findings, {"QS1": self.qs1.qs, "QS2": self.qs2.qs, "QS3": self.qs3.qs})
        if tuple(expected) != (self.qs1, self.qs2, self.qs3):
            raise InvariantError("labels are not the labels of the listed findings")


def labels_from_findings(findings, sets: dict[str, QuestionSet]) -> tuple[LabelVector, LabelVector, LabelVector]:
    qs1 = np.zeros(sets["QS1"].arity, np.int8)
    qs2 = np.zeros(sets["QS2"].arity, np.int8)
    qs3 = np.zeros(sets["QS3"].arity, np.int8)
    for f in findings:
        q = KIND_QS1[f.kind]
        if q in sets["QS1"].questions:
            qs1[sets["QS1"].index(q)] = 1
        qs2[sets["QS2"].index(QS2_FULL[QS2_KEYS.index((f.kind, f.laterality))])] = 1
        if f.lobe is not None:
            qs3[sets["QS3"].index(QS3_FULL[QS3_KEYS.index((f.kind, f.lobe))])] = 1
    return (LabelVector(sets["QS1"], qs1), LabelVector(sets["QS2"], qs2), LabelVector(sets["QS3"], qs3))


def check_hierarchy(qs1: LabelVector, qs2: LabelVector, qs3: LabelVector) -> None:
    for i, v in enumerate(qs3.values):
        if v:
            kind, lobe = QS3_KEYS[QS3_FULL.index(qs3.qs.questions[i])]
            j = qs2.qs.index(QS2_FULL[QS2_KEYS.index((kind, LOBE_SIDE[lobe]))])
            if not qs2.values[j]:
                raise InvariantError(f"lobe label {kind}/{lobe} without laterality label")
    for i, v in enumerate(qs2.values):
        if v:
            kind, _ = QS2_KEYS[QS2_FULL.index(qs2.qs.questions[i])]
            q = KIND_QS1[kind]
            if q in qs1.qs.questions and not qs1.values[qs1.qs.index(q)]:
                raise InvariantError(f"laterality label for {kind} without presence label")


def generate_phantom(seed: int, config: Optional[DatasetConfig] = None) -> tuple[PhantomVolume, GroundTruth]:
    config = config or DatasetConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    findings = sample_findings(rng, config)
    raw = render_raw(findings, rng, config)
    volume = apply_windows(raw, config.windows, config.window_names)
    return volume, GroundTruth.from_findings(findings, config.qs1_subset)


@dataclass
class StructuredReport:
    sections: "OrderedDict[str, list[str]]"
    flat_text: str

    def to_dict(self) -> dict:
        return {"sections": dict(self.sections), "flat_text": self.flat_text}

    @classmethod
    def from_dict(cls, d: dict) -> "StructuredReport":
        return cls(OrderedDict((k, list(v)) for k, v in d["sections"].items()), d["flat_text"])


def _location_rank(f: FindingSpec) -> tuple:
    if f.lobe is not None:
        return (0, LOBES.index(f.lobe))
    return (1, SIDES.index(f.laterality))


def render_report(gt: GroundTruth, style_seed: int, structured: bool = True) -> StructuredReport:
    """Render labels as sectioned report text.

    Positive findings are stated at their most specific known location and
    absent findings are negated explicitly. ``style_seed`` only picks among
    synonymous phrasings. With ``structured=False`` sentences are shuffled
    into one merged section.
    """
    try:
        gt.check_hierarchy()
    except InvariantError as exc:
        raise InvariantError(f"cannot render inconsistent ground truth: {exc}") from exc
    rng = np.random.default_rng(style_seed)
    order = ("ggo", "consolidation", "nodule", "pleural_effusion")  # presence question order
    sections: "OrderedDict[str, list[str]]" = OrderedDict((s, []) for s in grammar.SECTIONS)
    for kind in order:
        hits = sorted({(f.laterality, f.lobe) for f in gt.findings if f.kind == kind},
                      key=lambda loc: _location_rank(FindingSpec(kind, loc[0], loc[1])))
        section = sections[grammar.SECTION_OF[kind]]
        if not hits:
            section.append(grammar.negative_sentence(kind, int(rng.integers(grammar.N_VARIANTS))))
        for side, lobe in hits:
            section.append(grammar.positive_sentence(kind, side, lobe, int(rng.integers(grammar.N_VARIANTS))))
    if not structured:
        merged = [s for sents in sections.values() for s in sents]
        merged = [merged[i] for i in rng.permutation(len(merged))]
        sections = OrderedDict([(grammar.UNSTRUCTURED_SECTION, merged)])
    flat = " ".join(f"{name}: " + " ".join(sents) for name, sents in sections.items() if sents)
    return StructuredReport(sections, flat)


@dataclass
class DatasetItem:
    id: str
    seed: int
    gt: GroundTruth
    report: StructuredReport


class Dataset:
    """Phantom triples; volumes are regenerated from seeds or read from disk on demand."""

    def __init__(self, config: DatasetConfig, seed: int, items: list[DatasetItem], root: Optional[Path] = None):
        self.config = config
        self.seed = seed
        self.items = items
        self.root = Path(root) if root is not None else None

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i) -> DatasetItem:
        return self.items[i]

    def volume(self, i: int) -> PhantomVolume:
        item = self.items[i]
        if self.root is not None and (self.root / "volumes" / f"{item.id}.npy").exists():
            data = np.load(self.root / "volumes" / f"{item.id}.npy")
            names = self.config.window_names or tuple(f"window[{lo:g},{hi:g}]" for lo, hi in self.config.windows)
            return PhantomVolume(np.ascontiguousarray(data, dtype=np.float32), 1.0, tuple(names))
        return generate_phantom(item.seed, self.config)[0]

    def label_matrix(self, qs_id: str) -> np.ndarray:
        return np.stack([item.gt.labels()[qs_id].values for item in self.items]).astype(np.int8)

    def class_distribution(self) -> dict:
        out = {}
        for qs_id in QS_ORDER:
            m = self.label_matrix(qs_id)
            qs = self.items[0].gt.labels()[qs_id].qs
            pos = m.sum(0)
            out[qs_id] = {q: {"pos": int(p), "neg": int(len(self) - p)} for q, p in zip(qs.questions, pos)}
        return out


def make_dataset(n: int, seed: int, config: Optional[DatasetConfig] = None,
                 out_dir: Optional[os.PathLike] = None) -> Dataset:
    """Generate ``n`` (volume, labels, report) triples with seeds derived from ``(seed, index)``.

    When ``out_dir`` is given the dataset is also written there (see
    :func:`write_dataset`).
    """
    if n < 1:
        raise ConfigError("dataset size must be >= 1")
    config = config or DatasetConfig()
    config.validate()
    items = []
    volumes = {} if out_dir is not None else None
    for index in range(n):
        item_seed = derive_seed(seed, index)
        volume, gt = generate_phantom(item_seed, config)
        report = render_report(gt, item_seed, structured=config.structured)
        item = DatasetItem(f"{index:06d}", item_seed, gt, report)
        items.append(item)
        if volumes is not None:
            volumes[item.id] = volume.data
    dataset = Dataset(config, seed, items)
    if out_dir is not None:
        write_dataset(dataset, out_dir, volumes)
    return dataset


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2) + "\n").encode()


def write_dataset(dataset: Dataset, out_dir: os.PathLike, volumes: Optional[dict] = None,
                  include_volumes: bool = True) -> Path:
    """Persist a dataset.

    Layout: ``volumes/<id>.npy`` (little-endian float32 ``[C, H, W, D]`` with
    the standard .npy shape header), ``labels/<id>.json`` (question set ->
    ordered question -> 0/1), ``reports/<id>.json`` (sections + flat_text),
    ``manifest.json`` and ``class_distribution.csv``. With
    ``include_volumes=False`` the volume files are skipped; loading then
    regenerates each volume from its recorded seed.
    """
    root = Path(out_dir)
    try:
        for sub in ("volumes", "labels", "reports"):
            (root / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {root}: {exc}") from exc
    for i, item in enumerate(dataset.items):
        if include_volumes:
            data = volumes[item.id] if volumes is not None else dataset.volume(i).data
            np.save(root / "volumes" / f"{item.id}.npy", np.asarray(data, dtype="<f4"))
        labels = {qs: lv.to_dict() for qs, lv in item.gt.labels().items()}
        (root / "labels" / f"{item.id}.json").write_bytes(_json_bytes(labels))
        (root / "reports" / f"{item.id}.json").write_bytes(_json_bytes(item.report.to_dict()))
    distribution = dataset.class_distribution()
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "grammar_version": grammar.GRAMMAR_VERSION,
        "config": dataset.config.to_dict(),
        "seed": dataset.seed,
        "n": len(dataset),
        "items": [
            {"id": it.id, "seed": it.seed, "findings": [_finding_dict(f) for f in it.gt.findings]}
            for it in dataset.items
        ],
        "class_distribution": distribution,
    }
    (root / "manifest.json").write_bytes(_json_bytes(manifest))
    (root / "class_distribution.csv").write_text(class_distribution_csv(distribution))
    return root


def _finding_dict(f: FindingSpec) -> dict:
    d = asdict(f)
    d["center"] = list(f.center) if f.center is not None else None
    return d


def class_distribution_csv(distribution: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Set", "Question", "Pos", "Neg"])
    for qs_id, rows in distribution.items():
        for q, c in rows.items():
            w.writerow([qs_id, q, c["pos"], c["neg"]])
    return buf.getvalue()


def load_dataset(path: os.PathLike) -> Dataset:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{manifest_path} not found (produce it with `dcppd gen-data`)")
    manifest = json.loads(manifest_path.read_text())
    config = DatasetConfig.from_dict(manifest["config"])
    sets = default_sets(config.qs1_subset)
    items = []
    for entry in manifest["items"]:
        labels = json.loads((root / "labels" / f"{entry['id']}.json").read_text())
        findings = [
            FindingSpec(**{**f, "center": tuple(f["center"]) if f["center"] is not None else None})
            for f in entry["findings"]
        ]
        lv = [LabelVector.from_dict(sets[qs], labels[qs]) for qs in QS_ORDER]
        gt = GroundTruth(findings, *lv)
        report = StructuredReport.from_dict(json.loads((root / "reports" / f"{entry['id']}.json").read_text()))
        items.append(DatasetItem(entry["id"], entry["seed"], gt, report))
    return Dataset(config, manifest["seed"], items, root)
