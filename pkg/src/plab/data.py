"""Synthetic 6-channel plate/well datasets.

Each treated sample shows a cell-like Gaussian blob on a per-channel
background; a class perturbation adds an oriented grating inside the blob,
with a class-specific orientation, frequency and per-channel amplitude.
Junk classes exist in the label space but receive no samples.  Every plate
carries one negative-control well (blob only) and one positive-control well
(the texture of a known class), two imaging sites per well, and border wells
are never used.

On disk: ``manifest.csv``, ``dataset_spec.txt`` and ``images/<id>_c<k>.pgm``
(16-bit P5, one file per channel).
"""

from __future__ import annotations

import csv
import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pgm import read_pgm_unit, write_pgm16

CELL_TYPES = ("HUVEC", "RPE", "HepG2", "U2OS")
NUM_CHANNELS = 6
PLATE_ROWS, PLATE_COLS = 16, 24
MANIFEST_COLUMNS = ["id", "plate", "well_row", "well_col", "site", "cell_type", "class_label", "control", "split"]
VAL_FRACTION = 0.2

# channel 1 varies most from image to image, channel 4 least
DEFAULT_CHANNEL_MEAN_VARIANCES = (4e-3, 1.5e-3, 1e-3, 1e-4, 2e-3, 6e-4)
_BASE_LEVEL = (0.18, 0.22, 0.15, 0.25, 0.20, 0.17)
_CELL_GAIN = {"HUVEC": 1.0, "RPE": 0.92, "HepG2": 1.08, "U2OS": 0.96}
_PIXEL_NOISE = 0.03
_BLOB_LEVEL = 0.12
_GRATING_LEVEL = 0.45


class MissingPlaneError(FileNotFoundError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class DatasetSpec:
    num_classes: int = 10
    junk_classes: int = 2
    profile: list[tuple[int, int]] = field(default_factory=lambda: [(40, 8)])
    image_size: int = 64
    channel_mean_variances: tuple[float, ...] = DEFAULT_CHANNEL_MEAN_VARIANCES
    seed: int = 0
    unlabeled_fraction: float = 0.0
    plates: int = 8

    def validate(self) -> None:
        real = sum(size for _, size in self.profile)
        if real != self.num_classes - self.junk_classes:
            raise ValueError(
                f"class-set profile covers {real} classes but num_classes - junk_classes = "
                f"{self.num_classes - self.junk_classes}"
            )
        if real < 1 or self.junk_classes < 0:
            raise ValueError("need at least one real class and a non-negative junk count")
        if any(count < 0 or size < 0 for count, size in self.profile):
            raise ValueError("profile entries must be non-negative")
        if len(self.channel_mean_variances) != NUM_CHANNELS or min(self.channel_mean_variances) < 0:
            raise ValueError("need 6 non-negative channel mean variances")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if not 0.0 <= self.unlabeled_fraction < 1.0:
            raise ValueError("unlabeled_fraction must lie in [0, 1)")
        if self.plates < 1:
            raise ValueError("need at least one plate")
        wells = (PLATE_ROWS - 2) * (PLATE_COLS - 2) - 2
        if sum(-(-c // 2) * s for c, s in self.profile) > wells * self.plates:
            raise ValueError("profile does not fit on the requested plates")

    @property
    def real_classes(self) -> int:
        return self.num_classes - self.junk_classes

    def junk_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_classes, dtype=bool)
        mask[self.real_classes:] = True
        return mask

    def class_counts(self) -> list[int]:
        counts: list[int] = []
        for count, size in self.profile:
            counts.extend([count] * size)
        return counts + [0] * self.junk_classes

    def to_items(self) -> list[tuple[str, str]]:
        return [
            ("num_classes", str(self.num_classes)),
            ("junk_classes", str(self.junk_classes)),
            ("profile", ";".join(f"{c}x{s}" for c, s in self.profile)),
            ("image_size", str(self.image_size)),
            ("channel_mean_variances", ",".join(repr(v) for v in self.channel_mean_variances)),
            ("seed", str(self.seed)),
            ("unlabeled_fraction", repr(self.unlabeled_fraction)),
            ("plates", str(self.plates)),
        ]

    @classmethod
    def from_items(cls, items: dict[str, str]) -> DatasetSpec:
        kw: dict = {}
        for key in ("num_classes", "junk_classes", "image_size", "seed", "plates"):
            if key in items:
                kw[key] = int(items[key])
        if "unlabeled_fraction" in items:
            kw["unlabeled_fraction"] = float(items["unlabeled_fraction"])
        if "profile" in items:
            kw["profile"] = parse_profile(items["profile"])
        if "channel_mean_variances" in items:
            kw["channel_mean_variances"] = tuple(float(v) for v in items["channel_mean_variances"].split(","))
        return cls(**kw)


def parse_profile(text: str) -> list[tuple[int, int]]:
    """``"3x2;4x2;5x4"`` -> [(3, 2), (4, 2), (5, 4)] as (samples per class, classes)."""
    out = []
    for part in text.replace(" ", "").split(";"):
        if part:
            count, size = part.lower().split("x")
            out.append((int(count), int(size)))
    return out


@dataclass
class ImageSample:
    id: str
    planes: np.ndarray
    cell_type: str
    class_label: int | None
    control: str
    plate: int
    well_row: int
    well_col: int
    site: int
    split: str = "train"

    @property
    def cell_onehot(self) -> np.ndarray:
        return cell_onehot(self.cell_type)


def cell_onehot(cell_type: str) -> np.ndarray:
    v = np.zeros(len(CELL_TYPES))
    v[CELL_TYPES.index(cell_type)] = 1.0
    return v


def _unit_hash(text: str) -> float:
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2.0**64


def hash_split(sample_id: str, unlabeled_fraction: float = 0.0) -> str:
    """Deterministic 80/20 train/val split; a further share of train is unlabeled."""
    if _unit_hash("val:" + sample_id) < VAL_FRACTION:
        return "val"
    if _unit_hash("unlabeled:" + sample_id) < unlabeled_fraction:
        return "unlabeled"
    return "train"


@dataclass(frozen=True)
class ClassTexture:
    orientation: float
    frequency: float
    amplitudes: np.ndarray


def class_textures(spec: DatasetSpec) -> list[ClassTexture]:
    """Orientation/frequency/channel-gain triple for every real class.

    Each class has one dominant channel (gain 1) and one secondary channel
    (gain 0.7); the remaining channels carry a faint copy of the texture.

    Orientations are spread evenly over [0, pi); two frequencies alternate so
    neighbouring orientations also differ in scale.
    """
    rng = np.random.default_rng([spec.seed, 7919])
    r = spec.real_classes
    out = []
    for c in range(r):
        amp = rng.uniform(0.0, 0.15, size=NUM_CHANNELS)
        amp[c % NUM_CHANNELS] = 1.0
        # a second bright channel keeps classes sharing a dominant channel apart
        amp[(c + 1 + (2 + c // NUM_CHANNELS) % 5) % NUM_CHANNELS] = 0.7
        out.append(
            ClassTexture(
                orientation=math.pi * c / r,
                frequency=(0.09, 0.16)[c % 2] * 64 / spec.image_size,
                amplitudes=amp,
            )
        )
    return out


def render_image(
    spec: DatasetSpec,
    texture: ClassTexture | None,
    cell_type: str,
    rng: np.random.Generator,
) -> np.ndarray:
    """6 x S x S planes in [0, 1]; ``texture=None`` is the unperturbed cell."""
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    cy, cx = rng.uniform(0.3 * s, 0.7 * s, size=2)
    sigma = s * rng.uniform(0.16, 0.22)
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    gain = _CELL_GAIN[cell_type]
    shifts = rng.normal(0.0, np.sqrt(np.asarray(spec.channel_mean_variances)))
    planes = np.empty((NUM_CHANNELS, s, s))
    if texture is not None:
        u = xx * math.cos(texture.orientation) + yy * math.sin(texture.orientation)
        phase = rng.uniform(0, 2 * math.pi)
        grating = 0.5 + 0.5 * np.cos(2 * math.pi * texture.frequency * u + phase)
    for ch in range(NUM_CHANNELS):
        plane = _BASE_LEVEL[ch] + shifts[ch] + _BLOB_LEVEL * blob
        if texture is not None:
            plane = plane + _GRATING_LEVEL * texture.amplitudes[ch] * blob * grating
        plane = gain * plane + rng.normal(0.0, _PIXEL_NOISE, size=(s, s))
        planes[ch] = np.clip(plane, 0.0, 1.0)
    return planes


def _layout(spec: DatasetSpec) -> list[dict]:
    """Assign every sample to a plate, interior well and site."""
    rng = np.random.default_rng([spec.seed, 104729])
    interior = [(r, c) for r in range(2, PLATE_ROWS) for c in range(2, PLATE_COLS)]
    controls, treat_wells = interior[:2], interior[2:]
    units = []  # (class, sites in this well)
    for cls, count in enumerate(spec.class_counts()):
        full, rest = divmod(count, 2)
        units += [(cls, 2)] * full + ([(cls, 1)] if rest else [])
    order = rng.permutation(len(units))
    next_well = [0] * spec.plates
    rows: list[dict] = []
    for k, u in enumerate(order):
        cls, sites = units[u]
        plate = k % spec.plates + 1
        well = treat_wells[next_well[plate - 1]]
        next_well[plate - 1] += 1
        for site in range(1, sites + 1):
            rows.append(dict(plate=plate, well=well, site=site, class_label=cls, control="none"))
    for plate in range(1, spec.plates + 1):
        pos_class = (plate - 1) % spec.real_classes
        for site in (1, 2):
            rows.append(dict(plate=plate, well=controls[0], site=site, class_label=None, control="negative"))
            rows.append(dict(plate=plate, well=controls[1], site=site, class_label=pos_class, control="positive"))
    rows.sort(key=lambda r: (r["plate"], r["well"], r["site"]))
    return rows


def generate_dataset(spec: DatasetSpec, out_dir: str | Path) -> list[dict]:
    """Write images, manifest and spec echo under ``out_dir``; return manifest rows."""
    spec.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    textures = class_textures(spec)
    manifest = []
    for idx, slot in enumerate(_layout(spec)):
        plate = slot["plate"]
        row, col = slot["well"]
        sid = f"p{plate:02d}_r{row:02d}c{col:02d}_s{slot['site']}"
        cell_type = CELL_TYPES[(plate - 1) % len(CELL_TYPES)]
        label = slot["class_label"]
        control = slot["control"]
        rng = np.random.default_rng([spec.seed, idx, 31])
        tex = None if label is None else textures[label]
        planes = render_image(spec, tex, cell_type, rng)
        for ch in range(NUM_CHANNELS):
            write_pgm16(out / "images" / f"{sid}_c{ch + 1}.pgm", planes[ch])
        split = "test" if control != "none" else hash_split(sid, spec.unlabeled_fraction)
        shown = "" if label is None or split == "unlabeled" else str(label)
        manifest.append(
            dict(id=sid, plate=plate, well_row=row, well_col=col, site=slot["site"], cell_type=cell_type,
                 class_label=shown, control=control, split=split)
        )
    write_manifest(out / "manifest.csv", manifest)
    (out / "dataset_spec.txt").write_text("".join(f"{k}={v}\n" for k, v in spec.to_items()))
    return manifest


def write_manifest(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in MANIFEST_COLUMNS})


def read_manifest(root: str | Path) -> list[dict]:
    path = Path(root) / "manifest.csv"
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames)
        if missing:
            raise ManifestError(f"{path}: missing columns {sorted(missing)}")
        return list(reader)


def read_dataset_spec(root: str | Path) -> DatasetSpec:
    lines = (Path(root) / "dataset_spec.txt").read_text().splitlines()
    return DatasetSpec.from_items(dict(line.split("=", 1) for line in lines if "=" in line))


def load_sample(root: str | Path, row: dict | str) -> ImageSample:
    """Load the six planes of one manifest row (or sample id) from ``root``."""
    root = Path(root)
    if isinstance(row, str):
        matches = [r for r in read_manifest(root) if r["id"] == row]
        if not matches:
            raise ManifestError(f"sample {row!r} not in manifest")
        row = matches[0]
    planes = []
    for ch in range(1, NUM_CHANNELS + 1):
        path = root / "images" / f"{row['id']}_c{ch}.pgm"
        if not path.exists():
            raise MissingPlaneError(f"sample {row['id']}: missing channel {ch} ({path.name})")
        planes.append(read_pgm_unit(path))
    if any(p.shape != planes[0].shape for p in planes):
        raise ManifestError(f"sample {row['id']}: channel planes differ in size")
    label = row["class_label"]
    return ImageSample(
        id=row["id"],
        planes=np.stack(planes),
        cell_type=row["cell_type"],
        class_label=int(label) if label != "" else None,
        control=row["control"],
        plate=int(row["plate"]),
        well_row=int(row["well_row"]),
        well_col=int(row["well_col"]),
        site=int(row["site"]),
        split=row["split"],
    )


@dataclass
class ArraySet:
    """Stacked samples ready for the model."""

    ids: list[str]
    images: np.ndarray
    cell_onehots: np.ndarray
    labels: np.ndarray  # -1 where unknown
    controls: list[str]

    def __len__(self) -> int:
        return len(self.ids)


def load_arrays(root: str | Path, splits: tuple[str, ...], rows: list[dict] | None = None) -> ArraySet:
    rows = read_manifest(root) if rows is None else rows
    chosen = [r for r in rows if r["split"] in splits]
    samples = [load_sample(root, r) for r in chosen]
    if not samples:
        return ArraySet([], np.zeros((0, NUM_CHANNELS, 0, 0)), np.zeros((0, len(CELL_TYPES))), np.zeros(0, int), [])
    return ArraySet(
        ids=[s.id for s in samples],
        images=np.stack([s.planes for s in samples]),
        cell_onehots=np.stack([s.cell_onehot for s in samples]),
        labels=np.array([-1 if s.class_label is None else s.class_label for s in samples], dtype=np.int64),
        controls=[s.control for s in samples],
    )


# ---------------------------------------------------------------------------
# statistics


@dataclass
class DatasetReport:
    class_counts: dict[int, int]
    control_counts: dict[str, int]
    split_counts: dict[str, int]
    channel_means: np.ndarray  # samples x 6, mean pixel value per image and channel
    histogram_edges: np.ndarray
    channel_histograms: np.ndarray  # 6 x bins

    @property
    def total(self) -> int:
        return sum(self.split_counts.values())

    @property
    def channel_mean_variance(self) -> np.ndarray:
        if len(self.channel_means) == 0:
            return np.zeros(NUM_CHANNELS)
        return self.channel_means.var(axis=0)

    def rows(self) -> list[tuple[str, str, str]]:
        out = [("class_count", str(k), str(v)) for k, v in sorted(self.class_counts.items())]
        out += [("control_count", k, str(v)) for k, v in sorted(self.control_counts.items())]
        out += [("split_count", k, str(v)) for k, v in sorted(self.split_counts.items())]
        if len(self.channel_means):
            for ch, var in enumerate(self.channel_mean_variance, start=1):
                out.append(("channel_mean_variance", f"c{ch}", f"{var:.10g}"))
            for ch in range(NUM_CHANNELS):
                for b in range(self.channel_histograms.shape[1]):
                    lo, hi = self.histogram_edges[b], self.histogram_edges[b + 1]
                    out.append(("channel_mean_hist", f"c{ch + 1}[{lo:.2f},{hi:.2f})", str(int(self.channel_histograms[ch, b]))))
        return out


def dataset_stats(root: str | Path, bins: int = 20) -> DatasetReport:
    """Class counts, control counts and per-channel mean-pixel histograms."""
    rows = read_manifest(root)
    class_counts = Counter(int(r["class_label"]) for r in rows if r["class_label"] != "" and r["control"] == "none")
    control_counts = Counter(r["control"] for r in rows)
    split_counts = Counter(r["split"] for r in rows)
    means = np.array([load_sample(root, r).planes.mean(axis=(1, 2)) for r in rows]).reshape(-1, NUM_CHANNELS)
    edges = np.linspace(0.0, 1.0, bins + 1)
    hist = np.stack([np.histogram(means[:, ch], bins=edges)[0] for ch in range(NUM_CHANNELS)])
    return DatasetReport(dict(class_counts), dict(control_counts), dict(split_counts), means, edges, hist)


def write_stats_csv(report: DatasetReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["section", "key", "value"])
        w.writerows(report.rows())
