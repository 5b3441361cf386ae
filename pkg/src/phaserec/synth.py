"""Synthetic abdominal CT phantoms with phase-dependent contrast.

Each slice shows a body ellipse of soft tissue surrounded by air, an
elliptical parenchyma region and a circular aorta.  Aorta and parenchyma
HU depend on the scan's phase.  "Uninformative" slices omit both
contrast-bearing regions and are drawn from the same distribution for
every phase, so no classifier can tell them apart.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .core import N_CLASSES, CtScan, PhaseLabel
from .dicom import CT_IMAGE_STORAGE, DicomDataset, DicomElement, file_meta, write_fixture
from .evaluate import LabelRow, write_labels

UID_ROOT = "1.2.826.0.1.3680043.9.7433.2"
AIR_HU = -1000.0
RESCALE_INTERCEPT = -1024
HU_MIN, HU_MAX = -1024, 3071


@dataclass(frozen=True)
class PhantomConfig:
    min_slices: int = 30
    max_slices: int = 80
    dims: int = 64
    # per phase, in PhaseLabel order: non-contrast, arterial, venous, other
    aorta_mean: tuple = (45.0, 300.0, 150.0, 90.0)
    aorta_std: tuple = (5.0, 15.0, 10.0, 8.0)
    parenchyma_mean: tuple = (55.0, 70.0, 110.0, 85.0)
    parenchyma_std: tuple = (4.0, 5.0, 6.0, 5.0)
    background_mean: tuple = (40.0, 40.0, 40.0, 40.0)
    background_std: tuple = (3.0, 3.0, 3.0, 3.0)
    noise_sigma: float = 15.0
    uninformative_fraction: float = 0.0
    slice_label_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.dims < 16:
            raise ValueError("dims must be >= 16")
        if not 1 <= self.min_slices <= self.max_slices:
            raise ValueError("need 1 <= min_slices <= max_slices")
        for name in ("uninformative_fraction", "slice_label_noise"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be a probability")
        for name in ("aorta_mean", "aorta_std", "parenchyma_mean", "parenchyma_std",
                     "background_mean", "background_std"):
            if len(getattr(self, name)) != N_CLASSES:
                raise ValueError(f"{name} needs one value per phase")
        stds = (*self.aorta_std, *self.parenchyma_std, *self.background_std, self.noise_sigma)
        if min(stds) < 0:
            raise ValueError("standard deviations must be >= 0")

    @property
    def aorta_radius(self) -> float:
        return 0.09 * self.dims


@dataclass(eq=False)
class LabeledScan:
    scan: CtScan
    informative: np.ndarray
    aorta_centers: np.ndarray = field(repr=False)
    rendered_phase: np.ndarray = field(repr=False)

    @property
    def label(self) -> PhaseLabel:
        return self.scan.label

    @property
    def study_uid(self) -> str:
        return self.scan.study_uid

    @property
    def series_uid(self) -> str:
        return self.scan.series_uid

    def __len__(self) -> int:
        return len(self.scan)


def aorta_mask(cfg: PhantomConfig, center) -> np.ndarray:
    yy, xx = np.mgrid[0:cfg.dims, 0:cfg.dims]
    return (yy - center[0]) ** 2 + (xx - center[1]) ** 2 <= cfg.aorta_radius ** 2


def _uid(*parts) -> str:
    return ".".join([UID_ROOT, *(str(p) for p in parts)])


def render_scan(cfg: PhantomConfig, scan_index: int, phase: PhaseLabel, study_uid: str,
                series_uid: str) -> LabeledScan:
    rng = np.random.default_rng([cfg.seed, scan_index])
    n = int(rng.integers(cfg.min_slices, cfg.max_slices + 1))
    d = cfg.dims
    yy, xx = np.mgrid[0:d, 0:d].astype(np.float64)

    # per-scan region levels: the patient-to-patient spread of enhancement
    def levels(means, stds):
        return np.array([rng.normal(m, s) if s > 0 else float(m) for m, s in zip(means, stds)])

    aorta = levels(cfg.aorta_mean, cfg.aorta_std)
    paren = levels(cfg.parenchyma_mean, cfg.parenchyma_std)
    backg = levels(cfg.background_mean, cfg.background_std)

    informative = rng.random(n) >= cfg.uninformative_fraction
    rendered = np.full(n, int(phase))
    flip = rng.random(n) < cfg.slice_label_noise
    others = rng.integers(1, N_CLASSES, size=n)
    rendered[flip] = (int(phase) + others[flip]) % N_CLASSES

    # aorta stays inside the lower-right quadrant, parenchyma in the upper-left
    jitter = rng.uniform(-0.02 * d, 0.02 * d, size=(n, 2))
    centers = np.array([0.70 * d, 0.68 * d]) + jitter

    body = ((yy - 0.5 * d) / (0.42 * d)) ** 2 + ((xx - 0.5 * d) / (0.46 * d)) ** 2 <= 1.0
    paren_mask = ((yy - 0.30 * d) / (0.16 * d)) ** 2 + ((xx - 0.30 * d) / (0.18 * d)) ** 2 <= 1.0

    volume = np.empty((n, d, d))
    # with equal per-phase background settings, uninformative slices carry no phase signal
    body_level = backg[int(phase)]
    for i in range(n):
        img = np.full((d, d), AIR_HU)
        img[body] = body_level
        if informative[i]:
            ph = rendered[i]
            img[paren_mask] = paren[ph]
            img[aorta_mask(cfg, centers[i])] = aorta[ph]
        if cfg.noise_sigma > 0:
            img[body] += rng.normal(0.0, cfg.noise_sigma, size=int(body.sum()))
        volume[i] = img
    volume = np.clip(np.rint(volume), HU_MIN, HU_MAX)

    scan = CtScan(series_uid, study_uid, volume, tuple(range(1, n + 1)), phase)
    return LabeledScan(scan, informative, centers, rendered)


def iter_dataset(cfg: PhantomConfig, n_studies: int, scans_per_study: int) -> Iterator[LabeledScan]:
    """Yield scans one at a time; phases cycle round-robin over scans."""
    if n_studies < 2:
        raise ValueError("need at least 2 studies")
    if scans_per_study < 1:
        raise ValueError("need at least 1 scan per study")
    tag = cfg.seed % 10**8
    index = 0
    for study in range(n_studies):
        study_uid = _uid(tag, study + 1)
        for j in range(scans_per_study):
            phase = PhaseLabel(index % N_CLASSES)
            yield render_scan(cfg, index, phase, study_uid, _uid(tag, study + 1, j + 1))
            index += 1


def generate_dataset(cfg: PhantomConfig, n_studies: int, scans_per_study: int) -> list:
    return list(iter_dataset(cfg, n_studies, scans_per_study))


def slice_datasets(scan: CtScan, include_phi: bool = False) -> list:
    """One DICOM dataset per slice, raw = HU + 1024 with slope 1."""
    out = []
    for i, inst in enumerate(scan.instance_numbers):
        raw = (scan.volume[i] - RESCALE_INTERCEPT).astype("<u2")
        sop_uid = f"{scan.series_uid}.{inst}"
        els = file_meta(CT_IMAGE_STORAGE, sop_uid) + [
            DicomElement.from_value("SOPClassUID", "UI", CT_IMAGE_STORAGE),
            DicomElement.from_value("SOPInstanceUID", "UI", sop_uid),
            DicomElement.from_value("Modality", "CS", "CT"),
            DicomElement.from_value("SliceThickness", "DS", 5.0),
            DicomElement.from_value("StudyInstanceUID", "UI", scan.study_uid),
            DicomElement.from_value("SeriesInstanceUID", "UI", scan.series_uid),
            DicomElement.from_value("InstanceNumber", "IS", inst),
            DicomElement.from_value("ImagePositionPatient", "DS", [0.0, 0.0, -5.0 * inst]),
            DicomElement.from_value("ImageOrientationPatient", "DS", [1, 0, 0, 0, 1, 0]),
            DicomElement.from_value("Rows", "US", raw.shape[0]),
            DicomElement.from_value("Columns", "US", raw.shape[1]),
            DicomElement.from_value("PixelSpacing", "DS", [0.8, 0.8]),
            DicomElement.from_value("BitsAllocated", "US", 16),
            DicomElement.from_value("BitsStored", "US", 16),
            DicomElement.from_value("PixelRepresentation", "US", 0),
            DicomElement.from_value("WindowCenter", "DS", 50),
            DicomElement.from_value("WindowWidth", "DS", 400),
            DicomElement.from_value("RescaleIntercept", "DS", RESCALE_INTERCEPT),
            DicomElement.from_value("RescaleSlope", "DS", 1),
            DicomElement((0x7FE0, 0x0010), "OW", raw.tobytes()),
        ]
        if include_phi:
            study_no = scan.study_uid.rsplit(".", 1)[-1]
            els += [
                DicomElement.from_value("PatientName", "PN", f"DOE^JANE{study_no}"),
                DicomElement.from_value("PatientID", "LO", f"PID{study_no:0>6}"),
                DicomElement.from_value("PatientBirthDate", "DA", "19600101"),
                DicomElement.from_value("InstitutionName", "LO", "General Hospital"),
            ]
        out.append(DicomDataset(tuple(sorted(els, key=lambda e: e.tag))))
    return out


@dataclass(frozen=True)
class ExportSummary:
    n_files: int
    n_scans: int
    labels_path: Path


def export_dicom(scans: Sequence, out_dir, include_phi: bool = False) -> ExportSummary:
    """Write <out>/<study_uid>/<series_uid>/<instance>.dcm plus labels.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = []
    n_files = 0
    for item in scans:
        scan = item.scan if isinstance(item, LabeledScan) else item
        series_dir = out_dir / scan.study_uid / scan.series_uid
        series_dir.mkdir(parents=True, exist_ok=True)
        for inst, ds in zip(scan.instance_numbers, slice_datasets(scan, include_phi)):
            (series_dir / f"{inst:05d}.dcm").write_bytes(write_fixture(ds))
            n_files += 1
        labels.append(LabelRow(scan.series_uid, scan.study_uid, scan.label))
    labels_path = out_dir / "labels.csv"
    write_labels(labels_path, labels)
    return ExportSummary(n_files, len(labels), labels_path)
