import numpy as np
import pytest

from phaserec.core import PhaseLabel
from phaserec.dicom import DEFAULT_WHITELIST, EXPLICIT_VR_LE, as_tag, load_scans, read_dicom
from phaserec.evaluate import read_labels
from phaserec.synth import PhantomConfig, aorta_mask, export_dicom, generate_dataset

SMALL = PhantomConfig(min_slices=3, max_slices=6, dims=24, seed=5)


def test_deterministic():
    a = generate_dataset(SMALL, 2, 2)
    b = generate_dataset(SMALL, 2, 2)
    for x, y in zip(a, b):
        assert x.scan.volume.tobytes() == y.scan.volume.tobytes()
        assert (x.series_uid, x.label) == (y.series_uid, y.label)
    c = generate_dataset(PhantomConfig(min_slices=3, max_slices=6, dims=24, seed=6), 2, 2)
    assert a[0].scan.volume.tobytes() != c[0].scan.volume.tobytes()


def test_noiseless_aorta_level_is_configured_mean():
    cfg = PhantomConfig(min_slices=2, max_slices=4, dims=32, noise_sigma=0, aorta_std=(0, 0, 0, 0))
    for ls in generate_dataset(cfg, 2, 4):
        for i in range(len(ls)):
            mask = aorta_mask(cfg, ls.aorta_centers[i])
            assert ls.scan.volume[i][mask].mean() == cfg.aorta_mean[ls.label]


def test_structure_of_forty_studies():
    cfg = PhantomConfig(min_slices=1, max_slices=2, dims=16)
    scans = generate_dataset(cfg, 40, 3)
    assert len(scans) == 120
    studies = {}
    for s in scans:
        studies.setdefault(s.study_uid, []).append(s)
        assert cfg.min_slices <= len(s) <= cfg.max_slices
    assert len(studies) == 40 and all(len(v) == 3 for v in studies.values())
    counts = np.bincount([int(s.label) for s in scans], minlength=4)
    np.testing.assert_array_equal(counts, [30, 30, 30, 30])


def test_uninformative_slices_share_one_distribution():
    cfg = PhantomConfig(min_slices=40, max_slices=40, dims=24, uninformative_fraction=1.0, noise_sigma=0,
                        background_std=(0, 0, 0, 0))
    vols = [s.scan.volume for s in generate_dataset(cfg, 2, 4)]
    assert all(np.array_equal(v, vols[0]) for v in vols)


def test_label_noise_renders_other_phases():
    cfg = PhantomConfig(min_slices=200, max_slices=200, dims=16, slice_label_noise=0.3, seed=1)
    ls = generate_dataset(cfg, 2, 1)[0]
    flipped = np.mean(ls.rendered_phase != int(ls.label))
    assert 0.2 < flipped < 0.4


def test_validation():
    for bad in [dict(dims=8), dict(min_slices=5, max_slices=4), dict(noise_sigma=-1),
                dict(slice_label_noise=1.5), dict(aorta_mean=(1, 2))]:
        with pytest.raises(ValueError):
            PhantomConfig(**bad)
    with pytest.raises(ValueError):
        generate_dataset(SMALL, 1, 3)


def test_export_round_trip(tmp_path):
    scans = generate_dataset(SMALL, 2, 2)
    summary = export_dicom(scans, tmp_path)
    files = sorted(tmp_path.rglob("*.dcm"))
    assert summary.n_files == len(files) == sum(len(s) for s in scans)
    labels = read_labels(summary.labels_path)
    assert [(r.series_uid, r.phase) for r in labels] == [(s.series_uid, s.label) for s in scans]

    ds = read_dicom(files[0])
    assert ds.transfer_syntax == EXPLICIT_VR_LE
    assert {t for t in ds.tags if t.group != 0x0002} <= DEFAULT_WHITELIST
    assert ds.get("RescaleSlope") == 1 and ds.get("RescaleIntercept") == -1024

    loaded = load_scans(tmp_path, {r.series_uid: r.phase for r in labels})
    by_uid = {s.series_uid: s for s in scans}
    for scan in loaded:
        orig = by_uid[scan.series_uid].scan
        np.testing.assert_array_equal(scan.volume, orig.volume)
        assert scan.label == orig.label and scan.study_uid == orig.study_uid
        assert f"{tmp_path}/{scan.study_uid}/{scan.series_uid}" in str(next(tmp_path.rglob(f"*{scan.series_uid}")))


def test_phi_export(tmp_path):
    export_dicom(generate_dataset(SMALL, 2, 1), tmp_path, include_phi=True)
    ds = read_dicom(next(tmp_path.rglob("*.dcm")))
    assert as_tag("PatientName") in ds and ds.get("PatientBirthDate") == "19600101"
