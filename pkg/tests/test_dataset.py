import numpy as np
import pytest

from neuralpath.corpus import make_corpus
from neuralpath.dataset import PathDataset, build_dataset, normalize_points, rasterize_record
from neuralpath.errors import DatasetError
from neuralpath.geometry import K_MAX, path_area, polygon_path
from neuralpath.svgio import SvgDocument, SvgPath, write_svg


def _square(x0, y0, w):
    return polygon_path([(x0, y0), (x0 + w, y0), (x0 + w, y0 + w), (x0, y0 + w)]).valid


def test_duplicate_squares_dedup(tmp_path):
    doc = SvgDocument(100, 100, [SvgPath(_square(10, 10, 30), True), SvgPath(_square(50, 50, 30), True)])
    write_svg(doc, tmp_path / "icon.svg")
    ds = build_dataset(tmp_path)
    assert len(ds) == 1
    assert ds.manifest["filter_stats"]["duplicates"] == 1


def test_long_paths_filtered(tmp_path):
    ang = np.linspace(0, 2 * np.pi, 18, endpoint=False)
    long_pts = []
    for a, b in zip(ang, np.roll(ang, -1)):
        pa, pb = np.array([np.cos(a), np.sin(a)]), np.array([np.cos(b), np.sin(b)])
        long_pts += [pa, pa + (pb - pa) / 3, pa + 2 * (pb - pa) / 3]
    long_pts = np.array(long_pts[:53]) * 40 + 50
    assert len(long_pts) == 53
    doc = SvgDocument(100, 100, [SvgPath(long_pts, False), SvgPath(_square(10, 10, 30), True)])
    write_svg(doc, tmp_path / "icon.svg")
    ds = build_dataset(tmp_path)
    assert len(ds) == 1
    assert ds.manifest["filter_stats"]["too_long"] == 1


def test_record_raster_matches_area():
    pts = normalize_points(_square(0, 0, 1))
    p = polygon_path(pts[::3])
    on = 1.0 - rasterize_record(p)
    assert on.mean() == pytest.approx(path_area(p), abs=0.02)


def test_normalization_range():
    pts = normalize_points(np.random.default_rng(0).random((9, 2)) * 300 - 40)
    assert pts.min() >= 0.05 - 1e-12 and pts.max() <= 0.95 + 1e-12


def test_empty_corpus_raises(tmp_path):
    with pytest.raises(DatasetError):
        build_dataset(tmp_path)


def test_build_is_deterministic_and_roundtrips(tmp_path):
    make_corpus(tmp_path / "c", n_files=20, seed=3)
    a = build_dataset(tmp_path / "c", seed=1)
    b = build_dataset(tmp_path / "c", seed=1)
    assert a.keys == b.keys and np.array_equal(a.points, b.points)
    a.save(tmp_path / "ds.npz")
    c = PathDataset.load(tmp_path / "ds.npz")
    assert c.keys == a.keys and np.array_equal(c.points, a.points)
    assert np.abs(c.rasters - a.rasters).max() <= 0.5 / 255 + 1e-6
    assert set(np.unique(a.split)) <= {0, 1}
    assert a.points.shape[1] == K_MAX


def test_take_and_subset(tmp_path):
    make_corpus(tmp_path / "c", n_files=30, seed=0)
    ds = build_dataset(tmp_path / "c", val_fraction=0.2)
    head = ds.take(40)
    assert len(head) == 40 and head.keys == ds.keys[:40]
    assert head.manifest["record_count"] == 40
    assert len(ds.subset("train")) + len(ds.subset("val")) == len(ds)
    t = ds.tensors()
    assert t["aux_mask"].sum(1).min() > 0
    assert t["images"].shape[1:] == (1, 64, 64)


def test_bad_container(tmp_path):
    (tmp_path / "x.npz").write_bytes(b"nope")
    with pytest.raises(DatasetError):
        PathDataset.load(tmp_path / "x.npz")
