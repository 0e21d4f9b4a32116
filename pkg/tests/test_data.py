import numpy as np
import pytest

from kgans.data import Dataset, ToySpec, load_csv, make_toy, save_csv, subsample_labels
from kgans.errors import ContractError, ParseError


def nearest_center_distance(points, centers):
    return np.min(np.linalg.norm(points[:, None] - np.asarray(centers)[None], axis=2), axis=1)


@pytest.mark.parametrize("preset", ["td1", "td2", "td3"])
def test_points_inside_disks(preset):
    spec = ToySpec.preset(preset, n=3000, seed=4)
    ds = make_toy(spec)
    assert len(ds) == 3000
    assert np.all(nearest_center_distance(ds.points, spec.centers) <= spec.radius + 1e-12)


def test_td1_geometry():
    spec = ToySpec.preset("td1")
    assert spec.centers == ((-0.5, 0.0), (0.5, 0.0)) and spec.radius == 0.25


def test_td3_has_four_clusters():
    spec = ToySpec.preset("td3", n=4000, seed=1)
    ds = make_toy(spec)
    counts = np.bincount([int(l) for l in ds.labels], minlength=4)
    assert len(spec.centers) == 4 and np.all(counts > 0)
    # labels agree with the nearest center
    nearest = np.argmin(np.linalg.norm(ds.points[:, None] - np.asarray(spec.centers)[None], axis=2), axis=1)
    assert [int(l) for l in ds.labels] == nearest.tolist()


def test_cluster_counts_plausible():
    ds = make_toy(ToySpec.preset("td2", n=3000, seed=2))
    counts = np.bincount([int(l) for l in ds.labels])
    assert np.all(counts >= 0.1 * 1000)


def test_seed_determinism():
    a = make_toy(ToySpec.preset("td2", n=500, seed=9))
    b = make_toy(ToySpec.preset("td2", n=500, seed=9))
    assert a.points.tobytes() == b.points.tobytes()


@pytest.mark.parametrize(
    "kwargs, field",
    [
        ({"centers": ((0, 0),), "radius": 0.0}, "radius"),
        ({"centers": ((0, 0),), "radius": 0.2, "n": 0}, "n"),
        ({"centers": ((1.5, 0),), "radius": 0.2}, "centers"),
    ],
)
def test_invalid_spec(kwargs, field):
    with pytest.raises(ContractError, match=field):
        ToySpec(**kwargs)


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    ds = Dataset(rng.normal(size=(50, 3)) * 1e3, [None if i % 3 else str(i) for i in range(50)])
    save_csv(ds, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv")
    assert back.points.tobytes() == ds.points.tobytes()
    assert back.labels == ds.labels


def test_csv_without_labels(tmp_path):
    ds = Dataset(np.array([[0.1, 0.2], [1 / 3, 2 / 3]]))
    save_csv(ds, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv")
    assert back.labels is None and back.points.tobytes() == ds.points.tobytes()


def test_csv_header_only(tmp_path):
    (tmp_path / "d.csv").write_text("x0,x1,label\n")
    with pytest.raises(ContractError, match="no rows"):
        load_csv(tmp_path / "d.csv")


def test_csv_malformed_row_reports_line(tmp_path):
    (tmp_path / "d.csv").write_text("x0,x1,label\n0.1,0.2,\n0.3,oops,\n")
    with pytest.raises(ParseError, match="line 3"):
        load_csv(tmp_path / "d.csv")


def test_subsample_labels():
    ds = make_toy(ToySpec.preset("td1", n=100, seed=0))
    assert subsample_labels(ds, 1.0).labels == ds.labels
    assert all(l is None for l in subsample_labels(ds, 0.0).labels)
    half = subsample_labels(ds, 0.5, seed=3)
    assert sum(l is not None for l in half.labels) == 50
    assert half.labels == subsample_labels(ds, 0.5, seed=3).labels


def test_subsample_needs_labels():
    with pytest.raises(ContractError):
        subsample_labels(Dataset(np.zeros((3, 2))), 0.5)
