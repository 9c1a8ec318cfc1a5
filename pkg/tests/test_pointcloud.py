import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bfgseg.errors import ConfigError, ContractError, ParseError
from bfgseg.pointcloud import (ClassGen, LabeledCloud, SceneSpec, augment, generate_scene,
                               parse_cloud_lines, read_cloud, read_ply_vertex_count, sample_block,
                               split_blocks, write_cloud, write_ply)


def uniform_cloud(n, extent, seed=0):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0, extent, (n, 2))
    coords = np.column_stack([xy, rng.uniform(0, 1, n)])
    return LabeledCloud(coords, rng.integers(0, 4, n), rng.random((n, 3)))


# generate_scene

def test_plane_only_scene():
    spec = SceneSpec(classes=(ClassGen("floor", "plane", (2.0, 3.0)),), n_points=4096, seed=7)
    cloud = generate_scene(spec)
    assert len(cloud) == 4096
    assert set(np.unique(cloud.labels)) <= {0, 1}


def test_default_scene_has_classes_and_background():
    cloud = generate_scene(SceneSpec(seed=3))
    labels = set(np.unique(cloud.labels).tolist())
    assert 0 in labels and len(labels - {0}) >= 2


def test_scene_determinism():
    a, b = generate_scene(SceneSpec(seed=11)), generate_scene(SceneSpec(seed=11))
    assert np.array_equal(a.coords, b.coords) and np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.colors, b.colors)
    c = generate_scene(SceneSpec(seed=12))
    assert not np.array_equal(a.coords[:10], c.coords[:10])


def test_box_extents_within_scale_range():
    spec = SceneSpec(classes=(ClassGen("box", "box", (0.5, 2.0), count=(1, 3)),),
                     n_points=3000, clutter_fraction=0.0, deformation=0.0)
    for seed in range(100):
        spec.seed = seed
        cloud = generate_scene(spec)
        for iid in np.unique(cloud.instances):
            pts = cloud.coords[cloud.instances == iid]
            ext = pts.max(axis=0) - pts.min(axis=0)
            assert np.all(ext <= 2.0 + 1e-9), (seed, ext)
            assert np.all(ext >= 0.5 - 1e-9), (seed, ext)


def test_objects_per_scene_keeps_always_classes():
    spec = SceneSpec(objects_per_scene=2, seed=5)
    labels = set(np.unique(generate_scene(spec).labels).tolist()) - {0}
    assert {1, 2} <= labels
    assert len(labels - {1, 2}) <= 2


@pytest.mark.parametrize("kwargs", [dict(classes=()), dict(n_points=0),
                                    dict(classes=(ClassGen("x", "box", (0.0, 1.0)),)),
                                    dict(classes=(ClassGen("x", "sphere"),)),
                                    dict(clutter_fraction=1.0)])
def test_invalid_spec(kwargs):
    with pytest.raises(ConfigError):
        generate_scene(SceneSpec(**kwargs))


# split_blocks

def test_split_2x2_into_four():
    cloud = uniform_cloud(2000, 2.0)
    blocks = split_blocks(cloud, 1.0)
    assert len(blocks) == 4
    assert sum(len(b) for b in blocks) == len(cloud)


def test_split_small_cloud_identity():
    cloud = uniform_cloud(300, 0.5)
    (block,) = split_blocks(cloud, 1.0)
    assert np.array_equal(block.coords, cloud.coords)
    assert np.array_equal(block.labels, cloud.labels)


def test_split_counting_oracle_10m():
    cloud = uniform_cloud(20000, 10.0, seed=4)
    blocks = split_blocks(cloud, 1.0)
    assert sum(len(b) for b in blocks) == len(cloud)
    for b in blocks:
        ext = b.coords[:, :2].max(axis=0) - b.coords[:, :2].min(axis=0)
        assert np.all(ext <= 1.0)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 400), extent=st.floats(0.1, 6.0), size=st.floats(0.3, 2.5),
       seed=st.integers(0, 10**6))
def test_split_partition_property(n, extent, size, seed):
    cloud = uniform_cloud(n, extent, seed)
    blocks = split_blocks(cloud, size)
    joined = np.concatenate([b.coords for b in blocks])
    assert joined.shape == cloud.coords.shape
    key = lambda a: a[np.lexsort(a.T[::-1])]
    assert np.array_equal(key(joined), key(cloud.coords))
    for b in blocks:
        ext = b.coords[:, :2].max(axis=0) - b.coords[:, :2].min(axis=0)
        assert np.all(ext <= size + 1e-12)


def test_split_rejects_nonpositive_size():
    with pytest.raises(ContractError):
        split_blocks(uniform_cloud(10, 1.0), 0.0)


# sample_block

def _ids(cloud):
    # coordinates are unique, so the x coordinate identifies the source point
    return cloud.coords[:, 0]


def test_sample_exhaustive_is_permutation():
    block = uniform_cloud(2048, 1.0)
    out = sample_block(block, 2048, seed=1)
    assert np.array_equal(np.sort(_ids(out)), np.sort(_ids(block)))


def test_sample_without_replacement():
    block = uniform_cloud(10000, 1.0)
    out = sample_block(block, 2048, seed=2)
    assert len(out) == 2048 and len(np.unique(_ids(out))) == 2048


def test_sample_small_block_keeps_every_point():
    block = uniform_cloud(100, 1.0)
    for seed in range(20):
        out = sample_block(block, 2048, seed)
        assert len(out) == 2048
        assert set(_ids(block)) <= set(_ids(out))


def test_sample_deterministic_and_label_preserving():
    block = uniform_cloud(700, 1.0)
    a, b = sample_block(block, 512, 9), sample_block(block, 512, 9)
    assert np.array_equal(a.coords, b.coords)
    lookup = dict(zip(_ids(block), block.labels))
    assert all(lookup[x] == l for x, l in zip(_ids(a), a.labels))


# augment

def test_augment_identity():
    cloud = uniform_cloud(50, 1.0)
    out = augment(cloud, 0.0, False, seed=3)
    assert np.array_equal(out.coords, cloud.coords)


def test_rotation_is_isometry():
    cloud = uniform_cloud(60, 2.0)
    out = augment(cloud, 0.0, True, seed=5)
    d = lambda c: np.linalg.norm(c[:, None, :] - c[None, :, :], axis=-1)
    assert np.max(np.abs(d(out.coords) - d(cloud.coords))) < 1e-9
    dxy = lambda c: np.linalg.norm(c[:, None, :2] - c[None, :, :2], axis=-1)
    assert np.max(np.abs(dxy(out.coords) - dxy(cloud.coords))) < 1e-9
    assert np.array_equal(out.coords[:, 2], cloud.coords[:, 2])
    assert np.array_equal(out.labels, cloud.labels)


def test_jitter_rms():
    cloud = uniform_cloud(10000, 1.0)
    out = augment(cloud, 0.01, False, seed=8)
    rms = np.sqrt(np.mean(np.sum((out.coords - cloud.coords) ** 2, axis=1)))
    assert abs(rms - 0.01 * np.sqrt(3)) < 0.2 * 0.01 * np.sqrt(3)
    assert np.array_equal(out.labels, cloud.labels)


def test_augment_rejects_negative_sigma():
    with pytest.raises(ContractError):
        augment(uniform_cloud(5, 1.0), -1.0, False, 0)


# file I/O

def test_round_trip(tmp_path):
    cloud = LabeledCloud([[0, 1, 2], [0.1234567, -5, 3], [1e-3, 2, 2]], [0, 3, 1],
                         [[0.5, 0.5, 0.5], [1, 0, 0], [0, 0.25, 1]])
    path = tmp_path / "c.txt"
    write_cloud(cloud, path, header="three points")
    back = read_cloud(path)
    assert np.max(np.abs(back.coords - cloud.coords)) <= 1e-6
    assert np.max(np.abs(back.colors - cloud.colors)) <= 1e-6
    assert np.array_equal(back.labels, cloud.labels)


def test_parse_single_record():
    c = parse_cloud_lines(["# comment", "0.0 1.0 2.0 0.5 0.5 0.5 3"])
    assert np.array_equal(c.coords, [[0, 1, 2]])
    assert np.array_equal(c.colors, [[0.5, 0.5, 0.5]])
    assert c.labels.tolist() == [3]


def test_parse_wrong_field_count_names_line():
    with pytest.raises(ParseError, match="expected 7 fields") as exc:
        parse_cloud_lines(["0 0 0 0 0 0 1", "1 2 3 4 5"], path="x.txt")
    assert exc.value.line == 2 and "x.txt:2" in str(exc.value)


@pytest.mark.parametrize("line", ["a 0 0 0 0 0 1", "0 0 0 0 0 0 -1", "nan 0 0 0 0 0 1"])
def test_parse_bad_values(line):
    with pytest.raises(ParseError):
        parse_cloud_lines([line])


def test_missing_file(tmp_path):
    with pytest.raises(OSError):
        read_cloud(tmp_path / "missing.txt")


def test_ply_vertex_count(tmp_path):
    cloud = uniform_cloud(37, 1.0)
    write_ply(tmp_path / "a.ply", cloud.coords, cloud.labels, comments=["seed 4"])
    assert read_ply_vertex_count(tmp_path / "a.ply") == 37
    text = (tmp_path / "a.ply").read_text()
    assert "comment seed 4" in text
    assert len(text.split("end_header\n")[1].splitlines()) == 37


@pytest.mark.parametrize("kwargs", [dict(coords=np.zeros((0, 3)), labels=[]),
                                    dict(coords=[[0, 0, np.nan]], labels=[0]),
                                    dict(coords=[[0, 0, 0]], labels=[-1]),
                                    dict(coords=[[0, 0, 0]], labels=[0, 1])])
def test_cloud_invariants(kwargs):
    with pytest.raises(ContractError):
        LabeledCloud(**kwargs)


def test_colors_zero_filled():
    assert np.array_equal(LabeledCloud([[1, 2, 3]], [0]).colors, np.zeros((1, 3)))
