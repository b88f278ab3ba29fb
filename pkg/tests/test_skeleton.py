import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from figrepose.skeleton import (
    DescriptorError,
    KinematicTree,
    disc_offsets,
    parse_pose_line,
    rasterize_jmap,
    read_pose_file,
    rescale_pose,
    write_pose_file,
)
from oracles import bresenham_raster


def test_default_tree_layout(tree):
    assert tree.n_joints == 16
    assert tree.roots == [tree.index("thorax")]
    assert tree.parent[tree.index("thorax")] == -1
    assert all(p != i for i, p in enumerate(tree.parent))


def test_default_tree_head_chain(tree):
    # head_top -> upper_neck -> thorax: two hops
    chain = tree.chain(tree.index("head_top"))
    assert [tree.joint_names[j] for j in chain] == ["head_top", "upper_neck", "thorax"]
    assert len(chain) - 1 <= 4


def test_default_tree_is_acyclic(tree):
    for j in range(tree.n_joints):
        assert tree.chain(j)[-1] in tree.roots
    assert sorted(tree.topological_order()) == list(range(16))


@pytest.mark.parametrize("parent", [(0, -1), (1, 0), (-1, 5)])
def test_bad_trees_rejected(parent):
    with pytest.raises(ValueError):
        KinematicTree(parent, ("a", "b"))


def test_coincident_joint_draws_one_disc(tree):
    pose = np.full((16, 2), 20.0)
    jm = rasterize_jmap(pose, tree, 40, 40, thickness=5)
    expected = np.zeros((40, 40), bool)
    for dx, dy in disc_offsets(5):
        expected[20 + dy, 20 + dx] = True
    for i in range(16):
        np.testing.assert_array_equal(jm.channels[i] == 1.0, expected)
    # radius 2.5 disc
    assert expected.sum() == 21


def test_full_resolution_shape(tree):
    rng = np.random.default_rng(0)
    jm = rasterize_jmap(rng.uniform(0, 128, (16, 2)), tree, 128, 128)
    assert jm.shape == (16, 128, 128)
    assert set(np.unique(jm.channels)) <= {0.0, 1.0}


def test_horizontal_segment_thickness_one():
    tree = KinematicTree((1, -1), ("a", "b"))
    jm = rasterize_jmap([[2, 2], [5, 2]], tree, 8, 8, thickness=1)
    ys, xs = np.nonzero(jm.channels[0])
    assert sorted(zip(xs.tolist(), ys.tolist())) == [(2, 2), (3, 2), (4, 2), (5, 2)]
    # root channel: single pixel
    assert jm.channels[1].sum() == 1 and jm.channels[1][2, 5] == 1


def test_matches_bresenham_oracle_random_segments():
    rng = np.random.default_rng(1)
    tree = KinematicTree((1, -1), ("a", "b"))
    for _ in range(300):
        p = rng.integers(-10, 50, size=(2, 2))
        jm = rasterize_jmap(p, tree, 40, 40, thickness=1)
        ref = bresenham_raster(tuple(p[0]), tuple(p[1]), 40, 40)
        np.testing.assert_array_equal(jm.channels[0] == 1, ref)


def test_offraster_segment_is_blank(tree):
    pose = np.full((16, 2), -500.0)
    pose[0] = [-1e12, 3e11]
    jm = rasterize_jmap(pose, tree, 32, 32)
    assert not jm.channels.any()


def test_fg_bg_values(tree):
    pose = np.random.default_rng(2).uniform(0, 32, (16, 2))
    jm = rasterize_jmap(pose, tree, 32, 32, fg=0.25, bg=-1.0)
    assert set(np.unique(jm.channels)) == {-1.0, 0.25}


def test_pose_mismatch(tree):
    with pytest.raises(DescriptorError):
        rasterize_jmap(np.zeros((15, 2)), tree, 8, 8)
    with pytest.raises(DescriptorError):
        rasterize_jmap(np.full((16, 2), np.nan), tree, 8, 8)
    with pytest.raises(ValueError):
        rasterize_jmap(np.zeros((16, 2)), tree, 0, 8)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 15), st.floats(-40, 80), st.floats(-40, 80), st.integers(0, 2 ** 31))
def test_moving_joint_only_touches_own_and_child_channels(joint, x, y, seed):
    from figrepose.skeleton import make_default_tree
    tree = make_default_tree()
    pose = np.random.default_rng(seed).uniform(0, 48, (16, 2))
    moved = pose.copy()
    moved[joint] = [x, y]
    a = rasterize_jmap(pose, tree, 48, 48).channels
    b = rasterize_jmap(moved, tree, 48, 48).channels
    allowed = {joint, *tree.children(joint)}
    for j in range(16):
        if j not in allowed:
            np.testing.assert_array_equal(a[j], b[j])


def test_deterministic(tree):
    pose = np.random.default_rng(3).uniform(-5, 70, (16, 2))
    a = rasterize_jmap(pose, tree, 64, 64)
    b = rasterize_jmap(pose.copy(), tree, 64, 64)
    assert a.channels.tobytes() == b.channels.tobytes()


def test_rescale_pose():
    pose = np.array([[10.0, 20.0]])
    np.testing.assert_array_equal(rescale_pose(pose, (64, 64), (64, 64)), pose)
    np.testing.assert_allclose(rescale_pose(pose, (64, 64), (128, 128)), [[20, 40]])
    # (H, W): x scales by 100/50, y by 50/100
    np.testing.assert_allclose(rescale_pose([[40.0, 40.0]], (100, 50), (50, 100)), [[80, 20]])
    with pytest.raises(ValueError):
        rescale_pose(pose, (0, 1), (1, 1))


def test_pose_file_roundtrip(tmp_path, tree):
    rng = np.random.default_rng(4)
    poses = [rng.normal(30, 10, (16, 2)) for _ in range(3)]
    path = tmp_path / "poses.txt"
    write_pose_file(path, poses)
    back = read_pose_file(path, tree)
    for a, b in zip(poses, back):
        assert a.tobytes() == b.tobytes()
    assert len(path.read_text().splitlines()[0].split()) == 32
    with pytest.raises(DescriptorError):
        parse_pose_line("1 2 3")
