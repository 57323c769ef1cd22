import numpy as np
import pytest

from gesturegen.data import N_JOINTS
from gesturegen.render import EDGES, OFFSETS, PARENTS, RenderSpec, forward_kinematics, render_poses


def test_skeleton_is_a_tree():
    assert PARENTS[0] == -1 and all(0 <= p < j for j, p in enumerate(PARENTS) if j)
    assert len(EDGES) == N_JOINTS - 1


def test_rest_pose_matches_offsets():
    pos = forward_kinematics(np.zeros((N_JOINTS, 3)))
    for j in range(1, N_JOINTS):
        np.testing.assert_allclose(pos[j] - pos[PARENTS[j]], OFFSETS[j], atol=1e-12)


def test_bone_lengths_preserved():
    rot = np.random.default_rng(0).uniform(-1, 1, (3, N_JOINTS, 3))
    pos = forward_kinematics(rot)
    for j in range(1, N_JOINTS):
        lengths = np.linalg.norm(pos[:, j] - pos[:, PARENTS[j]], axis=-1)
        np.testing.assert_allclose(lengths, np.linalg.norm(OFFSETS[j]), atol=1e-12)


def test_root_rotation_rotates_everything():
    rot = np.zeros((N_JOINTS, 3))
    rot[0] = [0.0, 0.0, np.pi / 2]
    pos = forward_kinematics(rot)
    rest = forward_kinematics(np.zeros((N_JOINTS, 3)))
    np.testing.assert_allclose(pos[:, 0], -rest[:, 1], atol=1e-12)
    np.testing.assert_allclose(pos[:, 1], rest[:, 0], atol=1e-12)


def test_frames_written_and_deterministic(tmp_path):
    pose = np.random.default_rng(1).uniform(-0.5, 0.5, (40, 165))
    a = render_poses(pose, tmp_path / "a")
    b = render_poses(pose, tmp_path / "b")
    assert [p.name for p in a] == [f"frame_{i:03d}.png" for i in range(40)]
    assert all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))


def _gif_frames(path):
    from PIL import Image, ImageSequence

    with Image.open(path) as img:
        return [frame.info["duration"] for frame in ImageSequence.Iterator(img)]


def test_video(tmp_path):
    t = np.arange(40)[:, None]
    moving = np.tile(0.5 * np.sin(t / 3.0), (1, 165))
    out = render_poses(moving, tmp_path / "a", fmt="video")
    assert [p.name for p in out] == ["gesture.gif"]
    assert len(_gif_frames(out[0])) == 40
    # identical consecutive frames are merged by the GIF writer; timing is kept
    still = render_poses(np.zeros((40, 165)), tmp_path / "b", fmt="video")
    assert sum(_gif_frames(still[0])) == 40 * round(1000 / 30)


@pytest.mark.parametrize("bad", [np.zeros((39, 165)), np.full((40, 165), np.nan)])
def test_malformed_pose_writes_nothing(tmp_path, bad):
    with pytest.raises(ValueError):
        render_poses(bad, tmp_path / "out")
    assert not (tmp_path / "out").exists()


def test_render_spec_validation():
    with pytest.raises(ValueError):
        RenderSpec(edges=[(0, 55)])
    with pytest.raises(ValueError):
        RenderSpec(fps=25)
