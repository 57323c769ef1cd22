"""Stick-figure rendering of 55-joint axis-angle pose sequences.

The skeleton follows the SMPL-X joint ordering (22 body joints, jaw, two eyes,
15 joints per hand) with fixed rest-pose bone offsets in metres. It is a
diagnostic view, not a body mesh.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy.spatial.transform import Rotation

from .data import FPS, N_JOINTS, POSE_LEN, denormalize_pose

# fmt: off
PARENTS = np.array([
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19,  # body
    15, 15, 15,                                                                 # jaw, eyes
    20, 25, 26, 20, 28, 29, 20, 31, 32, 20, 34, 35, 20, 37, 38,                 # left hand
    21, 40, 41, 21, 43, 44, 21, 46, 47, 21, 49, 50, 21, 52, 53,                 # right hand
])

_BODY_OFFSETS = [
    (0.00, 0.00, 0.00),                                           # 0 pelvis
    (0.06, -0.09, 0.00), (-0.06, -0.09, 0.00), (0.00, 0.11, 0.00),  # hips, spine1
    (0.04, -0.38, 0.00), (-0.04, -0.38, 0.00), (0.00, 0.13, 0.00),   # knees, spine2
    (-0.01, -0.40, -0.04), (0.01, -0.40, -0.04), (0.00, 0.05, 0.02),  # ankles, spine3
    (0.04, -0.06, 0.12), (-0.04, -0.06, 0.12), (0.00, 0.22, -0.03),   # feet, neck
    (0.08, 0.12, -0.01), (-0.08, 0.12, -0.01), (0.00, 0.06, 0.05),    # collars, head
    (0.12, 0.04, -0.01), (-0.12, 0.04, -0.01),                        # shoulders
    (0.26, 0.00, -0.02), (-0.26, 0.00, -0.02),                        # elbows
    (0.25, 0.01, 0.00), (-0.25, 0.01, 0.00),                          # wrists
]
# fmt: on


def _hand_offsets(side: float) -> list[tuple[float, float, float]]:
    out = []
    # index, middle, pinky, ring, thumb: knuckle spread then two phalanges each
    for spread, length in ((0.02, 0.035), (0.007, 0.038), (-0.03, 0.026), (-0.015, 0.033), (0.03, 0.025)):
        out.append((side * 0.08, 0.0, spread))
        out.append((side * length, 0.0, 0.0))
        out.append((side * length * 0.8, 0.0, 0.0))
    return out


OFFSETS = np.array(
    _BODY_OFFSETS
    + [(0.0, 0.02, 0.08), (0.03, 0.07, 0.08), (-0.03, 0.07, 0.08)]
    + _hand_offsets(1.0)
    + _hand_offsets(-1.0)
)
assert PARENTS.shape == (N_JOINTS,) and OFFSETS.shape == (N_JOINTS, 3)

EDGES = [(int(p), j) for j, p in enumerate(PARENTS) if p >= 0]


@dataclass
class RenderSpec:
    edges: list[tuple[int, int]] = field(default_factory=lambda: list(EDGES))
    width: int = 256
    height: int = 256
    fps: int = FPS
    scale: float = 120.0  # pixels per metre

    def __post_init__(self):
        for a, b in self.edges:
            if not (0 <= a < N_JOINTS and 0 <= b < N_JOINTS):
                raise ValueError(f"edge ({a}, {b}) references an invalid joint")
        if self.fps != FPS:
            raise ValueError(f"render fps must match the pose frame rate ({FPS})")


def forward_kinematics(rotvecs: np.ndarray) -> np.ndarray:
    """Global joint positions [..., 55, 3] from local axis-angle rotations [..., 55, 3]."""
    rotvecs = np.asarray(rotvecs, dtype=np.float64)
    lead = rotvecs.shape[:-2]
    flat = rotvecs.reshape(-1, N_JOINTS, 3)
    n = len(flat)
    local = Rotation.from_rotvec(flat.reshape(-1, 3)).as_matrix().reshape(n, N_JOINTS, 3, 3)
    glob_rot = np.empty_like(local)
    pos = np.zeros((n, N_JOINTS, 3))
    glob_rot[:, 0] = local[:, 0]
    for j in range(1, N_JOINTS):
        p = PARENTS[j]
        glob_rot[:, j] = glob_rot[:, p] @ local[:, j]
        pos[:, j] = pos[:, p] + glob_rot[:, p] @ OFFSETS[j]
    return pos.reshape(*lead, N_JOINTS, 3)


def draw_frame(positions: np.ndarray, spec: RenderSpec) -> Image.Image:
    """Orthographic front view (x right, y up) of one frame's joint positions."""
    img = Image.new("RGB", (spec.width, spec.height), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    cx, cy = spec.width / 2, spec.height * 0.45
    xy = [(cx + spec.scale * p[0], cy - spec.scale * p[1]) for p in positions]
    for a, b in spec.edges:
        color = (40, 90, 200) if b >= 25 else (30, 30, 30)
        draw.line([xy[a], xy[b]], fill=color, width=2 if b < 25 else 1)
    return img


def render_poses(pose_rad: np.ndarray, out_dir: str | os.PathLike, fmt: str = "frames",
                 spec: RenderSpec | None = None) -> list[Path]:
    """Render a [40 x 165] radian pose sequence; returns the written paths.

    ``fmt="frames"`` writes frame_000.png..frame_039.png, ``fmt="video"`` one
    animated GIF at the pose frame rate.
    """
    spec = spec or RenderSpec()
    pose_rad = np.asarray(pose_rad, dtype=np.float64)
    if pose_rad.shape != (POSE_LEN, N_JOINTS * 3) or not np.all(np.isfinite(pose_rad)):
        raise ValueError(f"pose must be a finite [{POSE_LEN} x {N_JOINTS * 3}] array")
    if fmt not in ("frames", "video"):
        raise ValueError("format must be 'frames' or 'video'")
    positions = forward_kinematics(pose_rad.reshape(POSE_LEN, N_JOINTS, 3))
    images = [draw_frame(p, spec) for p in positions]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if fmt == "frames":
        paths = [out / f"frame_{i:03d}.png" for i in range(len(images))]
        for img, path in zip(images, paths):
            img.save(path, format="PNG")
        return paths
    path = out / "gesture.gif"
    images[0].save(path, format="GIF", save_all=True, append_images=images[1:],
                   duration=round(1000 / spec.fps), loop=0)
    return [path]


def render_normalized(pose: np.ndarray, out_dir, fmt: str = "frames") -> list[Path]:
    return render_poses(denormalize_pose(pose), out_dir, fmt)
