"""Frame-sequence files: a directory of PNG (or single-slice NRRD) 2D
images plus a JSON manifest with timestamps and tracked 4x4 poses.

Tracked poses in the manifest must already be expressed in the 3D US
volume frame; converting from arm-base coordinates is the caller's duty.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import List

import numpy as np

from .geometry import RigidTransform3D
from .nrrd_io import read_nrrd, write_nrrd
from .slice2volume import TrackedFrame
from .volume import SlicePose, Volume


def save_frame_sequence(frames: List[TrackedFrame], directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {"pixel_spacing": list(frames[0].spacing), "frames": []}
    for i, f in enumerate(frames):
        name = f"frame_{i:04d}.nrrd"
        img = np.asarray(f.image, dtype=np.float32)
        vol = Volume(
            scalars=img.T[:, :, None],  # (nu, nv, 1)
            spacing=np.array([f.spacing[0], f.spacing[1], 1.0]),
            origin=np.zeros(3),
            direction=np.eye(3),
            modality="US3D",
        )
        write_nrrd(vol, d / name)
        manifest["frames"].append(
            {
                "image": name,
                "timestamp": f.timestamp,
                "tracked_pose": f.tracked_pose.transform.to_json_dict()["matrix"],
                "extent": list(f.tracked_pose.extent),
                "resolution": list(f.tracked_pose.resolution),
            }
        )
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))


def _load_image(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".png":
        from PIL import Image

        img = np.asarray(Image.open(path).convert("F"), dtype=float)
        return img / 255.0
    vol = read_nrrd(path)
    if vol.dims[2] != 1:
        raise ValueError(f"{path.name}: expected a single-slice NRRD for a 2D frame")
    return np.asarray(vol.scalars[:, :, 0].T, dtype=float)


def load_frame_sequence(directory) -> List[TrackedFrame]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    spacing = tuple(manifest["pixel_spacing"])
    frames = []
    for entry in manifest["frames"]:
        img = _load_image(d / entry["image"])
        pose = SlicePose(
            RigidTransform3D.from_matrix(entry["tracked_pose"]),
            tuple(entry["extent"]),
            tuple(entry.get("resolution", (img.shape[1], img.shape[0]))),
        )
        frames.append(TrackedFrame(img, spacing, float(entry["timestamp"]), pose))
    return frames
