"""Project extracted 3D instances back onto every frame as pseudo-labels.

Each voxel center is projected through the camera; a depth-buffer test with a
small tolerance handles occlusion, and each accepted voxel is splatted with
its projected footprint so masks stay dense. Overlapping instances are
resolved painter-style by nearer depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .consensus import SemanticVoxelMap
from .scene import CameraIntrinsics, FrameObservation, world_to_pixel


@dataclass
class PseudoLabel:
    """Reprojected consistent annotation for one instance in one frame."""

    uid: int
    class_id: int
    lambda_bar: np.ndarray
    mask: np.ndarray        # (H, W) bool
    bbox: tuple             # (u_min, v_min, u_max, v_max)


@dataclass
class PseudoDataset:
    """Per-frame pseudo-label lists, aligned with the trajectory."""

    frames: list            # list[list[PseudoLabel]]

    def __len__(self):
        return len(self.frames)

    def all_labels(self):
        for i, labels in enumerate(self.frames):
            for lab in labels:
                yield i, lab


def mask_to_bbox(mask: np.ndarray) -> tuple:
    """Minimum rectangle (u_min, v_min, u_max, v_max) containing the mask."""
    vs, us = np.nonzero(mask)
    if us.size == 0:
        raise ValueError("empty mask")
    return (int(us.min()), int(vs.min()), int(us.max()), int(vs.max()))


def project_instance_masks(vmap: SemanticVoxelMap, frame: FrameObservation,
                           K: CameraIntrinsics,
                           occlusion_tolerance: float | None = None
                           ) -> list[PseudoLabel]:
    """Pseudo-labels for every instance visible in this frame.

    A voxel claims its projected pixel iff the pixel is in bounds, the voxel
    is in front of the camera, and the projected depth matches the frame depth
    within the tolerance (default 2 * voxel_size). Claimed pixels are dilated
    by the voxel's projected footprint; instance overlaps go to the nearer
    instance.
    """
    if not vmap.extracted:
        raise ValueError("map must be extracted before reprojection")
    tol = 2.0 * vmap.voxel_size if occlusion_tolerance is None else occlusion_tolerance
    H, W = K.height, K.width
    half = vmap.voxel_size / 2.0

    uids = sorted(vmap.instances)
    if not uids:
        return []
    zbuf = np.full((H, W), np.inf)
    winner = np.full((H, W), -1, dtype=np.int64)

    for uid in uids:
        inst = vmap.instances[uid]
        keys = np.array(sorted(inst.voxels), dtype=np.int64)
        centers = (keys + 0.5) * vmap.voxel_size
        u, v, d = world_to_pixel(centers, K, frame.pose)
        ui = np.round(u).astype(int)
        vi = np.round(v).astype(int)
        ok = (d > 0) & (ui >= 0) & (ui < W) & (vi >= 0) & (vi < H)
        if not ok.any():
            continue
        ui, vi, d = ui[ok], vi[ok], d[ok]
        frame_d = frame.depth[vi, ui]
        ok2 = (frame_d > 0) & (np.abs(d - frame_d) <= tol)
        if not ok2.any():
            continue
        ui, vi, d = ui[ok2], vi[ok2], d[ok2]
        radii = np.ceil(vmap.voxel_size * K.fx / (2.0 * d)).astype(int)

        inst_depth = np.full((H, W), np.inf)
        for r in np.unique(radii):
            sel = radii == r
            uu, vv, dd = ui[sel], vi[sel], d[sel]
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    tu = uu + dx
                    tv = vv + dy
                    inb = (tu >= 0) & (tu < W) & (tv >= 0) & (tv < H)
                    np.minimum.at(inst_depth, (tv[inb], tu[inb]), dd[inb])
        claimed = np.isfinite(inst_depth)
        take = claimed & (inst_depth < zbuf)
        zbuf[take] = inst_depth[take]
        winner[take] = uid

    labels: list[PseudoLabel] = []
    for uid in uids:
        mask = winner == uid
        if not mask.any():
            continue
        inst = vmap.instances[uid]
        labels.append(PseudoLabel(uid=uid, class_id=inst.class_id,
                                  lambda_bar=inst.consistent_logits,
                                  mask=mask, bbox=mask_to_bbox(mask)))
    return labels


def build_pseudo_dataset(trajectory, vmap: SemanticVoxelMap, K: CameraIntrinsics,
                         occlusion_tolerance: float | None = None) -> PseudoDataset:
    """Project every instance onto every frame of the trajectory.

    Frames keep empty lists when nothing projects; an instance appears in
    every frame where it passes the depth test, including frames whose
    detector output missed it.
    """
    frames = [project_instance_masks(vmap, frame, K,
                                     occlusion_tolerance=occlusion_tolerance)
              for frame in trajectory.frames]
    return PseudoDataset(frames=frames)


def dataset_to_coco(dataset: PseudoDataset, K: CameraIntrinsics) -> dict:
    """COCO-style export: images[], annotations[], categories[]."""
    from .scene import CLASS_NAMES
    from .serialize import rle_encode_bool

    images = [{"id": i, "width": K.width, "height": K.height}
              for i in range(len(dataset))]
    annotations = []
    ann_id = 0
    for frame_id, lab in dataset.all_labels():
        u0, v0, u1, v1 = lab.bbox
        annotations.append({
            "id": ann_id,
            "image_id": frame_id,
            "instance_uid": lab.uid,
            "category_id": lab.class_id,
            "bbox": [u0, v0, u1 - u0 + 1, v1 - v0 + 1],
            "segmentation": rle_encode_bool(lab.mask),
            "lambda_bar": [float(x) for x in lab.lambda_bar],
        })
        ann_id += 1
    categories = [{"id": i, "name": name} for i, name in enumerate(CLASS_NAMES)]
    return {"images": images, "annotations": annotations, "categories": categories}
