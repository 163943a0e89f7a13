import numpy as np
import pytest

from voxlabel.consensus import (SemanticVoxelMap, accumulate_frame,
                                finalize_map)
from voxlabel.detector import NoiseModel, simulate_detections
from voxlabel.explore import run_episode
from voxlabel.reproject import (PseudoDataset, build_pseudo_dataset,
                                dataset_to_coco, mask_to_bbox,
                                project_instance_masks)
from voxlabel.scene import (Box, FrameObservation, ObjectInstance, Pose,
                            SceneParams, SceneSpec, generate_scene,
                            render_frame, world_to_pixel)


def single_voxel_map(key=(40, 0, 25)):
    """Map with one resolved single-voxel instance at the given key."""
    vmap = SemanticVoxelMap()
    oid = vmap._register_obs(np.array([0, 0, 5.0, 0, 0, 0]), 0.9, 0, 0)
    from voxlabel.consensus import VoxelRecord
    vmap.voxels[key] = VoxelRecord(obs_ids=[oid])
    finalize_map(vmap, min_instance_voxels=1)
    assert len(vmap.instances) == 1
    return vmap


class TestMaskToBbox:
    def test_single_pixel(self):
        mask = np.zeros((5, 7), dtype=bool)
        mask[2, 3] = True
        assert mask_to_bbox(mask) == (3, 2, 3, 2)

    def test_rectangle(self):
        mask = np.zeros((10, 10), dtype=bool)
        mask[1:4, 2:8] = True
        assert mask_to_bbox(mask) == (2, 1, 7, 3)

    def test_empty_raises(self):
        with pytest.raises(ValueError, match="empty mask"):
            mask_to_bbox(np.zeros((4, 4), dtype=bool))

    def test_matches_scan_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            mask = rng.random((12, 16)) < 0.2
            if not mask.any():
                continue
            got = mask_to_bbox(mask)
            us = [u for v in range(12) for u in range(16) if mask[v, u]]
            vs = [v for v in range(12) for u in range(16) if mask[v, u]]
            assert got == (min(us), min(vs), max(us), max(vs))


class TestProjectInstanceMasks:
    def test_single_voxel_visible(self, cam):
        vmap = single_voxel_map()                 # center (2.025, 0.025, 1.275)
        center = (np.array([40, 0, 25]) + 0.5) * vmap.voxel_size
        pose = Pose(0, 0, 0, camera_height=1.25)
        depth = np.full((cam.height, cam.width), 2.025)
        frame = FrameObservation(pose=pose, depth=depth,
                                 gt_instance=np.zeros(depth.shape, np.int32))
        labels = project_instance_masks(vmap, frame, cam)
        assert len(labels) == 1
        u, v, _ = world_to_pixel(center, cam, pose)
        assert labels[0].mask[int(round(v)), int(round(u))]
        assert labels[0].bbox == mask_to_bbox(labels[0].mask)
        assert labels[0].class_id == 2

    def test_single_voxel_occluded(self, cam):
        vmap = single_voxel_map()
        pose = Pose(0, 0, 0, camera_height=1.25)
        depth = np.full((cam.height, cam.width), 1.0)   # occluder in front
        frame = FrameObservation(pose=pose, depth=depth,
                                 gt_instance=np.zeros(depth.shape, np.int32))
        assert project_instance_masks(vmap, frame, cam) == []

    def test_behind_camera_invisible(self, cam):
        vmap = single_voxel_map()
        pose = Pose(4.0, 0, np.pi / 2, camera_height=1.25)  # looking away
        depth = np.full((cam.height, cam.width), 2.0)
        frame = FrameObservation(pose=pose, depth=depth,
                                 gt_instance=np.zeros(depth.shape, np.int32))
        assert project_instance_masks(vmap, frame, cam) == []

    def test_nearer_instance_wins_overlap(self, cam):
        from voxlabel.consensus import VoxelRecord
        vmap = SemanticVoxelMap()
        near_key, far_key = (40, 0, 25), (80, 0, 25)    # 2.025 m and 4.025 m
        o1 = vmap._register_obs(np.array([5.0, 0, 0, 0, 0, 0]), 0.9, 0, 0)
        o2 = vmap._register_obs(np.array([0, 5.0, 0, 0, 0, 0]), 0.9, 1, 0)
        vmap.voxels[near_key] = VoxelRecord(obs_ids=[o1])
        vmap.voxels[far_key] = VoxelRecord(obs_ids=[o2])
        finalize_map(vmap, min_instance_voxels=1)
        pose = Pose(0, 0, 0, camera_height=1.25)
        # depth image agrees with the *near* voxel on the shared ray
        depth = np.full((cam.height, cam.width), 2.025)
        frame = FrameObservation(pose=pose, depth=depth,
                                 gt_instance=np.zeros(depth.shape, np.int32))
        labels = project_instance_masks(vmap, frame, cam,
                                        occlusion_tolerance=10.0)
        by_class = {lab.class_id: lab for lab in labels}
        # the center pixel belongs to the nearer (class 0) instance
        u, v, _ = world_to_pixel((np.array(near_key) + 0.5) * vmap.voxel_size,
                                 cam, pose)
        assert by_class[0].mask[int(round(v)), int(round(u))]
        if 1 in by_class:
            assert not by_class[1].mask[int(round(v)), int(round(u))]

    def test_requires_extraction(self, cam):
        vmap = SemanticVoxelMap()
        depth = np.zeros((cam.height, cam.width))
        frame = FrameObservation(pose=Pose(0, 0, 0), depth=depth,
                                 gt_instance=np.zeros(depth.shape, np.int32))
        with pytest.raises(ValueError):
            project_instance_masks(vmap, frame, cam)


@pytest.fixture(scope="module")
def episode_artifacts():
    """Noiseless episode on a small generated scene, fully mapped."""
    from voxlabel.scene import CameraIntrinsics
    cam = CameraIntrinsics.default()
    params = SceneParams(room_size_min=6.0, room_size_max=7.0, n_partitions=1)
    scene = generate_scene(params, seed=6)
    traj, _ = run_episode(scene, "frontier", NoiseModel.noiseless(), 120,
                          cam, seed=2)
    vmap = SemanticVoxelMap()
    for frame, dets in zip(traj.frames, traj.detections):
        accumulate_frame(vmap, frame, dets, cam)
    finalize_map(vmap)
    dataset = build_pseudo_dataset(traj, vmap, cam)
    return scene, traj, vmap, dataset, cam


class TestEndToEnd:
    def test_lambda_bar_consistent_across_frames(self, episode_artifacts):
        _, _, _, dataset, _ = episode_artifacts
        by_uid: dict = {}
        for _, lab in dataset.all_labels():
            if lab.uid in by_uid:
                assert np.array_equal(by_uid[lab.uid], lab.lambda_bar)
                assert lab.class_id == by_uid[lab.uid + 10_000]
            else:
                by_uid[lab.uid] = lab.lambda_bar
                by_uid[lab.uid + 10_000] = lab.class_id
        assert by_uid

    def test_masks_cover_true_objects(self, episode_artifacts):
        scene, traj, _, dataset, _ = episode_artifacts
        id_to_class = {o.gt_id: o.class_id for o in scene.objects}
        precisions, recalls = [], []
        for frame, labels in zip(traj.frames, dataset.frames):
            gt = frame.gt_instance
            for lab in labels:
                gt_mask = np.isin(gt, [g for g, c in id_to_class.items()
                                       if c == lab.class_id])
                if gt_mask.sum() < 50:
                    continue
                inter = (lab.mask & gt_mask).sum()
                precisions.append(inter / lab.mask.sum())
                recalls.append(inter / gt_mask.sum())
        assert len(precisions) > 50
        # pinned from the first run of this fixture: precision 0.830, recall
        # 0.970 (splatting trades some precision for dense masks)
        assert np.mean(precisions) >= 0.78
        assert np.mean(recalls) >= 0.92

    def test_recovers_forced_dropouts(self, episode_artifacts):
        # drop the detector output of every odd frame before mapping; the
        # reprojected dataset must still label objects in those frames
        scene, traj, _, _, cam = episode_artifacts
        from voxlabel.detector import DetectionSet
        vmap = SemanticVoxelMap()
        for i, (frame, dets) in enumerate(zip(traj.frames, traj.detections)):
            if i % 2 == 1:
                dets = DetectionSet(i, [], [])
            accumulate_frame(vmap, frame, dets, cam)
        finalize_map(vmap)
        dataset = build_pseudo_dataset(traj, vmap, cam)
        detected_odd = sum(1 for i, dets in enumerate(traj.detections)
                           if i % 2 == 1 and dets.detections)
        pseudo_odd = sum(1 for i, labels in enumerate(dataset.frames)
                         if i % 2 == 1 and labels)
        assert detected_odd > 0
        # pseudo-labels land on at least as many odd frames as raw detections
        assert pseudo_odd >= detected_odd * 0.9

    def test_coco_export(self, episode_artifacts):
        _, _, _, dataset, cam = episode_artifacts
        coco = dataset_to_coco(dataset, cam)
        assert len(coco["images"]) == len(dataset)
        assert len(coco["categories"]) == 6
        assert coco["annotations"]
        for ann in coco["annotations"]:
            assert 0 <= ann["category_id"] < 6
            assert abs(sum(ann["lambda_bar"]) - 1.0) < 1e-9
            assert ann["bbox"][2] > 0 and ann["bbox"][3] > 0
