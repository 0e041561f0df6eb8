"""Demonstrations, target descriptors, and variance-minimizing alignment.

A demonstration is a pair of object clouds plus the relation-satisfying
child transform. One demonstration carries a keypoint near the interacting
region; alignment starts there and alternates between matching every demo to
the current reference descriptor and refitting the reference to the mean.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .fields import PoseDescriptor, QueryPointSet, eval_pose
from .poseopt import OptConfig, match_pose
from .se3 import Pose, PointCloud, save_cloud_ply, load_cloud_ply
from .shapes import (KeypointLabel, ShapeInstance, interaction_point,
                     sample_scene)
from .util import dump_json, load_json, seed_stream


@dataclass(eq=False)
class Demonstration:
    parent_cloud: PointCloud
    child_cloud: PointCloud
    relation: Pose                     # transform applied to the child
    keypoint: KeypointLabel | None = None
    parent_shape: ShapeInstance | None = None
    child_shape: ShapeInstance | None = None


@dataclass(eq=False)
class AlignedTargets:
    query_poses: list[Pose]            # per-demo parent query pose
    target_parent: PoseDescriptor      # mean parent descriptor
    target_child: PoseDescriptor       # mean child descriptor
    variance_trace: list[float]        # descriptor variance per round
    objective_trace: list[float]       # mean L1 to reference per round
    flagged: list[int]                 # demos whose match loss diverged


def make_demo_set(task: str, K: int = 10, seed: int = 0, n_cloud: int = 1500,
                  keypoint_noise: float = 0.0) -> list[Demonstration]:
    """K upright-scene demonstrations; exactly one carries the keypoint."""
    if K < 1:
        raise ValueError("K >= 1")
    demos = []
    for i in range(K):
        scene_seed = int(seed_stream(seed, "demo", i).integers(2 ** 31))
        sc = sample_scene(task, "upright", scene_seed, n_cloud=n_cloud)
        kp = None
        if i == 0:
            point = interaction_point(task, sc.parent, sc.child)
            if keypoint_noise > 0:
                rng = seed_stream(seed, "demo-kp", i)
                point = point + rng.normal(0.0, keypoint_noise, 3)
            kp = KeypointLabel(point, demo_index=0)
        demos.append(Demonstration(sc.parent_cloud, sc.child_cloud, sc.gt_relation,
                                   keypoint=kp, parent_shape=sc.parent,
                                   child_shape=sc.child))
    return demos


def initial_query_pose(keypoint: KeypointLabel, demo: Demonstration) -> Pose:
    """Keypoint translation with identity rotation; alignment resolves the rest."""
    return Pose(np.eye(3), keypoint.point)


def descriptor_variance(descriptors: list[PoseDescriptor]) -> float:
    """Sum over elements of the population variance across the set."""
    if len(descriptors) < 2:
        raise ValueError("need at least 2 descriptors")
    dim = descriptors[0].vector.size
    if any(d.vector.size != dim for d in descriptors):
        raise ValueError("descriptor dimension mismatch")
    stacked = np.stack([d.vector for d in descriptors])
    return float(np.sum(np.var(stacked, axis=0)))


def _mean_descriptor(descriptors: list[PoseDescriptor]) -> PoseDescriptor:
    stacked = np.stack([d.vector for d in descriptors])
    d0 = descriptors[0]
    return PoseDescriptor(stacked.mean(axis=0), d0.n_query, d0.per_point_dim)


def _child_field(demo: Demonstration, field_factory):
    return field_factory(demo.child_shape, demo.child_cloud)


def align_demonstrations(field_factory, X: QueryPointSet, demos: list[Demonstration],
                         Q: int = 3, cfg: OptConfig | None = None, seed: int = 0,
                         child_reencode_per_round: bool = True) -> AlignedTargets:
    """Alternating minimization of descriptor variance across demonstrations.

    field_factory(shape, cloud) builds the descriptor field conditioned on
    one demo object; round 0 encodes the keypoint demo as the reference,
    each round matches every demo to the reference and refits the reference
    to the mean. Matches are warm-started from the previous round's poses so
    the mean-L1-to-reference objective cannot move backwards.
    """
    cfg = cfg or OptConfig()
    k_idx = next((i for i, d in enumerate(demos) if d.keypoint is not None), None)
    if k_idx is None:
        raise ValueError("no demonstration carries a keypoint")
    K = len(demos)
    fields_a = [field_factory(d.parent_shape, d.parent_cloud) for d in demos]

    poses = [None] * K
    poses[k_idx] = initial_query_pose(demos[k_idx].keypoint, demos[k_idx])
    ref = eval_pose(fields_a[k_idx], poses[k_idx], X, demos[k_idx].parent_cloud)

    variance_trace = []
    objective_trace = []
    flagged: set[int] = set()
    descriptors = [None] * K
    descriptors[k_idx] = ref

    for q in range(Q):
        losses = np.zeros(K)
        for i, demo in enumerate(demos):
            if q == 0 and i == k_idx:
                # round 0 matches the remaining demos to the keypoint demo
                losses[i] = 0.0
                continue
            init = [poses[i]] if poses[i] is not None else None
            res = match_pose(fields_a[i], X, demo.parent_cloud, ref, cfg,
                             seed=int(seed_stream(seed, "align", q, i).integers(2 ** 31)),
                             init_poses=init)
            poses[i] = res.best_pose
            losses[i] = res.best_loss
            descriptors[i] = eval_pose(fields_a[i], poses[i], X, demo.parent_cloud)
        objective_trace.append(float(np.mean(losses)))
        if K >= 2:
            variance_trace.append(descriptor_variance(descriptors))
        med = float(np.median(losses))
        for i, l in enumerate(losses):
            if med > 0 and l > 5.0 * med:
                flagged.add(i)
        ref = _mean_descriptor(descriptors)

    target_child = _encode_child_targets(field_factory, X, demos, poses)
    return AlignedTargets(query_poses=poses, target_parent=ref,
                          target_child=target_child,
                          variance_trace=variance_trace,
                          objective_trace=objective_trace,
                          flagged=sorted(flagged))


def _encode_child_targets(field_factory, X, demos, poses) -> PoseDescriptor:
    """Child descriptors at relation^-1 * parent query pose, averaged."""
    descs = []
    for demo, pose_a in zip(demos, poses):
        fb = field_factory(demo.child_shape, demo.child_cloud)
        t_b_inv = demo.relation.inverse()
        descs.append(eval_pose(fb, t_b_inv.compose(pose_a), X, demo.child_cloud))
    return _mean_descriptor(descs)


def unaligned_targets(field_factory, X: QueryPointSet, demos: list[Demonstration],
                      keypoints: list[np.ndarray]) -> AlignedTargets:
    """Ablation: translation-only placement per demo, no orientation alignment."""
    if len(keypoints) != len(demos):
        raise ValueError("need one keypoint per demonstration")
    poses = [Pose(np.eye(3), np.asarray(kp, dtype=np.float64)) for kp in keypoints]
    descs = []
    for demo, pose in zip(demos, poses):
        fa = field_factory(demo.parent_shape, demo.parent_cloud)
        descs.append(eval_pose(fa, pose, X, demo.parent_cloud))
    target_parent = _mean_descriptor(descs)
    target_child = _encode_child_targets(field_factory, X, demos, poses)
    var = descriptor_variance(descs) if len(descs) >= 2 else 0.0
    return AlignedTargets(query_poses=poses, target_parent=target_parent,
                          target_child=target_child, variance_trace=[var],
                          objective_trace=[], flagged=[])


# ---------------------------------------------------------------------------
# serialization


def save_demo_set(dirpath, demos: list[Demonstration]):
    os.makedirs(dirpath, exist_ok=True)
    manifest = {"count": len(demos), "demos": []}
    for i, d in enumerate(demos):
        save_cloud_ply(os.path.join(dirpath, f"demo_{i:02d}_parent.ply"), d.parent_cloud)
        save_cloud_ply(os.path.join(dirpath, f"demo_{i:02d}_child.ply"), d.child_cloud)
        entry = {
            "relation": d.relation.to_json(),
            "keypoint": None if d.keypoint is None else
                        {"point": d.keypoint.point.tolist(),
                         "demo_index": d.keypoint.demo_index},
            "parent_shape": None if d.parent_shape is None else d.parent_shape.to_json(),
            "child_shape": None if d.child_shape is None else d.child_shape.to_json(),
        }
        manifest["demos"].append(entry)
    dump_json(os.path.join(dirpath, "manifest.json"), manifest)


def load_demo_set(dirpath) -> list[Demonstration]:
    manifest = load_json(os.path.join(dirpath, "manifest.json"))
    demos = []
    for i, entry in enumerate(manifest["demos"]):
        parent = load_cloud_ply(os.path.join(dirpath, f"demo_{i:02d}_parent.ply"))
        child = load_cloud_ply(os.path.join(dirpath, f"demo_{i:02d}_child.ply"))
        kp = entry["keypoint"]
        demos.append(Demonstration(
            parent, child, Pose.from_json(entry["relation"]),
            keypoint=None if kp is None else KeypointLabel(np.array(kp["point"]),
                                                           kp["demo_index"]),
            parent_shape=None if entry["parent_shape"] is None
                         else ShapeInstance.from_json(entry["parent_shape"]),
            child_shape=None if entry["child_shape"] is None
                        else ShapeInstance.from_json(entry["child_shape"])))
    return demos
