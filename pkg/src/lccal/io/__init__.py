"""Dataset ingestion: KITTI odometry files and procedural synthetic scenes."""

from .frame import Frame, read_image
from .kitti import (KittiCalib, KittiDataset, KittiFrame, load_kitti_frame, read_kitti_calib,
                    read_velodyne_bin, write_velodyne_bin)
from .synthetic import (Primitive, SceneSpec, SyntheticScene, generate_synthetic_scene, random_scene,
                        random_scene_spec, scene_dataset)

__all__ = [
    "Frame", "read_image", "KittiCalib", "KittiDataset", "KittiFrame", "load_kitti_frame", "read_kitti_calib",
    "read_velodyne_bin", "write_velodyne_bin", "Primitive", "SceneSpec", "SyntheticScene",
    "generate_synthetic_scene", "random_scene", "random_scene_spec", "scene_dataset",
]
