//! Synthetic capture rig: background music, articulated motion, and a
//! first-order scattering renderer producing B-format recordings.

mod bgm;
mod dataset;
mod motion;
mod noise;
mod render;
mod skeleton;

pub use bgm::{synth_bgm, BgmKind, BgmSpec};
pub use dataset::{
    build_dataset, load_record, read_poses, write_poses, BgmEntry, DatasetConfig, DatasetRecord, Manifest,
    ManifestRecord, RecordFiles, SplitKind, SplitPolicy, SplitTag, MANIFEST_FILE,
};
pub use motion::{gen_pose_sequence, Motion, PoseSequence, MAX_JOINT_SPEED, POSE_FPS};
pub use noise::add_gaussian_noise;
pub use render::{encode_direction, render_point_source, render_recording, SceneConfig, Wall, SPEED_OF_SOUND};
pub use skeleton::{Skeleton, COORDS_PER_FRAME, HEAD, HIP, JOINT_NAMES, NECK, NUM_JOINTS, SPINE};
