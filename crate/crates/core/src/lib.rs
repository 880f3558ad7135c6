//! Physically-aware object insertion and fitness-guided metamorphic testing
//! for camera + LiDAR perception systems.
//!
//! The library synthesizes multi-modal test cases by inserting 3D vehicle
//! meshes into background driving frames with a virtual LiDAR and a virtual
//! camera, then drives a fitness-guided campaign against a pluggable object
//! detector, classifying the faults it provokes (object missing, false
//! detection, localization error).
//!
//! Start with the runnable examples (`cargo run --example campaign_guided`)
//! or the `fusefuzz` binary (`fusefuzz selfcheck`).

pub mod camera;
pub mod campaign;
pub mod cli;
pub mod fitness;
pub mod geom;
pub mod kitti;
pub mod lidar;
pub mod mesh;
pub mod metrics;
pub mod pose;
pub mod rng;
pub mod selfcheck;
pub mod synthetic;

pub use geom::{
    box3_corners, box3_from_corners, iou_2d, iou_3d, lidar_to_cam, project_to_image, Box2, Box3,
    Calibration, GeomError, GroundTruth, Point3, PointCloud, Pose3,
};
pub use cli::run_cli;
