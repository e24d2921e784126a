pub mod align_io;
pub mod evaluator;
pub mod geom;
pub mod kinematics;
pub mod motion_filter;
pub mod oracle;
pub mod policy;
pub mod protocol;
pub mod recorder;
pub mod scene;
#[cfg(feature = "net")]
pub mod server;
#[cfg(feature = "net")]
pub mod session;
pub mod sim2real;
pub mod task;
