//! Example nodes and the message types they use.

pub mod behaviors;
pub mod bench;
pub mod workloads;

use crate::msg::{text::parse_definitions, MsgError, TypeHandle, TypeRegistry};

pub use behaviors::{behavior_by_name, BEHAVIOR_NAMES};

/// Message types the bundled behaviors and the benchmark rely on.
pub const BUILTIN_TYPES: &str = "\
std_msgs msg UInt32 { data: u32; }
sensor_msgs msg Image { height: u32; width: u32; step: u32; data: sequence<u8>; }
application_msgs srv-request SobelSrv { img: sensor_msgs/Image; }
application_msgs srv-response SobelSrv { img: sensor_msgs/Image; }
application_msgs msg SortData { data: sequence<u32>; }
bench msg Payload { seq: u32; data: sequence<u8>; }
example_msgs action-goal Count { target: u32; }
example_msgs action-feedback Count { value: u32; }
example_msgs action-result Count { total: u32; }
";

/// Registers [`BUILTIN_TYPES`]; identical existing definitions are reused.
pub fn register_builtin_types(reg: &TypeRegistry) -> Result<Vec<TypeHandle>, MsgError> {
    parse_definitions(BUILTIN_TYPES)?.into_iter().map(|d| reg.register_or_get(d)).collect()
}
