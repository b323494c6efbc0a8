pub mod apps;
pub mod arena;
pub mod config;
pub mod hwthread;
pub mod middleware;
pub mod msg;
pub mod trace;
pub mod transport;
