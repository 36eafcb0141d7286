pub mod bench;
pub mod cloud;
pub mod device;
pub mod gateway;
pub mod mesh;
pub mod signal;
