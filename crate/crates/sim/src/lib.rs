//! Host-side companion to `isac-core`: TOML configuration, the Monte-Carlo
//! sweep, the sweep CSV, call-flow traces, the SDSF log file and the demo.

pub mod config;
pub mod demo;
pub mod store_log;
pub mod sweep;
pub mod table;
pub mod trace;

pub use config::{parse_config, Config, SweepConfig};
pub use demo::{demo_callflow, DemoReport};
pub use sweep::{run_sweep, SweepRow};
pub use table::{read_csv, write_csv};
