//! Offline NUMA performance analysis of memory and synchronization traces.
//!
//! A trace is replayed once through an object registry, a page profiler
//! (first-touch ownership), a cache-line profiler (copy sets and word-level
//! sharing detail) and a synchronization profiler. [`report::build_report`]
//! turns the result into scored issues with fix suggestions.
//!
//! ```
//! use numalens_core::{analyze_stream, report::build_report, AnalyzerConfig};
//!
//! let trace = "NPTRACE 1\nAL 0 0 0x1000 64 1\nMA 5 0 W 0x1000 8\n";
//! let analysis = analyze_stream(trace.as_bytes(), AnalyzerConfig::default()).unwrap();
//! let report = build_report(&analysis);
//! assert!(report.issues.is_empty());
//! ```

pub mod analyzer;
pub mod cache;
pub mod config;
pub mod gen;
pub mod page;
pub mod registry;
pub mod report;
pub mod score;
pub mod sync;
pub mod threadset;
pub mod trace;

pub use analyzer::{analyze_stream, analyze_trace, Analysis, AnalysisError, Analyzer};
pub use config::{AnalyzerConfig, ConfigError, Thresholds};
