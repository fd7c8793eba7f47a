//! Benchmark orchestration, generated task families and the sine demo.

pub mod benchmark;
pub mod sine;
pub mod stats;
pub mod synthetic;

pub use benchmark::{run_benchmark, run_method, BenchmarkSpec, DatasetSource, Method, MethodSettings, RegretReport};
pub use sine::{sine_demo, SineDemo, SineDemoConfig};
pub use synthetic::{sine_space, QuadraticFamily, SineTask};
