//! In-process testbench for ipgate: simulated client topologies, a stub
//! origin server, scripted scenarios and a latency benchmark.

pub mod bench;
pub mod client;
pub mod instrument;
pub mod origin;
pub mod scenario;
pub mod script;
pub mod topology;

pub use bench::{bench_latency, BenchConfig, Distribution, LatencySummary};
pub use client::{HttpClient, HttpResponse};
pub use instrument::InstrumentedStore;
pub use origin::{body_for, StubOrigin};
pub use scenario::{run_on, run_scenario, Gateway, GatewayConfig, ScenarioTranscript, TranscriptEntry};
pub use script::{parse_script, Action, Scenario, ScriptError, Step};
pub use topology::{Topology, TopologyError, TopologyKind};
