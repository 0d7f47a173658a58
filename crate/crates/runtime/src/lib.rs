//! Runtime for the dronenav sandbox: topic bus, fixed-step simulation loop
//! with the MAPPING → NAVIGATION workflow, scenario and map files, headless
//! runs with metrics, and the JSON protocol served over WebSocket.

pub mod bus;
pub mod clock;
pub mod mapio;
pub mod protocol;
pub mod runlog;
pub mod scenario;
pub mod script;
pub mod server;
pub mod sim;
