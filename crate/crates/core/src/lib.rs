pub mod action;
pub mod bus;
pub mod driver;
pub mod explorer;
pub mod frag;
pub mod mux;
pub mod reassembly;
pub mod scenario;
pub mod sim;
pub mod types;
