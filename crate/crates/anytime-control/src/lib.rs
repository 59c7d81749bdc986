//! Simulation laboratory and bounds calculator for stabilizing unstable
//! vector linear systems over noisy communication links.
//!
//! The crate is organized around one question: given a discrete-time plant
//! `X_{t+1} = A X_t + B_u U_t + B_w W_t` observed through
//! `Y_t = C_y X_t + N_t`, with bounded disturbance and noise, what
//! rate/reliability pairs must a channel code deliver so that a controller
//! on the far side of the channel can keep every moment `E[||X_t||^eta]`
//! bounded, and how are such codes and controllers built?
//!
//! Modules:
//!
//! - [`state_space`]: plant dynamics, structural tests (observability,
//!   reachability, intrinsic delay), eigen-structure, and the real Jordan
//!   decomposition with its rotating coordinate frame.
//! - [`channels`]: binary erasure channel, delayed feedback views, and the
//!   floor-schedule bit pipe used for message arrivals.
//! - [`bounds`]: closed-form reliability/rate calculators for the erasure
//!   channel: the Gallager exponent, anytime capacity and its inverse,
//!   sphere-packing divergence, strict-priority low-stream exponents, and
//!   rate-region membership tests.
//! - [`priority_code`]: constructive anytime codes built from prioritized
//!   FIFO retransmission queues, with a decoder-side mirror and full
//!   delay/queue statistics.
//! - [`observer_controller`]: quantized-window virtual processes, Jordan
//!   block disturbance inflation, delayed-correction control replay,
//!   batched control/observation maps, and the control-signal modulation
//!   scheme that lets an observer read channel outputs back off the plant.
//! - [`closed_loop`]: runnable loops wiring plants, windows, buffers, and
//!   transports together, with explicit or modulated outcome feedback and
//!   per-stream reliability demand reports.
//! - [`embedding`]: the converse construction that hides message bits in
//!   simulated disturbances and recovers them from the controlled state by
//!   successive per-stream decoding.
//! - [`simulator`]: Monte Carlo engine with per-trial deterministic
//!   randomness, adversarial disturbance policies, moment estimation, and
//!   paired scheme comparison under common random numbers.

pub mod bounds;
pub mod channels;
pub mod closed_loop;
pub mod embedding;
pub mod observer_controller;
pub mod priority_code;
pub mod simulator;
pub mod state_space;
