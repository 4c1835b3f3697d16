//! Two-agent in-context reinforcement learning on partially observable
//! grid-worlds. An information agent turns its recent observations into a
//! short message vector; a PPO control agent acts on its own observation
//! plus that message.

pub mod agents;
pub mod analysis;
pub mod experiment;
pub mod gridworld;
pub mod tensor;
pub mod training;
