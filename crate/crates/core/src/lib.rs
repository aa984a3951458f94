pub mod autodiff;
pub mod topk;
pub mod network;
pub mod resource;
pub mod data;
pub mod search;
pub mod fidelity;
