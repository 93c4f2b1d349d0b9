pub mod decoder;
pub mod ensemble;
pub mod harness;
pub mod logit_server;
pub mod numerics;
pub mod providers;
