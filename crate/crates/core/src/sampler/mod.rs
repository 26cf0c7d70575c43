//! MCMC sampler: conditionals, sweeps, chain driver and persistence.

pub mod chains;
pub mod conditionals;
pub mod store;
pub mod sweep;

pub use chains::{
    chain_rng, monitored_names, monitored_scalars, posterior_psrf, run_chains, ChainSet, ChainStore,
    SamplerConfig,
};
pub use store::{parse_chain_csv, read_chain_set, write_chain_csv, write_chain_set, ChainMeta};
pub use sweep::{gibbs_sweep, update_gamma, SweepSettings, SweepStats, Workspace};
