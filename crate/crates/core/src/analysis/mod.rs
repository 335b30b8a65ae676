//! Network-dynamics measurements and ensembles: gradient reach into past
//! cell states, cell-state change rates, loss by position inside words, and
//! averaged-distribution ensembles. Each report writes a CSV.

mod dynamics;
mod ensemble;
mod position;
mod probe;

pub use dynamics::{cell_change_rate, change_rate_of_trace, ChangeRateReport};
pub use ensemble::{ensemble_eval, write_ensemble_csv, SUM_TOLERANCE};
pub use position::{find_words, position_bpc, PositionBpcReport, Word};
pub use probe::{
    anchor_loss, anchors, bootstrap_dominance, cell_state_gradients, gradient_probe, spearman,
    CellPerturbation, ProbeConfig, ProbeReport,
};
