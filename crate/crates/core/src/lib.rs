//! Estimation and inference for two-way clustered data from a Bernoulli sketch.
//!
//! Cells `(i, j)` of an `N x M` panel are kept independently with probability
//! `p`. Estimators run on the kept cells only, and their variance estimates
//! add a sampling term scaled by `(C / n) * (1 - p) / p` to the usual
//! two-way cluster term, where `C = min(N, M)`.

pub mod error;
pub mod gmm;
pub mod linalg;
pub mod mestim;
pub mod moments;
pub mod panel;
pub mod par;
pub mod rng;
pub mod simulate;
pub mod sizing;
pub mod sketch;

pub use error::{Error, Result};
pub use gmm::{gmm_fit, gmm_variance, GmmFit, GmmOptions, LinearIv, MeanModel, MomentModel};
pub use mestim::{m_fit, m_variance, LeastSquares, Logistic, LossModel, MFit, MOptions};
pub use moments::{
    cell_fn, combine_variance, gamma_a_hat, gamma_b_hat, mean_inference, subsample_mean, CellMap, Fields,
    InferenceReport, SelectedValues, VarianceComponents, VarianceMode,
};
pub use panel::{load_panel, CellKey, PanelDims, TwoWayPanel};
pub use par::Execution;
pub use simulate::{run_experiment, run_experiments, table_report, DesignSpec, MetricsRow};
pub use sizing::{choose_c_star, solve_c_star, SizingResult};
pub use sketch::{generate_mask, lambda_hat, resolve_p_rule, PRule, SketchConfig, SketchMask};
