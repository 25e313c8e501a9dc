//! Reporting-delay models: a right-truncated log-logistic regression for the
//! continuous-time pipeline and the discrete lag-probability machinery shared
//! by the multinomial and Dirichlet-multinomial pipelines.

pub mod continuous;
pub mod discrete;
