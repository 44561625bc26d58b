//! Data types, projections and constraint geometry shared by every stage.

pub mod basis;
pub mod data;
pub mod polytope;

pub use basis::{BasisTerm, Block, BlockBasis, CovarianceBasis};
pub use data::{
    build_covariance, residualize_nuisance, split_data, DesignMatrices, FeatureMatrix, Residualized, SplitData,
};
pub use polytope::{cone_qp, polytope_project, Polytope, DEFAULT_PD_FLOOR};
