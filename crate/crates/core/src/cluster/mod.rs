//! K-means on the learned representation and external clustering metrics.

mod kmeans;
mod metrics;

pub use kmeans::{kmeans, ClusteringResult, KMeansConfig};
pub use metrics::{accuracy, contingency, hungarian_max, nmi, purity, Contingency, MetricTriple, NMI_VARIANT};
