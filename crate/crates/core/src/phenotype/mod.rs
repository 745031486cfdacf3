//! Graph clustering of embeddings and phenotype assignment.

pub(crate) mod cluster;
mod confusion;
mod graph;
mod heatmap;
mod labels;
mod louvain;
mod subcluster;

pub use cluster::{adjusted_rand_index, apply_unknown_rule, cluster, merge_communities, ClusterAssignment, ClusterConfig, UNKNOWN};
pub use confusion::{confusion_matrix, ConfusionMatrix};
pub use graph::{jaccard_graph, knn, Graph};
pub use heatmap::{cluster_heatmap, ClusterHeatmap};
pub use labels::{default_vocabulary, write_assignments, write_label_template, PhenotypeMap, UNKNOWN_PHENOTYPE};
pub use louvain::{louvain, modularity};
pub use subcluster::{scaled_min_size, subcluster, Subclustering};
