"""Graph-based multi-vector similarity search."""

from mvann.ant import AntTable, ant_lookup, build_ant
from mvann.approx import QueryClustering, cluster_query, usim_approx
from mvann.core import (
    Dataset,
    Distance,
    FormatError,
    MultiVector,
    ScoredMatch,
    SimilarityConfig,
    dis,
    gamma_nn_exact,
    l2_normalize,
    metric_preset,
    usim_exact,
)
from mvann.graph import IndexParams, MvIndex, assign_layer, build_index, edge_weight, insert
from mvann.io import IndexBundle, build_bundle, load_index, read_mvd, save_index, write_mvd
from mvann.oracle import GroundTruth, linear_scan_topk, recall
from mvann.search import SearchParams, augmented_search_layer, knn_search, search_layer_plain
from mvann.synthetic import GeneratorSpec, generate_queries, generate_synthetic
from mvann.token_index import TokenHnswParams, build_token_index, token_knn

__all__ = [
    "AntTable", "Dataset", "Distance", "FormatError", "GeneratorSpec", "GroundTruth", "IndexBundle",
    "IndexParams", "MultiVector", "MvIndex", "QueryClustering", "ScoredMatch", "SearchParams",
    "SimilarityConfig", "TokenHnswParams", "ant_lookup", "assign_layer", "augmented_search_layer",
    "build_ant", "build_bundle", "build_index", "build_token_index", "cluster_query", "dis", "edge_weight",
    "gamma_nn_exact", "generate_queries", "generate_synthetic", "insert", "knn_search", "l2_normalize",
    "linear_scan_topk", "load_index", "metric_preset", "read_mvd", "recall", "save_index",
    "search_layer_plain", "token_knn", "usim_approx", "usim_exact", "write_mvd",
]
