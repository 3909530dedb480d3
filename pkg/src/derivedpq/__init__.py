"""Product-quantization ANN search with derived codebooks.

Large codebooks give accurate asymmetric distances but blow the lookup
tables out of cache; small codebooks scan fast but rank poorly. This
package trains both jointly: each full codebook is split into balanced
groups whose means form a small derived codebook, and centroid indexes
are re-packed so a code's low bits address the derived centroid
directly. Queries then run in two passes: a cache-friendly 8-bit scan
over the derived tables collects candidates, and only those are
re-scored at full resolution through lazily computed tables.
"""

from .clustering import Clustering, kmeans, kmeans_same_size
from .errors import FormatError, InvariantError
from .evaluation import (
    BenchReport,
    MethodSpec,
    calibrate_r2,
    exact_nn,
    recall_at_r,
    run_bench,
)
from .flat import FlatIndex
from .ivf import IVFIndex
from .quantizer import (
    OptimizedProductQuantizer,
    ProductQuantizer,
    build_final_codebook,
    low_bits,
    packing_permutation,
)
from .search import ResultSet, adc, adc_batch, compute_tables, scan, top_r_by_distance
from .twopass import (
    CappedBuckets,
    LazyTables,
    QuantizedTables,
    adc_low_bits,
    adc_refine,
    nns_derived,
    quantize_tables,
    refine,
    scan_derived,
)
from .vecio import load_model, read_vecs, save_model, write_vecs

__version__ = "0.1.0"

__all__ = [
    "BenchReport",
    "CappedBuckets",
    "Clustering",
    "FlatIndex",
    "FormatError",
    "IVFIndex",
    "InvariantError",
    "LazyTables",
    "MethodSpec",
    "OptimizedProductQuantizer",
    "ProductQuantizer",
    "QuantizedTables",
    "ResultSet",
    "adc",
    "adc_batch",
    "adc_low_bits",
    "adc_refine",
    "build_final_codebook",
    "calibrate_r2",
    "compute_tables",
    "exact_nn",
    "kmeans",
    "kmeans_same_size",
    "load_model",
    "low_bits",
    "nns_derived",
    "packing_permutation",
    "quantize_tables",
    "read_vecs",
    "recall_at_r",
    "refine",
    "run_bench",
    "save_model",
    "scan",
    "scan_derived",
    "top_r_by_distance",
    "write_vecs",
    "__version__",
]
