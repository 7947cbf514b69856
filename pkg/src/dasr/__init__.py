"""Class-agnostic salient instance regions, descriptors, and retrieval."""

from .descriptor import (
    Descriptor,
    WhitenModel,
    finalize,
    fit_whitening,
    identity_whitening,
    l2_normalize,
    pool_region,
    read_store,
    write_store,
)
from .excitation import (
    Peak,
    ProbabilityMap,
    backprop_layer,
    backprop_peak,
    backprop_seeds,
    detect_peaks,
    seed_pixels_above_mean,
)
from .graph import (
    ActivationCache,
    LayerSpec,
    NetworkGraph,
    Preprocessing,
    forward,
    input_receptive_field,
    mean_activation_map,
)
from .ingest import PreprocessSpec, load_image, preprocess, resized_extent
from .model_io import (
    WeightContainer,
    load_container,
    load_graph,
    parse_graph_text,
    serialize_graph,
    write_container,
    write_graph,
)
from .regions import (
    DetectorConfig,
    EllipseParams,
    SalientRegion,
    detect_regions,
    ellipse_bbox,
    fit_ellipse,
    iou,
    nms,
)
from .retrieval import (
    GroundTruth,
    InstanceIndex,
    RankedHit,
    RankedList,
    average_precision,
    map_at_k,
    recall_iou_curve,
    search,
)
from .vlad import Codebook, VladVector, encode, fit_rotation, train_codebook

__version__ = "0.1.0"
