"""Feature/embedding files, annotations, manifests and the synthetic generator."""
from .io import (
    PROPOSAL_QUERY_ID,
    build_proposal_query,
    load_dataset,
    read_embedding_file,
    read_feature_file,
    read_manifest,
    write_embedding_file,
    write_feature_file,
    write_manifest,
)
from .synth import PlantedEvent, PlantedInstance, SyntheticTruth, action_name, gen_synthetic
from .types import (
    Annotation,
    BadMagic,
    DataError,
    DatasetManifest,
    DimensionMismatch,
    DuplicateQueryId,
    EmptyCatalog,
    FeatureSequence,
    InsufficientDimension,
    MissingFeatureFile,
    NonFiniteData,
    QueryCatalog,
    QueryEmbedding,
    Segment,
    SegmentOutOfRange,
    Task,
    TruncatedPayload,
    UnresolvedQuery,
    VideoRecord,
)
