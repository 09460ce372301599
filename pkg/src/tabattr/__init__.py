"""tabattr: coalition-sampling feature attribution for tabular classifiers
served as next-token-logprob endpoints.

Rows become deterministic ``key:value`` prompts; feature importance is the
difference in mean distributional similarity (JSD, KL, or L1 based) between
sampled coalitions that include and exclude each field; deletion curves and
rank correlations validate the resulting orderings.
"""

__version__ = "0.1.0"

from .attribution import (
    AttributionResult,
    Coalition,
    CoalitionRecord,
    SamplingConfig,
    compute_attributions,
    essential_coalitions,
    n_extra,
    normalize_phi,
    sample_extra,
)
from .backends import (
    Backend,
    BackendDescriptor,
    HttpBackend,
    RecordingBackend,
    ReplayBackend,
    SyntheticBackend,
    SyntheticOracleSpec,
    TokenLogprob,
    TopKDistribution,
    build_backend,
    evaluate_prompts,
    prompt_digest,
    query,
)
from .cache import (
    CacheManifest,
    config_fingerprint,
    default_cache_name,
    ensure_manifest,
    load_or_compute,
)
from .divergence import LN2, METRICS, jsd_nat, kl_nat, l1, similarity
from .errors import (
    AttributionError,
    BackendError,
    BackendUnavailableError,
    CacheError,
    CacheMissError,
    ConfigError,
    CorruptCacheError,
    DatasetError,
    IndexSetError,
    NormalizationError,
    ProtocolError,
    RankingError,
    SerializationError,
    StaleCacheError,
    TabAttrError,
)
from .faithfulness import (
    DeletionCurve,
    DeletionRun,
    ExternalRanking,
    RankingOrder,
    curve_auc,
    load_external_ranking,
    predicted_class,
    random_order,
    run_deletion,
    write_curves_csv,
    write_curves_json,
)
from .rank_compare import GlobalRanking, global_ranking, spearman_rho
from .tabular import (
    FeatureField,
    PromptTemplate,
    TabularInstance,
    build_prompt,
    input_block,
    load_dataset,
    load_schema,
    load_template,
    normalize_key,
    normalize_value,
    parse_features,
    serialize_features,
)
from .verbalizer import (
    NormalizedDistribution,
    VerbalizerMap,
    aggregate_raw,
    canonicalize_token,
    class_distribution,
    normalize_classes,
)

__all__ = [name for name in dir() if not name.startswith("_")]
