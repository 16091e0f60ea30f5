"""nflbench: privacy-preserving prompt perturbation mechanisms,
reconstruction attacks, the leakage/utility measurement framework, and
empirical certification of the no-free-lunch trade-off bound."""

from .embedding import (
    EmbeddingTable,
    EncoderG,
    Prompt,
    Vocabulary,
    embed_prompt,
    estimate_bilipschitz,
    load_embedding_file,
    nearest_token,
    save_embedding_file,
    tokenize,
    vocab_diameter,
)
from .protection import (
    Mechanism,
    ProtectedPrompt,
    ProtectionConfig,
    gaussian_protected_distribution,
    perturb_embedding,
    protect_prompt,
    random_adjacency_list,
    sample_dchi_components,
    sample_dchi_noise,
)
from .attack import (
    AttackerKind,
    AttackerSpec,
    AttackTrace,
    BigramModel,
    estimate_regret_exponent,
    invert_contextual,
    invert_nearest_neighbor,
    run_calibrated_attacker,
    run_iterative_attacker,
)
from .distributions import (
    DistributionSpec,
    Estimate,
    baseline_distribution,
    sample_distribution,
    tv_discrete,
    tv_gaussian_diag,
    tv_voronoi_discretized,
)
from .metrics import (
    BoundConstants,
    LemmaSlacks,
    TradeoffRecord,
    UtilityFunctionSpec,
    check_lemma_bounds,
    check_nfl,
    distortion_extent,
    estimate_alpha,
    estimate_c,
    nfl_decomposition,
    privacy_leakage,
    recovery_extent,
    select_optimum,
    utility_loss,
)
from .harness import (
    ExperimentConfig,
    MockLLM,
    export_results,
    run_protocol,
    sweep,
    verify_nfl,
)

__version__ = "0.1.0"
