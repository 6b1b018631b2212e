"""Find OOD example subsets on which ID and OOD accuracy stop lining up."""
from .baselines import (
    FarthestFromIDSelector,
    MostMisclassifiedSelector,
    RandomSubsetSelector,
    farthest_from_id,
    most_misclassified,
    random_subset,
)
from .data import (
    CorrectnessMatrix,
    EmbeddingTable,
    ExampleMeta,
    ModelRecord,
    ModelTable,
    load_correctness,
    load_embeddings,
    load_example_meta,
    load_models,
    probit,
    selected_ood_accuracy,
    split_models,
)
from .selector import (
    OODSelect,
    OptimizerConfig,
    SelectionResult,
    SweepReport,
    discretize,
    evaluate_subset,
    gradient,
    objective,
    recommend_size,
    select_subset,
    sweep,
)
from .stats import (
    CorrelationReport,
    LineFit,
    bootstrap_prevalence_shift,
    fisher_interval,
    fit_correlation_line,
    jaccard,
    model_count_stability,
    normalized_jaccard_sequence,
    pearson,
    spearman,
)
from .synth import (
    PlantedSpec,
    PlantedTruth,
    brute_force_best_subset,
    generate_planted,
    lemma_decay_probe,
    lipschitz_probe,
    nonsubmodularity_witness,
)

__version__ = "0.1.0"
