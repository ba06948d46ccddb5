"""Additive neural VAR causal discovery with forecast-necessity testing."""

__version__ = "0.1.0"

from .panel import (
    LagWindow,
    NormalizationStats,
    PanelDataset,
    PanelError,
    PanelSchema,
    SplitSpec,
    WindowSet,
    apply_normalization,
    enumerate_windows,
    fit_normalization,
    invert_normalization,
    load_panel_csv,
    write_panel_csv,
)
from .model import (
    CausalScoreMatrix,
    ContributionNet,
    ContributionTable,
    EdgeMask,
    ModelError,
    NavarModel,
    causal_scores,
    contribution_series,
    contributions,
    eval_contribution,
    load_checkpoint,
    predict,
    predict_batch,
    save_checkpoint,
)
from .training import (
    DivergenceError,
    GradientCheckReport,
    Gradients,
    LossReport,
    TrainConfig,
    batch_loss,
    batch_loss_and_grads,
    gradient_check,
    init_model,
    train,
    write_loss_csv,
)
from .necessity import (
    DMTestResult,
    EdgeScreenReport,
    EdgeScreenRow,
    LossDifferentialSeries,
    LossPanel,
    NecessityError,
    NESTED_MODEL_WARNING,
    adjust_pvalues,
    build_differential,
    dm_test,
    forecast_losses,
    hac_variance_of_mean,
    newey_west_bandwidth,
    screen_all_edges,
)
from .synth import (
    DGPConfig,
    FUNCTION_LIBRARY,
    GraphEdge,
    GroundTruthGraph,
    RecoveryMetrics,
    SynthError,
    build_graph,
    evaluate_recovery,
    generate,
    oracle_necessity,
)

__all__ = [name for name in dir() if not name.startswith("_")]
