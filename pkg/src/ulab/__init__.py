"""ulab: a desk-scale laboratory for machine unlearning.

Exact unlearning (naive retraining, SISA sharding), approximate unlearning
(Fisher step-plus-noise, influence updates via LiSSA/CG), similarity-based
healing with spare sets and twins, adversarial unlearn-request generators,
and a config-driven experiment harness with deterministic reports.
"""

from .adversary import (
    AdversaryConfig,
    generate_requests,
    load_requests,
    output_aware_scores,
    param_aware_scores,
    requests_blind,
    requests_output_aware,
    requests_param_aware,
    save_requests,
)
from .approx import (
    FisherConfig,
    InfluenceConfig,
    cg_inverse_hvp,
    cg_solve,
    fisher_unlearn,
    influence_update,
    lissa_inverse_hvp,
    lissa_solve,
    newton_step,
    sequential_unlearn,
)
from .config import ExperimentConfig, from_toml
from .dataset import (
    Dataset,
    Sample,
    SplitSpec,
    generate_blobs,
    load_csv,
    load_idx,
    make_sample,
    remove_by_ids,
    sample_id,
    samples_by_ids,
    save_csv,
    split_primary_backup,
)
from .errors import (
    CovarianceError,
    DivergenceError,
    FormatError,
    InvalidReplacementError,
    MembershipError,
    NoVotersError,
    NumericalError,
    UlabError,
    UndefinedSimilarityError,
)
from .exact import (
    SisaConfig,
    SisaEnsemble,
    load_ensemble,
    save_ensemble,
    sisa_accuracy,
    sisa_predict,
    sisa_train,
    sisa_unlearn,
    train_gold,
)
from .harness import run_healing_protocol, run_sweep
from .healing import (
    HealConfig,
    MetricSpec,
    SpareSet,
    TwinIndex,
    build_twin_index,
    default_delta,
    distance,
    draw_random_replacements,
    fit_covariance,
    heal,
    healing_union,
    pairwise_distances,
    prepare_metric,
    reserve_spare,
    save_spare_manifest,
    save_twin_csv,
    select_spare,
    spare_from_backup,
)
from .model import (
    Architecture,
    ModelState,
    TrainConfig,
    accuracy,
    embed,
    embed_batch,
    fisher_diag,
    grad,
    hvp,
    init,
    load_model,
    loss,
    predict,
    save_model,
    train,
)
from .report import (
    MetricsReport,
    RunRecord,
    curve_rows,
    load_report,
    report_from_json,
    report_to_json,
    representative_index,
    summarize,
    write_report,
)

__version__ = "0.1.0"
