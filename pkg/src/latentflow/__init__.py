"""Joint flow matching over a pixel modality and a deterministic latent,
each with its own time variable."""

from .codec import ModalitySpec, Normalizer, normalize_modality
from .config import RunConfig, load_config, parse_config, save_config, serialize_config
from .dataset import Dataset, generate_shapes, load_dataset, save_dataset
from .flow import (
    CascadedTimeSampler,
    LossBalancer,
    LossSpec,
    NoisedBatch,
    joint_loss,
    noise,
    sample_times_cascaded,
    sample_times_multischedule,
    sample_times_single_schedule,
    xpred_vloss,
)
from .metrics import FrechetStats, PsnrGrid, frechet_distance, psnr, psnr_grid, snr_trace
from .model import (
    NULL_CLASS,
    DenoiserConfig,
    ModelDenoiser,
    backward,
    ema_update,
    forward,
    init_params,
    loss_and_grad,
    param_count,
)
from .oracles import GMMOracle, GMMOracleSpec, GroundTruthOracle
from .sampling import (
    GuidanceSpec,
    TrajectoryPlan,
    guide,
    integrate,
    joint_step_euler,
    joint_step_heun,
    named_plan_schedules,
    plan_trajectory,
    sample_batch,
    xpred_to_velocity,
)
from .schedules import (
    GenerationOrder,
    Schedule,
    convert_time,
    generation_order,
    shift_time,
)
from .training import LoadedRun, TrainResult, load_run, train

__version__ = "0.1.0"
