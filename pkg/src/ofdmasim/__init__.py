"""Single-cell OFDMA downlink scheduling simulator.

Channel and traffic models, an exponential-rule QoS scheduler with a
weighted optimal subcarrier allocation, an adaptive best-effort weight
controller, the sequential zero-delay baseline, and experiment plumbing.
"""

from .channel import (
    CellChannel,
    ChannelParams,
    RateMatrix,
    UserChannelState,
    build_rate_matrix,
    default_mcs_table,
    initial_user_state,
    path_loss_db,
    rate_from_snr,
    snr_gap_factor,
    subcarrier_snr,
    update_user_channel,
)
from .scheduler import (
    Allocation,
    AllocationError,
    BeWeightController,
    QosPriority,
    SchedulerInput,
    allocate_capped,
    allocate_with_weight,
    check_optimality_conditions,
    delay_urgency,
    exp_rule_priorities,
    schedule_slot_adaptive,
    schedule_slot_sequential,
)
from .sim import (
    BeParams,
    RunMetrics,
    SimConfig,
    SlotMetrics,
    StreamingParams,
    VoipParams,
    desk_channel,
    desk_config,
    detect_convergence,
    full_scale_config,
    run_simulation,
    simulate_run,
)
from .traffic import (
    BeSource,
    ClassProfile,
    DEFAULT_PROFILES,
    Packet,
    PacketQueue,
    StrSource,
    TrafficClass,
    VoipSource,
    calibrate_streaming_beta,
    truncated_exp_mean,
)

__version__ = "0.1.0"
