"""Lifted linear modeling of driver response to speed advisories.

The package covers the full loop: generating an energy-aware advisory speed
profile for a route, synthesizing driver trajectories that follow it with
human quirks (reaction delay, noise, lapses of attention), identifying a
linear predictor in a polynomial observable space, adapting that predictor
online from streaming data, and scoring predictions over multiple horizons.
"""

from .advisory import (
    AdvisoryProfile,
    EcoDpConfig,
    PowertrainParams,
    RouteInfeasibleError,
    RouteSpec,
    resample_to_time,
    solve_eco_dp,
    surrogate_powertrain,
)
from .basis import LiftedBasis, PhysicalState, StateScaler, enumerate_basis
from .driversim import (
    DistractionWindow,
    DriverParams,
    VehicleParams,
    make_distracted_segment,
    simulate_driver,
)
from .edmd import (
    DataMatrices,
    FitConfig,
    FitReport,
    RankDeficientDataError,
    build_matrices,
    fit,
    fit_trajectories,
    split_dataset,
)
from .evaluate import (
    BenchReport,
    HorizonReport,
    OnlineSettings,
    bench_update,
    evaluate_horizons,
    rmse,
)
from .model import (
    KoopmanModel,
    ModelFileError,
    RolloutDivergenceError,
    Trajectory,
)
from .rls import RlsState, init_rls, rls_update, snapshot_model, update_tick

__version__ = "0.1.0"
