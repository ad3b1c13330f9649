from pydantic_settings import BaseSettings
from typing import List, Optional


class Settings(BaseSettings):
    # 應用設置
    APP_NAME: str = "RobustWC"
    VERSION: str = "1.0.0"
    DEBUG: bool = False

    # 服務器設置
    HOST: str = "0.0.0.0"
    PORT: int = 8000
    ALLOWED_HOSTS: List[str] = ["*"]

    # 並行設置
    MAX_WORKERS: int = 4

    # LFT 與系統分析
    ILL_POSED_RCOND: float = 1e-12
    FD_STEP: float = 1e-6
    ACTIVE_EIG_TOL: float = 1e-8
    ACTIVE_FREQ_REL_TOL: float = 1e-6
    HAMILTONIAN_IMAG_TOL: float = 1e-8
    HINF_REL_TOL: float = 1e-6
    HINF_MAX_BISECTIONS: int = 200
    HINF_SEED_FREQUENCIES: int = 20
    LYAPUNOV_KRONECKER_MAX: int = 60
    LYAPUNOV_RESIDUAL_WARN: float = 1e-8
    LYAPUNOV_RESIDUAL_FAIL: float = 1e-6

    # SQP 設置
    SQP_OPTIMALITY_TOL: float = 1e-6
    SQP_STEP_TOL: float = 1e-8
    SQP_MAX_ITER: int = 200
    SQP_LAMBDA_MAX: float = 1.0
    SQP_EPS_RHO: float = 0.5
    SQP_H_MIN: float = 1e-6
    SQP_H_MAX: float = 1e6
    SQP_ELASTIC_PENALTY: float = 1e4
    SQP_LINE_SEARCH_HALVINGS: int = 25
    QP_TOL: float = 1e-10
    QP_MAX_PIVOTS: int = 500

    # PSO 設置
    PSO_SWARM_SIZE: int = 60
    PSO_INERTIA_LO: float = 0.6
    PSO_INERTIA_HI: float = 1.1
    PSO_STALL_ITERATIONS: int = 20
    PSO_FUNCTION_TOLERANCE: float = 0.10
    PSO_MAX_ITERATIONS: int = 200
    PSO_COGNITIVE: float = 1.49
    PSO_SOCIAL: float = 1.49
    PSO_TAU_GROWTH: float = 100.0
    PSO_MAX_ESCALATIONS: int = 3
    PSO_SENTINEL: float = 1e12

    # 蒙特卡羅設置
    MC_ACCEPTANCE_WINDOW: int = 100000
    MC_MIN_ACCEPTANCE: float = 1e-6
    MC_BATCH_SIZE: int = 1024

    # 最壞情況搜索
    WC_N_STARTS: int = 4
    WC_DEDUP_FACTOR: float = 1e-3
    RESTORE_MAX_ITER: int = 50

    # 魯棒綜合
    SYNTH_ALPHA_MAX: float = -1e-7
    SYNTH_EPS1: float = 0.05
    SYNTH_EPS2: float = 0.01
    SYNTH_VALIDATION_RUNS: int = 20
    SYNTH_MAX_ITERATIONS: int = 30
    TUNER_RESTARTS: int = 13
    TUNER_MAX_EVALUATIONS: int = 2000
    TUNER_RETRIES: int = 2

    # 報告設置
    REPORT_DIR: str = "reports"
    REPORT_FLOAT_FORMAT: str = "%.17g"

    # 日誌設置
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "{time} | {level} | {message}"
    LOG_TO_FILE: bool = False
    LOG_DIR: str = "logs"

    # 基準模型目錄（可選，默認為包內數據）
    BENCHMARK_DIR: Optional[str] = None

    class Config:
        env_file = ".env"
        case_sensitive = True


# 創建設置實例
settings = Settings()
