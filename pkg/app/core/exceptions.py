"""
領域錯誤層級

服務層拋出這裡的錯誤；HTTP 層映射為 400，CLI 映射為退出碼。
"""

from typing import Any, Optional

import numpy as np


class RobustAnalysisError(Exception):
    """所有領域錯誤的基類"""


class DimensionMismatchError(RobustAnalysisError, ValueError):
    """矩陣或向量維度不一致"""


class ModelFileError(RobustAnalysisError, ValueError):
    """模型文件或配置文件無效"""


class RequirementError(RobustAnalysisError, ValueError):
    """需求集合不符合約定（例如缺少軟需求）"""


class IllPosedLftError(RobustAnalysisError):
    """I - Δ·D11 奇異或條件數過大"""

    def __init__(self, message: str, rcond: float = 0.0):
        super().__init__(message)
        self.rcond = rcond


class ConstraintEvaluationError(RobustAnalysisError):
    """約束函數求值失敗"""

    def __init__(self, index: int, cause: Exception):
        super().__init__(f"約束 {index} 求值失敗: {cause}")
        self.index = index
        self.cause = cause


class EigenSolverError(RobustAnalysisError):
    """特徵值求解失敗"""


class UnstableSystemError(RobustAnalysisError):
    """系統不穩定，範數無定義"""

    def __init__(self, abscissa: float):
        super().__init__(f"系統不穩定，譜橫坐標 = {abscissa:.6g}")
        self.abscissa = abscissa


class NoConvergenceError(RobustAnalysisError):
    """迭代算法未在預算內收斂"""


class NonzeroFeedthroughError(RobustAnalysisError):
    """H2 範數要求 D = 0"""


class H2AssumptionError(RobustAnalysisError, ValueError):
    """植物不滿足 H2 假設 (D22 = 0 且 D12 = 0 或 D21 = 0)"""


class LyapunovSolveError(RobustAnalysisError):
    """Lyapunov 方程奇異或病態"""


class NoActiveFrequencyError(RobustAnalysisError):
    """H∞ 結果中沒有活躍頻率"""


class NonSimpleActiveEigenvalueError(RobustAnalysisError):
    """所有活躍特徵值均為虧損特徵值"""


class InfeasibleLinearizationError(RobustAnalysisError):
    """QP 子問題的線性化約束不可行"""

    def __init__(self, message: str, certificate: Optional[dict] = None):
        super().__init__(message)
        self.certificate = certificate or {}


class MaxPivotsError(RobustAnalysisError):
    """有效集 QP 超過最大換基次數"""


class ObjectiveEvaluationFailure(RobustAnalysisError):
    """目標函數在某個 δ 處無法求值（不穩定或 LFT 不適定）"""

    def __init__(self, delta: Any, reason: str, message: str = ""):
        self.delta = np.array(delta, dtype=float, copy=True)
        self.reason = reason
        super().__init__(message or f"目標函數在 δ={np.round(self.delta, 6).tolist()} 處失敗: {reason}")


class NoFeasiblePointFound(RobustAnalysisError):
    """罰函數升級後仍未找到可行點"""


class FeasibleDrawTimeout(RobustAnalysisError):
    """可行樣本接受率低於下限"""

    def __init__(self, drawn: int, accepted: int):
        super().__init__(f"可行樣本接受率過低: {accepted}/{drawn}")
        self.drawn = drawn
        self.accepted = accepted


class RestoreFailed(RobustAnalysisError):
    """可行性恢復失敗"""

    def __init__(self, delta: Any, violation: float):
        super().__init__(f"可行性恢復失敗，最大違反量 {violation:.3e}")
        self.delta = np.asarray(delta, dtype=float)
        self.violation = violation


class TunerBudgetExhausted(RobustAnalysisError):
    """多模型整定未找到滿足穩定性的控制器"""

    def __init__(self, message: str, best: Any = None, trace: Any = None):
        super().__init__(message)
        self.best = best
        self.trace = trace


class IterationBudgetExhausted(RobustAnalysisError):
    """綜合迭代預算用盡"""

    def __init__(self, message: str, trace: Any = None, controller: Any = None, active_set: Any = None):
        super().__init__(message)
        self.trace = trace
        self.controller = controller
        self.active_set = active_set


class ActiveSetStagnation(RobustAnalysisError):
    """違反點全部與已有活躍配置重複，活躍配置集合無法增長"""

    def __init__(self, message: str, trace: Any = None, controller: Any = None, active_set: Any = None):
        super().__init__(message)
        self.trace = trace
        self.controller = controller
        self.active_set = active_set


class HardRequirementInfeasible(RequirementError):
    """整定後硬需求在活躍配置上仍超過 1 + eps2"""

    def __init__(self, message: str, violations: Any = None, trace: Any = None):
        super().__init__(message)
        self.violations = violations
        self.trace = trace
