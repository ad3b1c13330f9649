from pydantic import BaseModel, ConfigDict, Field, NonNegativeInt
from typing import List, Optional, Dict, Any, Literal
from datetime import datetime

Matrix = List[List[float]]


class StrictModel(BaseModel):
    """文件格式模型：拒絕未知鍵"""
    model_config = ConfigDict(extra="forbid")


# 模型文件相關模型
class BlockEntryModel(StrictModel):
    name: str
    repetitions: int = Field(1, ge=1)


class BallParameters(StrictModel):
    name: Literal["ball"]
    radius: float = Field(gt=0)
    center: Optional[List[float]] = None


class HalfspaceParameters(StrictModel):
    name: Literal["halfspace"]
    normal: List[float]
    offset: float


class PolynomialTerm(StrictModel):
    coefficient: float
    powers: List[NonNegativeInt]


class PolynomialParameters(StrictModel):
    terms: List[PolynomialTerm]
    constant: float = 0.0


class ResidualMassParameters(StrictModel):
    M0: Matrix
    M_terms: List[Matrix]
    L0: Matrix
    L_terms: List[Matrix]


class ConstraintModel(StrictModel):
    type: Literal["builtin", "polynomial", "residual_mass"]
    name: Optional[str] = None
    parameters: Dict[str, Any] = Field(default_factory=dict)
    equality: bool = False


class ModelFile(StrictModel):
    name: str = "plant"
    A1: Matrix = Field(default_factory=list)
    B1: Matrix = Field(default_factory=list)
    B2: Matrix = Field(default_factory=list)
    C1: Matrix = Field(default_factory=list)
    C2: Matrix = Field(default_factory=list)
    D11: Matrix = Field(default_factory=list)
    D12: Matrix = Field(default_factory=list)
    D21: Matrix = Field(default_factory=list)
    D22: Matrix = Field(default_factory=list)
    blocks: List[BlockEntryModel]
    constraints: List[ConstraintModel] = Field(default_factory=list)
    n_controls: int = Field(0, ge=0)
    n_measurements: int = Field(0, ge=0)


# 綜合配置相關模型
class Requirement(StrictModel):
    """閉環通道上的範數需求；硬需求歸一化到閾值 1"""
    name: str
    inputs: List[NonNegativeInt]
    outputs: List[NonNegativeInt]
    norm: Literal["hinf", "h2"] = "hinf"
    role: Literal["soft", "hard"]
    weight: float = Field(1.0, gt=0)


class ControllerStructureModel(StrictModel):
    order: int = Field(0, ge=0)
    free: Optional[Dict[str, List[List[bool]]]] = None
    initial: Optional[Dict[str, Matrix]] = None


class SynthesisFile(StrictModel):
    requirements: List[Requirement]
    structure: ControllerStructureModel = Field(default_factory=ControllerStructureModel)
    config: Dict[str, Any] = Field(default_factory=dict)


class ControllerMatrices(StrictModel):
    A: Matrix = Field(default_factory=list)
    B: Matrix = Field(default_factory=list)
    C: Matrix = Field(default_factory=list)
    D: Matrix


# 基礎響應模型
class BaseResponse(BaseModel):
    success: bool
    message: Optional[str] = None
    timestamp: datetime = Field(default_factory=datetime.now)


# 請求模型
class WorstCaseRequest(BaseModel):
    model: Optional[ModelFile] = None
    benchmark: Optional[str] = None
    controller: Optional[ControllerMatrices] = None
    use_baseline: bool = False
    query: Dict[str, Any] = Field(default_factory=dict)


class MonteCarloRequest(BaseModel):
    model: Optional[ModelFile] = None
    benchmark: Optional[str] = None
    controller: Optional[ControllerMatrices] = None
    use_baseline: bool = False
    kind: Literal["stability", "hinf", "h2"] = "stability"
    inputs: Optional[List[NonNegativeInt]] = None
    outputs: Optional[List[NonNegativeInt]] = None
    gamma: Optional[float] = Field(None, gt=0, lt=1)
    epsilon: Optional[float] = Field(None, gt=0, lt=1)
    samples: Optional[int] = Field(None, ge=1)
    seed: int = 0


class SampleSizeRequest(BaseModel):
    gamma: float = Field(gt=0, lt=1)
    epsilon: float = Field(gt=0, lt=1)


# 響應模型
class WorstCaseResponse(BaseResponse):
    report: Dict[str, Any]


class MonteCarloResponse(BaseResponse):
    report: Dict[str, Any]


class SampleSizeResponse(BaseResponse):
    gamma: float
    epsilon: float
    samples: int


class BenchmarkResponse(BaseResponse):
    name: str
    model: ModelFile


# 錯誤響應模型
class ErrorResponse(BaseModel):
    success: bool = False
    error: str
    detail: Optional[str] = None
    timestamp: datetime = Field(default_factory=datetime.now)
