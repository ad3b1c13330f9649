from fastapi import APIRouter, HTTPException
from typing import Optional, Tuple
from pydantic import ValidationError

from app.services.benchmark import baseline_controller, load_benchmark
from app.services.explorers import McPlan, mc_sample_size
from app.services.reporting import to_jsonable
from app.services.uncertain_model import LfrPlant, StateSpace, plant_from_model, plant_to_model
from app.services.worstcase import WorstCaseQuery, mc_analysis, worst_case_searcher
from app.models.schemas import *
from app.core.exceptions import FeasibleDrawTimeout, RobustAnalysisError
from loguru import logger

router = APIRouter()


def _resolve_plant(model: Optional[ModelFile], benchmark: Optional[str],
                   controller: Optional[ControllerMatrices],
                   use_baseline: bool) -> Tuple[LfrPlant, Optional[StateSpace]]:
    """內聯模型或基準模型；控制器可內聯給出或使用基準的基線控制器"""
    if (model is None) == (benchmark is None):
        raise HTTPException(status_code=400, detail="必須且只能提供 model 或 benchmark 之一")
    spec = None
    if model is not None:
        plant = plant_from_model(model)
    else:
        plant, spec = load_benchmark(benchmark)

    if controller is not None:
        return plant, StateSpace.from_arrays(controller.A, controller.B, controller.C, controller.D)
    if use_baseline:
        if spec is None:
            raise HTTPException(status_code=400, detail="use_baseline 只適用於基準模型")
        return plant, baseline_controller(spec)
    return plant, None


# 最壞情況搜索端點
@router.post("/worst-case", response_model=WorstCaseResponse)
async def worst_case(request: WorstCaseRequest):
    """多起點最壞情況搜索"""
    try:
        plant, controller = _resolve_plant(request.model, request.benchmark, request.controller,
                                           request.use_baseline)
        query = WorstCaseQuery(**request.query)

        logger.info(f"開始最壞情況搜索請求: plant={plant.name}, kind={query.kind}")

        report = await worst_case_searcher.search(plant, query, controller)

        return WorstCaseResponse(
            success=report.worst_value is not None,
            message=None if report.worst_value is not None else "沒有起點得到可行結果",
            report=to_jsonable(report.to_dict())
        )

    except HTTPException:
        raise
    except (RobustAnalysisError, ValidationError, ValueError) as e:
        logger.error(f"最壞情況搜索請求無效: {str(e)}")
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.error(f"最壞情況搜索失敗: {str(e)}")
        raise HTTPException(status_code=500, detail=f"最壞情況搜索失敗: {str(e)}")

# Monte-Carlo 端點
@router.post("/monte-carlo", response_model=MonteCarloResponse)
async def monte_carlo(request: MonteCarloRequest):
    """恰好 N 個可行樣本的 MC 抽樣"""
    try:
        plant, controller = _resolve_plant(request.model, request.benchmark, request.controller,
                                           request.use_baseline)
        plan = McPlan(gamma=request.gamma, epsilon=request.epsilon, N=request.samples, seed=request.seed)

        logger.info(f"開始 MC 抽樣請求: plant={plant.name}, N={plan.N}")

        report = await mc_analysis(plant, request.kind, plan, controller, request.inputs, request.outputs)

        return MonteCarloResponse(success=True, report=to_jsonable(report.to_dict()))

    except HTTPException:
        raise
    except FeasibleDrawTimeout as e:
        logger.error(f"MC 抽樣可行樣本不足: {str(e)}")
        raise HTTPException(status_code=400, detail=str(e))
    except (RobustAnalysisError, ValidationError, ValueError) as e:
        logger.error(f"MC 抽樣請求無效: {str(e)}")
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.error(f"MC 抽樣失敗: {str(e)}")
        raise HTTPException(status_code=500, detail=f"MC 抽樣失敗: {str(e)}")

# 樣本數計算端點
@router.post("/mc-sample-size", response_model=SampleSizeResponse)
async def sample_size(request: SampleSizeRequest):
    """N ≥ ln γ / ln(1-ε)"""
    try:
        samples = mc_sample_size(request.gamma, request.epsilon)
        return SampleSizeResponse(success=True, gamma=request.gamma, epsilon=request.epsilon, samples=samples)
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))

# 基準模型端點
@router.get("/benchmarks/{name}", response_model=BenchmarkResponse)
async def get_benchmark(name: str):
    """以模型文件格式返回內置基準模型"""
    try:
        plant, _ = load_benchmark(name)
        return BenchmarkResponse(success=True, name=name, model=plant_to_model(plant))
    except RobustAnalysisError as e:
        logger.error(f"基準模型載入失敗: {str(e)}")
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.error(f"基準模型載入失敗: {str(e)}")
        raise HTTPException(status_code=500, detail=f"基準模型載入失敗: {str(e)}")
