"""
批處理命令行：wc / mc / synth / study / export

退出碼：0 成功；2 模型或參數錯誤；3 搜索失敗；4 綜合預算用盡。
日誌寫到 stderr，報告寫到 --report 或 --output-dir。
"""

import argparse
import asyncio
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from loguru import logger
from pydantic import ValidationError

from app.core.config import settings
from app.core.exceptions import (
    ActiveSetStagnation,
    DimensionMismatchError,
    FeasibleDrawTimeout,
    H2AssumptionError,
    IterationBudgetExhausted,
    ModelFileError,
    RequirementError,
    RobustAnalysisError,
    TunerBudgetExhausted,
)
from app.core.logging import setup_logging
from app.models.schemas import ControllerMatrices, SynthesisFile
from app.services.benchmark import (
    baseline_controller,
    default_synthesis_config,
    load_benchmark,
    parse_model_argument,
)
from app.services.explorers import McPlan
from app.services.reporting import (
    RunManifest,
    search_plot_table,
    study_plot_table,
    trace_plot_table,
    write_plot_table,
    write_report,
)
from app.services.synthesis import ControllerStructure, SynthesisConfig, robust_synthesizer
from app.services.uncertain_model import LfrPlant, StateSpace, dump_model_file, load_model_file
from app.services.worstcase import WorstCaseQuery, mc_analysis, repeat_study, worst_case_searcher

EXIT_OK, EXIT_INPUT, EXIT_SEARCH, EXIT_BUDGET = 0, 2, 3, 4
INPUT_ERRORS = (ModelFileError, RequirementError, DimensionMismatchError, H2AssumptionError,
                ValidationError, ValueError)
# 不影響數值結果的參數
_NON_IDENTITY = {"report", "output_dir", "log_level", "threads", "handler"}


def load_controller_file(path: str) -> StateSpace:
    p = Path(path)
    if not p.is_file():
        raise ModelFileError(f"控制器文件不存在: {p}")
    try:
        m = ControllerMatrices(**json.loads(p.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, ValidationError) as e:
        raise ModelFileError(f"控制器文件無效 {p}: {e}") from e
    return StateSpace.from_arrays(m.A, m.B, m.C, m.D)


def load_plant(args: argparse.Namespace, closed: bool = True) -> Tuple[LfrPlant, Optional[StateSpace], Any]:
    """
    解析模型參數

    Returns:
        (植物, 控制器或 None, 基準規格或 None)
    """
    source, value = parse_model_argument(args.model)
    spec = None
    if source == "benchmark":
        plant, spec = load_benchmark(value)
    else:
        plant = load_model_file(value)
    controller = None
    if closed:
        if getattr(args, "controller", None):
            controller = load_controller_file(args.controller)
        elif spec is not None and not getattr(args, "open_loop", False):
            controller = baseline_controller(spec)
    return plant, controller, spec


def _identity(args: argparse.Namespace) -> Dict[str, Any]:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _NON_IDENTITY}


def _report_path(args: argparse.Namespace, default_name: str) -> Path:
    if args.report:
        return Path(args.report)
    return Path(args.output_dir or settings.REPORT_DIR) / default_name


def _worstcase_query(args: argparse.Namespace) -> WorstCaseQuery:
    return WorstCaseQuery(
        kind=args.kind, inputs=args.inputs, outputs=args.outputs, explorer=args.explorer,
        n_starts=args.starts, mc_samples=args.samples or 1000, seed=args.seed,
        workers=args.threads or settings.MAX_WORKERS,
    )


def cmd_wc(args: argparse.Namespace) -> int:
    plant, controller, _ = load_plant(args)
    query = _worstcase_query(args)
    manifest = RunManifest.create("wc", _identity(args), [args.seed])
    report = asyncio.run(worst_case_searcher.search(plant, query, controller))
    path = write_report(_report_path(args, "wc.json"), report.to_dict(include_timings=False), manifest.finish(),
                        timings={"runs": [r.wall_time for r in report.runs]})
    write_plot_table(path.with_suffix(".csv"), search_plot_table(report, args.kind))
    if report.worst_value is None:
        logger.error("沒有任何起點得到可行的最壞值")
        return EXIT_SEARCH
    print(json.dumps({"worst": report.worst_value, "report": str(path)}))
    return EXIT_OK


def cmd_mc(args: argparse.Namespace) -> int:
    plant, controller, _ = load_plant(args)
    plan = McPlan(gamma=args.gamma, epsilon=args.epsilon, N=args.samples, seed=args.seed,
                  workers=args.threads or settings.MAX_WORKERS)
    manifest = RunManifest.create("mc", _identity(args), [args.seed])
    report = asyncio.run(mc_analysis(plant, args.kind, plan, controller, args.inputs, args.outputs))
    path = write_report(_report_path(args, "mc.json"), report.to_dict(), manifest.finish())
    print(json.dumps({"worst": report.worst, "samples": report.samples, "report": str(path)}))
    return EXIT_OK


def cmd_study(args: argparse.Namespace) -> int:
    plant, controller, _ = load_plant(args)
    query = _worstcase_query(args)
    manifest = RunManifest.create("study", _identity(args), [args.seed])
    study = asyncio.run(repeat_study(plant, query, args.repeats, args.threshold, controller))
    path = write_report(_report_path(args, "study.json"), study.to_dict(), manifest.finish())
    write_plot_table(path.with_suffix(".csv"), study_plot_table(study, args.kind))
    print(json.dumps({"successes": study.successes, "repeats": args.repeats, "report": str(path)}))
    return EXIT_OK


def _synthesis_file(args: argparse.Namespace, spec: Any) -> SynthesisFile:
    if args.config:
        p = Path(args.config)
        if not p.is_file():
            raise ModelFileError(f"綜合配置不存在: {p}")
        try:
            return SynthesisFile(**json.loads(p.read_text(encoding="utf-8")))
        except json.JSONDecodeError as e:
            raise ModelFileError(f"綜合配置無效 {p}: {e}") from e
    if spec is None:
        raise ModelFileError("模型文件需要配合 --config 使用")
    return default_synthesis_config()


def cmd_synth(args: argparse.Namespace) -> int:
    plant, _, spec = load_plant(args, closed=False)
    synthesis = _synthesis_file(args, spec)
    overrides: Dict[str, Any] = {}
    if args.strategy:
        overrides["strategy"] = args.strategy
    if args.iterations is not None:
        overrides["max_iterations"] = args.iterations
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads:
        overrides["workers"] = args.threads
    config = SynthesisConfig(**{**synthesis.config, **overrides})
    structure = ControllerStructure.from_model(synthesis.structure, plant.n_controls, plant.n_measurements)
    manifest = RunManifest.create("synth", {**_identity(args), "synthesis": synthesis.model_dump()}, [config.seed])
    report_path = _report_path(args, "synth.json")

    try:
        result = asyncio.run(robust_synthesizer.robust_synthesize(plant, synthesis.requirements, structure, config))
    except (IterationBudgetExhausted, TunerBudgetExhausted, ActiveSetStagnation) as e:
        stagnated = isinstance(e, ActiveSetStagnation)
        trace = e.trace.to_dict(include_timings=False) if e.trace is not None else {"events": []}
        payload: Dict[str, Any] = {"status": "stagnated" if stagnated else "budget_exhausted", "error": str(e),
                                   "trace": trace}
        active_set = getattr(e, "active_set", None)
        if active_set is not None:
            payload["active_set"] = active_set.to_dict()
        path = write_report(report_path, payload, manifest.finish(),
                            timings=e.trace.metrics() if e.trace is not None else None)
        write_plot_table(path.with_suffix(".csv"), trace_plot_table(trace))
        logger.error(f"綜合未完成: {e}")
        return EXIT_SEARCH if stagnated else EXIT_BUDGET

    payload = {"status": "certified", **result.to_dict(include_timings=False)}
    path = write_report(report_path, payload, manifest.finish(), timings=result.trace.metrics())
    controller_path = path.with_name(f"{path.stem}.controller.json")
    controller_path.write_text(json.dumps(result.controller.to_model().model_dump(), indent=2), encoding="utf-8")
    write_plot_table(path.with_suffix(".csv"), trace_plot_table(payload["trace"]))
    print(json.dumps({"beta": result.beta, "active_set_size": len(result.active_set), "report": str(path)}))
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    source, name = parse_model_argument(args.model)
    if source != "benchmark":
        raise ModelFileError("export 只接受 benchmark:<name>")
    plant, spec = load_benchmark(name)
    out_dir = Path(args.output_dir or settings.REPORT_DIR)
    dump_model_file(plant, out_dir / f"{name}.model.json")
    baseline = baseline_controller(spec)
    controller = ControllerMatrices(A=baseline.A.tolist(), B=baseline.B.tolist(),
                                    C=baseline.C.tolist(), D=baseline.D.tolist())
    (out_dir / f"{name}.controller.json").write_text(json.dumps(controller.model_dump(), indent=2),
                                                      encoding="utf-8")
    logger.success(f"基準模型 {name} 已導出到 {out_dir}")
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("model", help="模型文件路徑或 benchmark:<name>")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="工作線程上限")
    p.add_argument("--report", default=None, help="報告路徑")
    p.add_argument("--output-dir", default=None)
    p.add_argument("--log-level", default=None)


def _add_analysis(p: argparse.ArgumentParser):
    p.add_argument("--kind", choices=["stability", "hinf", "h2"], default="stability")
    p.add_argument("--inputs", type=int, nargs="+", default=None)
    p.add_argument("--outputs", type=int, nargs="+", default=None)
    p.add_argument("--controller", default=None, help="控制器文件（JSON）")
    p.add_argument("--open-loop", action="store_true", help="基準模型不閉合基線控制器")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustwc", description="不確定系統的最壞情況分析與魯棒綜合")
    sub = parser.add_subparsers(dest="command", required=True)

    wc = sub.add_parser("wc", help="多起點最壞情況搜索")
    _add_common(wc)
    _add_analysis(wc)
    wc.add_argument("--explorer", choices=["pso", "mc", "none"], default="pso")
    wc.add_argument("--starts", type=int, default=settings.WC_N_STARTS)
    wc.add_argument("--samples", type=int, default=None, help="MC 探索的樣本數")
    wc.set_defaults(handler=cmd_wc)

    mc = sub.add_parser("mc", help="Monte-Carlo 抽樣")
    _add_common(mc)
    _add_analysis(mc)
    mc.add_argument("--gamma", type=float, default=None)
    mc.add_argument("--epsilon", type=float, default=None)
    mc.add_argument("--samples", type=int, default=None)
    mc.set_defaults(handler=cmd_mc)

    study = sub.add_parser("study", help="多種子重複搜索")
    _add_common(study)
    _add_analysis(study)
    study.add_argument("--explorer", choices=["pso", "mc", "none"], default="pso")
    study.add_argument("--starts", type=int, default=settings.WC_N_STARTS)
    study.add_argument("--samples", type=int, default=None)
    study.add_argument("--repeats", type=int, default=10)
    study.add_argument("--threshold", type=float, default=None)
    study.set_defaults(handler=cmd_study)

    synth = sub.add_parser("synth", help="魯棒控制器綜合")
    synth.add_argument("model", help="模型文件路徑或 benchmark:<name>")
    synth.add_argument("--config", default=None, help="綜合配置文件")
    synth.add_argument("--strategy", choices=["s1", "s2", "s3"], default=None)
    synth.add_argument("--iterations", type=int, default=None)
    synth.add_argument("--seed", type=int, default=None)
    synth.add_argument("--threads", type=int, default=None)
    synth.add_argument("--report", default=None)
    synth.add_argument("--output-dir", default=None)
    synth.add_argument("--log-level", default=None)
    synth.set_defaults(handler=cmd_synth)

    export = sub.add_parser("export", help="把基準模型寫成模型文件")
    export.add_argument("model", help="benchmark:<name>")
    export.add_argument("--output-dir", default=None)
    export.add_argument("--log-level", default=None)
    export.set_defaults(handler=cmd_export)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    setup_logging(args.log_level, sink=sys.stderr)
    try:
        return args.handler(args)
    except FeasibleDrawTimeout as e:
        logger.error(f"可行樣本不足: {e}")
        return EXIT_SEARCH
    except INPUT_ERRORS as e:
        logger.error(f"輸入錯誤: {e}")
        return EXIT_INPUT
    except RobustAnalysisError as e:
        logger.error(f"搜索失敗: {e}")
        return EXIT_SEARCH


if __name__ == "__main__":
    sys.exit(main())
