"""
報告輸出：JSON 報告、運行清單與繪圖用 CSV 表

報告本體只含確定性內容；牆鐘時間、主機信息與計時寫入旁邊的 .run.json，
因此相同清單的兩次運行得到逐字節相同的報告。
"""

import hashlib
import json
import math
import platform
import time
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, Field

from app.core.config import settings
from app.services.worstcase import SearchReport, StudyResult

PathLike = Union[str, Path]

UNITS = {"stability": "1/s", "hinf": "gain", "h2": "gain^2"}
_SPECIAL_FLOATS = {"inf": math.inf, "-inf": -math.inf, "nan": math.nan}


def to_jsonable(value: Any) -> Any:
    """numpy 與非有限浮點轉為 JSON 可表示的值（inf 寫成字符串）"""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    return value


def _from_jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _from_jsonable(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_from_jsonable(v) for v in value]
    if isinstance(value, str) and value in _SPECIAL_FLOATS:
        return _SPECIAL_FLOATS[value]
    return value


def config_hash(config: Dict[str, Any]) -> str:
    text = json.dumps(to_jsonable(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class RunManifest(BaseModel):
    command: str
    arguments: Dict[str, Any] = Field(default_factory=dict)
    config_hash: str
    seeds: List[int] = Field(default_factory=list)
    version: str = Field(default_factory=lambda: settings.VERSION)
    started_at: float = Field(default_factory=time.time)
    wall_clock: Optional[float] = None
    host: Dict[str, str] = Field(default_factory=lambda: {
        "node": platform.node(), "python": platform.python_version(), "platform": platform.platform()})

    @classmethod
    def create(cls, command: str, arguments: Dict[str, Any], seeds: Sequence[int]) -> "RunManifest":
        return cls(command=command, arguments=to_jsonable(arguments), config_hash=config_hash(arguments),
                   seeds=[int(s) for s in seeds])

    def finish(self) -> "RunManifest":
        self.wall_clock = time.time() - self.started_at
        return self

    def identity(self) -> Dict[str, Any]:
        """決定數值輸出的部分"""
        return {"command": self.command, "arguments": self.arguments, "config_hash": self.config_hash,
                "seeds": self.seeds, "version": self.version}

    def run_info(self) -> Dict[str, Any]:
        return {"started_at": datetime.fromtimestamp(self.started_at).isoformat(),
                "wall_clock": self.wall_clock, "host": self.host}


def _dump(payload: Dict[str, Any]) -> str:
    return json.dumps(to_jsonable(payload), indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def write_report(path: PathLike, result: Dict[str, Any], manifest: RunManifest,
                 timings: Optional[Dict[str, Any]] = None) -> Path:
    """
    寫出報告與旁路運行信息

    Returns:
        報告路徑；運行信息寫在同目錄的 <stem>.run.json
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_dump({"manifest": manifest.identity(), "result": result}), encoding="utf-8")
    run_path = path.with_name(f"{path.stem}.run.json")
    run_path.write_text(_dump({**manifest.run_info(), "timings": timings or {}}), encoding="utf-8")
    logger.info(f"報告已寫入 {path}")
    return path


def read_report(path: PathLike) -> Dict[str, Any]:
    return _from_jsonable(json.loads(Path(path).read_text(encoding="utf-8")))


def search_plot_table(report: SearchReport, kind: str) -> pd.DataFrame:
    """每個起點一行：僅探索與探索加精修的最壞值"""
    unit = UNITS.get(kind, "1")
    rows = [{
        "run": r.index,
        f"explorer_worst[{unit}]": r.explorer_worst,
        f"refined_worst[{unit}]": r.refined_worst,
        f"best_worst[{unit}]": r.best_worst,
        "evaluations": r.evaluations,
        "destabilized": bool(r.destabilizers),
    } for r in report.runs]
    columns = ["run", f"explorer_worst[{unit}]", f"refined_worst[{unit}]", f"best_worst[{unit}]",
               "evaluations", "destabilized"]
    return pd.DataFrame(rows, columns=columns)


def study_plot_table(study: StudyResult, kind: str) -> pd.DataFrame:
    unit = UNITS.get(kind, "1")
    return pd.DataFrame({
        "repeat": list(range(len(study.seeds))),
        "seed": study.seeds,
        f"explorer_worst[{unit}]": study.explorer_worst,
        f"refined_worst[{unit}]": study.refined_worst,
    })


def trace_plot_table(trace_dict: Dict[str, Any]) -> pd.DataFrame:
    rows = [{
        "iteration": e["iteration"],
        "step": e["step"],
        "outcome": e["outcome"],
        "added": len(e["added"]),
    } for e in trace_dict["events"]]
    return pd.DataFrame(rows, columns=["iteration", "step", "outcome", "added"])


def write_plot_table(path: PathLike, frame: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=settings.REPORT_FLOAT_FORMAT)
    return path


def read_plot_table(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path)
