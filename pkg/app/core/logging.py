import sys
from pathlib import Path
from typing import Optional, TextIO

from loguru import logger
from app.core.config import settings


def setup_logging(level: Optional[str] = None, sink: Optional[TextIO] = None):
    """設置日誌配置

    Args:
        level: 覆蓋 settings.LOG_LEVEL
        sink: 控制台輸出流，CLI 使用 stderr 以保持報告輸出乾淨
    """
    level = level or settings.LOG_LEVEL

    # 清除默認處理器
    logger.remove()

    # 添加控制台處理器
    logger.add(
        sink or sys.stdout,
        format=settings.LOG_FORMAT,
        level=level,
        colorize=sink is None
    )

    # 添加文件處理器
    if settings.LOG_TO_FILE:
        logger.add(
            str(Path(settings.LOG_DIR) / "robustwc.log"),
            format=settings.LOG_FORMAT,
            level=level,
            rotation="1 day",
            retention="30 days",
            compression="zip"
        )

    logger.debug(f"日誌系統已初始化，級別: {level}")
