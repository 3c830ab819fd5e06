import os
from typing import Dict, List, Optional

from fastapi import APIRouter, HTTPException
from loguru import logger
from pydantic import BaseModel, Field

from scripts.errors import ConfigError, DimensionError, DomainError
from scripts.run_config import build_train_config, config_hash
from scripts.run_store import execute_run, load_summary
from scripts.utils import get_output_root

router = APIRouter()


class TrainRunRequest(BaseModel):
    """训练请求模型"""
    config: Dict = Field(default_factory=dict, description="运行配置，字段与配置文件相同")
    overrides: List[str] = Field(default_factory=list, description="key=value 形式的覆盖项")
    seed: Optional[int] = None


def run_dir_for(run_hash: str) -> str:
    return os.path.join(get_output_root(), 'runs', run_hash)


@router.post("/run", summary="运行一次训练")
def run_training(request: TrainRunRequest):
    """同步运行一次训练并返回 summary；发散的运行也作为结果返回"""
    try:
        config = build_train_config(request.config, request.overrides, request.seed)
        run_hash = config_hash(config)
        result = execute_run(config, run_dir_for(run_hash))
        return {
            "status": "diverged" if result.diverged else "success",
            "message": result.failure or f"运行 {run_hash} 已完成",
            "data": result.summary()
        }
    except (ConfigError, DomainError, DimensionError) as e:
        raise HTTPException(status_code=400, detail=f"配置无效: {str(e)}")
    except Exception as e:
        logger.exception(f"错误: 训练失败: {e}")
        raise HTTPException(status_code=500, detail=f"训练失败: {str(e)}")


@router.get("/runs/{run_hash}", summary="获取运行结果")
def get_run(run_hash: str):
    run_dir = run_dir_for(run_hash)
    if not os.path.exists(os.path.join(run_dir, 'summary.json')):
        raise HTTPException(status_code=404, detail=f"运行不存在: {run_hash}")
    return {
        "status": "success",
        "message": "获取成功",
        "data": load_summary(run_dir)
    }
