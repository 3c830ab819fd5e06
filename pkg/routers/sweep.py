import json
import os
from typing import Dict, Optional

from fastapi import APIRouter, HTTPException
from loguru import logger
from pydantic import BaseModel, Field

from scripts.errors import ConfigError
from scripts.run_config import validate_sweep_spec
from scripts.sweep import aggregate, run_sweep
from scripts.utils import get_output_path

router = APIRouter()


class SweepRunRequest(BaseModel):
    """扫描请求模型"""
    spec: Dict = Field(..., description="扫描配置，字段与扫描文件相同")
    jobs: Optional[int] = Field(default=1, ge=1, description="并行进程数")


@router.post("/run", summary="运行网格扫描")
def run_sweep_endpoint(request: SweepRunRequest):
    try:
        spec = validate_sweep_spec(request.spec)
        output_dir = os.path.dirname(get_output_path('sweeps', spec.name, 'results.csv'))
        frame = run_sweep(spec, output_dir, jobs=request.jobs, show_progress=False)
        summary = aggregate(frame)
        return {
            "status": "success",
            "message": f"扫描 {spec.name} 已完成，共 {len(frame)} 行",
            "data": {
                "output_dir": output_dir,
                "rows": len(frame),
                "failed": int((frame['status'] == 'error').sum()) if not frame.empty else 0,
                "aggregate": json.loads(summary.to_json(orient='records')) if not summary.empty else []
            }
        }
    except ConfigError as e:
        raise HTTPException(status_code=400, detail=f"扫描配置无效: {str(e)}")
    except Exception as e:
        logger.exception(f"错误: 扫描失败: {e}")
        raise HTTPException(status_code=500, detail=f"扫描失败: {str(e)}")
